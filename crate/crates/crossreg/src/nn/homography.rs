//! Differentiable projective ops: batched DLT solve, 3×3 inversion, and
//! grid projection. Together with `grid_sample` these make the whole
//! warp-by-displacement pipeline differentiable end to end, including
//! through the linear solve.
//!
//! Homographies on the tape are `(N, 9)` row-major vectors. `dlt_solve`
//! pins `h[8] = 1` (it is a constant of the parameterization and carries no
//! gradient); `mat3_inverse` returns the exact unnormalized inverse, which
//! projects identically since projection is scale-invariant.

use std::sync::Arc;

use nalgebra::{Matrix3, SVector};
use ndarray::{Array3, ArrayD, IxDyn};

use crate::geometry::{self, CornerDisplacement, GeometryError};

use super::graph::{Backward, Ctx, Graph, TensorId};

/// Gradient of the solution of `A(d)·h = b(d)` w.r.t. the displacement:
/// with `y = A⁻ᵀ·∂L/∂h`, each corner's contribution reduces to
/// `∂L/∂duᵢ = y[2i]·wᵢ` and `∂L/∂dvᵢ = y[2i+1]·wᵢ` where
/// `wᵢ = h₆uᵢ + h₇vᵢ + 1` is the homogeneous coordinate of corner i.
struct DltSolveBack {
    corners: [[f64; 2]; 4],
}

impl Backward for DltSolveBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let d = ctx.parent(0);
        let h = ctx.out();
        let n = d.shape()[0];
        let ds = d.as_slice().unwrap();
        let hs = h.as_slice().unwrap();
        let gs = g.as_slice().unwrap();
        let mut dd = vec![0.0; n * 8];
        for s in 0..n {
            let disp = CornerDisplacement::from_flat(ds[s * 8..s * 8 + 8].try_into().unwrap());
            let (a, _) = geometry::dlt_system(&self.corners, &disp);
            let ghat = SVector::<f64, 8>::from_iterator(gs[s * 9..s * 9 + 8].iter().copied());
            let y = a
                .transpose()
                .lu()
                .solve(&ghat)
                .expect("adjoint solve on a system that solved forward");
            let (h6, h7) = (hs[s * 9 + 6], hs[s * 9 + 7]);
            for i in 0..4 {
                let [u, v] = self.corners[i];
                let w = h6 * u + h7 * v + 1.0;
                dd[s * 8 + 2 * i] = y[2 * i] * w;
                dd[s * 8 + 2 * i + 1] = y[2 * i + 1] * w;
            }
        }
        vec![Some(
            ArrayD::from_shape_vec(IxDyn(&[n, 4, 2]), dd).unwrap(),
        )]
    }
}

/// Gradient of `Y = H⁻¹`: `∂L/∂H = −Yᵀ·(∂L/∂Y)·Yᵀ`.
struct Mat3InverseBack;

impl Backward for Mat3InverseBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let y = ctx.out();
        let n = y.shape()[0];
        let ys = y.as_slice().unwrap();
        let gs = g.as_slice().unwrap();
        let mut dh = vec![0.0; n * 9];
        for s in 0..n {
            let yv = Matrix3::from_row_slice(&ys[s * 9..s * 9 + 9]);
            let gv = Matrix3::from_row_slice(&gs[s * 9..s * 9 + 9]);
            let d = -(yv.transpose() * gv * yv.transpose());
            for r in 0..3 {
                for c in 0..3 {
                    dh[s * 9 + r * 3 + c] = d[(r, c)];
                }
            }
        }
        vec![Some(ArrayD::from_shape_vec(y.raw_dim(), dh).unwrap())]
    }
}

struct ProjectGridBack {
    grid: Arc<Array3<f64>>,
    scale: f64,
}

impl Backward for ProjectGridBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let h = ctx.parent(0);
        let n = h.shape()[0];
        let (gh, gw) = (self.grid.shape()[0], self.grid.shape()[1]);
        let hs = h.as_slice().unwrap();
        let gs = g.as_slice().unwrap();
        let grid = self.grid.as_slice().unwrap();
        let s = self.scale;
        let mut dh = vec![0.0; n * 9];
        for sn in 0..n {
            let hv = &hs[sn * 9..sn * 9 + 9];
            let dv = &mut dh[sn * 9..sn * 9 + 9];
            for p in 0..gh * gw {
                let u = grid[p * 2] * s;
                let v = grid[p * 2 + 1] * s;
                let pw = hv[6] * u + hv[7] * v + hv[8];
                let (w, clamped) = clamp_w(pw);
                let pn = hv[0] * u + hv[1] * v + hv[2];
                let q = hv[3] * u + hv[4] * v + hv[5];
                let gu = gs[sn * gh * gw * 2 + p * 2];
                let gv = gs[sn * gh * gw * 2 + p * 2 + 1];
                let inv_ws = 1.0 / (w * s);
                dv[0] += gu * u * inv_ws;
                dv[1] += gu * v * inv_ws;
                dv[2] += gu * inv_ws;
                dv[3] += gv * u * inv_ws;
                dv[4] += gv * v * inv_ws;
                dv[5] += gv * inv_ws;
                if !clamped {
                    let c = (gu * pn + gv * q) * inv_ws / w;
                    dv[6] -= c * u;
                    dv[7] -= c * v;
                    dv[8] -= c;
                }
            }
        }
        vec![Some(ArrayD::from_shape_vec(h.raw_dim(), dh).unwrap())]
    }
}

/// Keeps the homogeneous denominator away from zero. Real degeneracies are
/// impossible for the warp magnitudes this crate trains on; the clamp only
/// protects transient garbage estimates mid-training from producing NaN.
#[inline]
fn clamp_w(w: f64) -> (f64, bool) {
    if w.abs() >= geometry::W_EPSILON {
        (w, false)
    } else if w >= 0.0 {
        (geometry::W_EPSILON, true)
    } else {
        (-geometry::W_EPSILON, true)
    }
}

impl Graph {
    /// Batched DLT: displacement `(N,4,2)` → row-major homography `(N,9)`
    /// with `h[8] = 1`, solved against the given reference corners.
    /// Fails on rank-deficient systems (degenerate displaced corners).
    pub fn dlt_solve(
        &mut self,
        d: TensorId,
        corners: [[f64; 2]; 4],
    ) -> Result<TensorId, GeometryError> {
        let ds = self.value(d);
        assert_eq!(&ds.shape()[1..], &[4, 2], "dlt_solve: displacement must be (N,4,2)");
        let n = ds.shape()[0];
        let flat = ds.as_slice().unwrap();
        let mut out = vec![0.0; n * 9];
        for s in 0..n {
            let disp =
                CornerDisplacement::from_flat(flat[s * 8..s * 8 + 8].try_into().unwrap());
            let h = geometry::solve_dlt(&corners, &disp)?;
            out[s * 9..s * 9 + 9].copy_from_slice(&h.to_row_major());
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, 9]), out).unwrap();
        Ok(self.push(v, vec![d], Box::new(DltSolveBack { corners })))
    }

    /// Batched exact 3×3 inverse of row-major `(N,9)` matrices (no
    /// rescaling; projection through the result is scale-invariant).
    pub fn mat3_inverse(&mut self, h: TensorId) -> Result<TensorId, GeometryError> {
        let hv = self.value(h);
        assert_eq!(&hv.shape()[1..], &[9], "mat3_inverse: input must be (N,9)");
        let n = hv.shape()[0];
        let hs = hv.as_slice().unwrap();
        let mut out = vec![0.0; n * 9];
        for s in 0..n {
            let m = Matrix3::from_row_slice(&hs[s * 9..s * 9 + 9]);
            let det = m.determinant();
            if !det.is_finite() || det.abs() < 1e-12 {
                return Err(GeometryError::SingularSystem(format!(
                    "batch item {s}: determinant {det:.3e}"
                )));
            }
            let inv = m.try_inverse().ok_or_else(|| {
                GeometryError::SingularSystem(format!("batch item {s}: not invertible"))
            })?;
            for r in 0..3 {
                for c in 0..3 {
                    out[s * 9 + r * 3 + c] = inv[(r, c)];
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, 9]), out).unwrap();
        Ok(self.push(v, vec![h], Box::new(Mat3InverseBack)))
    }

    /// Projects a fixed coordinate grid `(Ho,Wo,2)` through each batched
    /// homography: grid entries are multiplied by `scale` to reach the
    /// pixel units `h` operates in, projected, and divided back, so inputs
    /// and outputs share the grid's unit (e.g. quarter-resolution feature
    /// cells against a full-resolution homography). Output is `(N,Ho,Wo,2)`.
    pub fn project_grid(
        &mut self,
        h: TensorId,
        grid: Arc<Array3<f64>>,
        scale: f64,
    ) -> TensorId {
        let hv = self.value(h);
        assert_eq!(&hv.shape()[1..], &[9], "project_grid: h must be (N,9)");
        assert_eq!(grid.shape()[2], 2, "project_grid: grid must be (Ho,Wo,2)");
        let n = hv.shape()[0];
        let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
        let hs = hv.as_slice().unwrap();
        let gs = grid.as_slice().unwrap();
        let mut out = vec![0.0; n * gh * gw * 2];
        for sn in 0..n {
            let hv = &hs[sn * 9..sn * 9 + 9];
            for p in 0..gh * gw {
                let u = gs[p * 2] * scale;
                let v = gs[p * 2 + 1] * scale;
                let (w, _) = clamp_w(hv[6] * u + hv[7] * v + hv[8]);
                out[sn * gh * gw * 2 + p * 2] =
                    (hv[0] * u + hv[1] * v + hv[2]) / (w * scale);
                out[sn * gh * gw * 2 + p * 2 + 1] =
                    (hv[3] * u + hv[4] * v + hv[5]) / (w * scale);
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, gh, gw, 2]), out).unwrap();
        self.push(v, vec![h], Box::new(ProjectGridBack { grid, scale }))
    }

    /// Full differentiable warp: solves the homography from `d` `(N,4,2)`,
    /// inverts it, projects the image lattice, and backward-samples `img`
    /// `(N,C,H,W)` — the tape twin of `geometry::warp_image`.
    pub fn warp_by_displacement(
        &mut self,
        img: TensorId,
        d: TensorId,
        corners: [[f64; 2]; 4],
    ) -> Result<TensorId, GeometryError> {
        let (h, w) = {
            let s = self.value(img).shape();
            (s[2], s[3])
        };
        let hom = self.dlt_solve(d, corners)?;
        let hinv = self.mat3_inverse(hom)?;
        let grid = Arc::new(crate::geometry::PixelGrid::lattice(h, w).coords);
        let coords = self.project_grid(hinv, grid, 1.0);
        Ok(self.grid_sample(img, coords))
    }
}

/// Reinterprets the motion head's `(N,2,2,2)` output cube — channel = (u,v)
/// component, rows/cols = corner position — as a displacement `(N,4,2)` in
/// TL, TR, BL, BR order.
pub fn cube_to_displacement(g: &mut Graph, cube: TensorId) -> TensorId {
    assert_eq!(
        &g.value(cube).shape()[1..],
        &[2, 2, 2],
        "cube_to_displacement: expected (N,2,2,2)"
    );
    let n = g.value(cube).shape()[0];
    let nhwc = g.permute(cube, &[0, 2, 3, 1]);
    g.reshape(nhwc, &[n, 4, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{assert_close, check_grad, rng_array};
    use ndarray::Array1;

    const CORNERS: [[f64; 2]; 4] = [[0.0, 0.0], [31.0, 0.0], [0.0, 31.0], [31.0, 31.0]];

    fn batch_displacement(seed: u64, n: usize, range: f64) -> ArrayD<f64> {
        rng_array(&[n, 4, 2], seed, range)
    }

    #[test]
    fn dlt_solve_matches_geometry_oracle() {
        let d = batch_displacement(80, 3, 8.0);
        let mut g = Graph::new();
        let dt = g.input(d.clone());
        let h = g.dlt_solve(dt, CORNERS).unwrap();
        for s in 0..3 {
            let flat: Vec<f64> = d.slice(ndarray::s![s, .., ..]).iter().copied().collect();
            let disp = CornerDisplacement::from_flat(flat.try_into().unwrap());
            let want = geometry::solve_dlt(&CORNERS, &disp).unwrap().to_row_major();
            let got: Vec<f64> = g.value(h).slice(ndarray::s![s, ..]).iter().copied().collect();
            assert_close(
                &Array1::from(want.to_vec()).into_dyn(),
                &Array1::from(got).into_dyn(),
                1e-9,
            );
        }
    }

    #[test]
    fn dlt_solve_grad_matches_finite_differences() {
        let d = batch_displacement(81, 2, 6.0);
        check_grad(&d, 1e-6, |g, t| {
            let h = g.dlt_solve(t, CORNERS).unwrap();
            let w = g.input(rng_array(&[2, 9], 82, 1.0));
            let y = g.mul(h, w);
            g.sum_all(y)
        });
    }

    #[test]
    fn mat3_inverse_matches_nalgebra_and_fd() {
        let d = batch_displacement(83, 2, 6.0);
        let mut g = Graph::new();
        let dt = g.input(d.clone());
        let h = g.dlt_solve(dt, CORNERS).unwrap();
        let hinv = g.mat3_inverse(h).unwrap();
        for s in 0..2 {
            let hv: Vec<f64> = g.value(h).slice(ndarray::s![s, ..]).iter().copied().collect();
            let want = Matrix3::from_row_slice(&hv).try_inverse().unwrap();
            for r in 0..3 {
                for c in 0..3 {
                    let got = g.value(hinv)[[s, r * 3 + c]];
                    assert!((got - want[(r, c)]).abs() < 1e-9);
                }
            }
        }
        // FD through inverse on a well-conditioned random matrix batch.
        let mut hmat = rng_array(&[2, 9], 84, 0.3);
        for s in 0..2 {
            hmat[[s, 0]] += 2.0;
            hmat[[s, 4]] += 2.0;
            hmat[[s, 8]] += 2.0;
        }
        check_grad(&hmat, 1e-6, |g, t| {
            let y = g.mat3_inverse(t).unwrap();
            let w = g.input(rng_array(&[2, 9], 85, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
    }

    #[test]
    fn project_grid_matches_geometry_projection() {
        let d = batch_displacement(86, 1, 6.0);
        let flat: Vec<f64> = d.iter().copied().collect();
        let disp = CornerDisplacement::from_flat(flat.try_into().unwrap());
        let hom = geometry::solve_dlt(&CORNERS, &disp).unwrap();

        let mut g = Graph::new();
        let dt = g.input(d);
        let h = g.dlt_solve(dt, CORNERS).unwrap();
        let lattice = geometry::PixelGrid::lattice(8, 8);
        let proj = g.project_grid(h, Arc::new(lattice.coords.clone()), 1.0);
        let want = geometry::project_points(&hom, &lattice);
        assert_close(
            &g.value(proj)
                .view()
                .index_axis(ndarray::Axis(0), 0)
                .to_owned()
                .into_dyn(),
            &want.coords.into_dyn(),
            1e-9,
        );

        // Scaled projection: quarter-resolution grid against the same
        // full-resolution homography equals projecting scaled coordinates
        // and scaling back.
        let qgrid = geometry::PixelGrid::lattice(4, 4);
        let qproj = g.project_grid(h, Arc::new(qgrid.coords.clone()), 4.0);
        for y in 0..4 {
            for x in 0..4 {
                let p = hom.apply([x as f64 * 4.0, y as f64 * 4.0]).unwrap();
                assert!((g.value(qproj)[[0, y, x, 0]] - p[0] / 4.0).abs() < 1e-9);
                assert!((g.value(qproj)[[0, y, x, 1]] - p[1] / 4.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn project_grid_grad_matches_finite_differences() {
        let mut hmat = rng_array(&[2, 9], 87, 0.02);
        for s in 0..2 {
            hmat[[s, 0]] += 1.0;
            hmat[[s, 4]] += 1.0;
            hmat[[s, 8]] += 1.0;
            // keep the perspective row small, as real homographies are
            hmat[[s, 6]] *= 0.01;
            hmat[[s, 7]] *= 0.01;
        }
        let grid = Arc::new(geometry::PixelGrid::lattice(5, 5).coords);
        check_grad(&hmat, 1e-6, move |g, t| {
            let y = g.project_grid(t, grid.clone(), 2.0);
            let w = g.input(rng_array(&[2, 5, 5, 2], 88, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
    }

    #[test]
    fn warp_by_displacement_matches_geometry_warp() {
        let img = rng_array(&[1, 2, 32, 32], 89, 1.0);
        let d = batch_displacement(90, 1, 5.0);
        let mut g = Graph::new();
        let it = g.input(img.clone());
        let dt = g.input(d.clone());
        let warped = g.warp_by_displacement(it, dt, CORNERS).unwrap();

        let flat: Vec<f64> = d.iter().copied().collect();
        let disp = CornerDisplacement::from_flat(flat.try_into().unwrap());
        let hom = geometry::solve_dlt(&CORNERS, &disp).unwrap();
        let img3 = img
            .view()
            .index_axis(ndarray::Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let want = geometry::warp_image(&img3, &hom).unwrap();
        assert_close(
            &g.value(warped)
                .view()
                .index_axis(ndarray::Axis(0), 0)
                .to_owned()
                .into_dyn(),
            &want.into_dyn(),
            1e-9,
        );
    }

    /// End-to-end displacement gradient through solve → invert → project →
    /// sample, the backbone of every training loss in the crate.
    #[test]
    fn warp_gradient_in_displacement_matches_finite_differences() {
        // Smooth image: finite differences through bilinear sampling of
        // white noise would be dominated by interpolation kinks.
        let mut img = ArrayD::zeros(IxDyn(&[1, 1, 24, 24]));
        for y in 0..24 {
            for x in 0..24 {
                img[[0, 0, y, x]] = 0.5
                    + 0.3 * ((0.37 * x as f64).sin() * (0.23 * y as f64).cos())
                    + 0.15 * (0.11 * (x as f64 + 2.0 * y as f64)).sin();
            }
        }
        let corners = geometry::image_corners(24, 24);
        let d = batch_displacement(91, 1, 2.0);
        let ic = img.clone();
        check_grad(&d, 1e-3, move |g, t| {
            let it = g.input(ic.clone());
            let w = g.warp_by_displacement(it, t, corners).unwrap();
            g.mean_all(w)
        });
        check_grad(&img, 1e-6, move |g, t| {
            let dt = g.input(d.clone());
            let w = g.warp_by_displacement(t, dt, corners).unwrap();
            g.mean_all(w)
        });
    }

    #[test]
    fn cube_reshape_maps_channels_to_corner_components() {
        let mut cube = ArrayD::zeros(IxDyn(&[1, 2, 2, 2]));
        // cube[c, i, j]: c = component (0:u, 1:v), (i, j) = corner row/col.
        cube[[0, 0, 0, 0]] = 1.0; // u, TL
        cube[[0, 1, 0, 0]] = 2.0; // v, TL
        cube[[0, 0, 0, 1]] = 3.0; // u, TR
        cube[[0, 1, 0, 1]] = 4.0; // v, TR
        cube[[0, 0, 1, 0]] = 5.0; // u, BL
        cube[[0, 1, 1, 0]] = 6.0; // v, BL
        cube[[0, 0, 1, 1]] = 7.0; // u, BR
        cube[[0, 1, 1, 1]] = 8.0; // v, BR
        let mut g = Graph::new();
        let ct = g.input(cube);
        let d = cube_to_displacement(&mut g, ct);
        let flat: Vec<f64> = g.value(d).iter().copied().collect();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }
}
