//! Differentiable bilinear sampling: image warping (`grid_sample`) and the
//! local correlation-volume readout used by the iterative estimator.
//!
//! All coordinates are `(u, v)` = (column, row) in pixels of the sampled
//! plane. Samples outside the plane read zero, and the operation stays
//! differentiable in both the sampled values and the coordinates.

use ndarray::{ArrayD, IxDyn};

use super::graph::{Backward, Ctx, Graph, TensorId};

/// Bilinear read of a `h×w` plane stored row-major in `plane`, zero outside.
#[inline]
fn bilerp(plane: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        let y = y0 as isize + dy;
        if y < 0 || y >= h as isize {
            continue;
        }
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let x = x0 as isize + dx;
            if x < 0 || x >= w as isize {
                continue;
            }
            acc += wy * wx * plane[y as usize * w + x as usize];
        }
    }
    acc
}

/// Adds `g·weights` onto the four neighbors (scatter of the bilinear read).
#[inline]
fn bilerp_scatter(plane: &mut [f64], h: usize, w: usize, u: f64, v: f64, g: f64) {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        let y = y0 as isize + dy;
        if y < 0 || y >= h as isize {
            continue;
        }
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let x = x0 as isize + dx;
            if x < 0 || x >= w as isize {
                continue;
            }
            plane[y as usize * w + x as usize] += g * wy * wx;
        }
    }
}

/// Derivative of the bilinear read w.r.t. (u, v); out-of-plane neighbors
/// contribute zero, consistent with the zero-padded forward.
#[inline]
fn bilerp_coord_grad(plane: &[f64], h: usize, w: usize, u: f64, v: f64) -> (f64, f64) {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let at = |dy: isize, dx: isize| -> f64 {
        let y = y0 as isize + dy;
        let x = x0 as isize + dx;
        if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let (v00, v01, v10, v11) = (at(0, 0), at(0, 1), at(1, 0), at(1, 1));
    let du = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
    let dv = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
    (du, dv)
}

struct GridSampleBack;

impl Backward for GridSampleBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let img = ctx.parent(0);
        let coords = ctx.parent(1);
        let (n, c, h, w) = {
            let s = img.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (oh, ow) = (coords.shape()[1], coords.shape()[2]);
        let imgs = img.as_slice().unwrap();
        let cs = coords.as_slice().unwrap();
        let gs = g.as_slice().unwrap();
        let mut dimg = ctx.needs_grad(0).then(|| vec![0.0; img.len()]);
        let mut dcoords = ctx.needs_grad(1).then(|| vec![0.0; coords.len()]);
        for s in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let ci = ((s * oh + oy) * ow + ox) * 2;
                    let (u, v) = (cs[ci], cs[ci + 1]);
                    let mut du = 0.0;
                    let mut dv = 0.0;
                    for ch in 0..c {
                        let plane_off = (s * c + ch) * h * w;
                        let go = gs[((s * c + ch) * oh + oy) * ow + ox];
                        if let Some(dimg) = dimg.as_mut() {
                            bilerp_scatter(
                                &mut dimg[plane_off..plane_off + h * w],
                                h,
                                w,
                                u,
                                v,
                                go,
                            );
                        }
                        if dcoords.is_some() {
                            let (gu, gv) = bilerp_coord_grad(
                                &imgs[plane_off..plane_off + h * w],
                                h,
                                w,
                                u,
                                v,
                            );
                            du += go * gu;
                            dv += go * gv;
                        }
                    }
                    if let Some(dc) = dcoords.as_mut() {
                        dc[ci] = du;
                        dc[ci + 1] = dv;
                    }
                }
            }
        }
        vec![
            dimg.map(|d| ArrayD::from_shape_vec(img.raw_dim(), d).unwrap()),
            dcoords.map(|d| ArrayD::from_shape_vec(coords.raw_dim(), d).unwrap()),
        ]
    }
}

struct CorrelationLookupBack {
    radius: usize,
}

impl Backward for CorrelationLookupBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let vol = ctx.parent(0);
        let coords = ctx.parent(1);
        let s = vol.shape();
        let (n, ha, wa, hb, wb) = (s[0], s[1], s[2], s[3], s[4]);
        let k = 2 * self.radius + 1;
        let r = self.radius as f64;
        let vs = vol.as_slice().unwrap();
        let cs = coords.as_slice().unwrap();
        let gs = g.as_slice().unwrap();
        let mut dvol = ctx.needs_grad(0).then(|| vec![0.0; vol.len()]);
        let mut dcoords = ctx.needs_grad(1).then(|| vec![0.0; coords.len()]);
        for sn in 0..n {
            for i in 0..ha {
                for j in 0..wa {
                    let ci = ((sn * ha + i) * wa + j) * 2;
                    let (u, v) = (cs[ci], cs[ci + 1]);
                    let plane_off = ((sn * ha + i) * wa + j) * hb * wb;
                    let plane = &vs[plane_off..plane_off + hb * wb];
                    let mut du = 0.0;
                    let mut dv = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let go = gs
                                [((sn * k * k + dy * k + dx) * ha + i) * wa + j];
                            if go == 0.0 {
                                continue;
                            }
                            let su = u + dx as f64 - r;
                            let sv = v + dy as f64 - r;
                            if let Some(dvol) = dvol.as_mut() {
                                bilerp_scatter(
                                    &mut dvol[plane_off..plane_off + hb * wb],
                                    hb,
                                    wb,
                                    su,
                                    sv,
                                    go,
                                );
                            }
                            if dcoords.is_some() {
                                let (gu, gv) = bilerp_coord_grad(plane, hb, wb, su, sv);
                                du += go * gu;
                                dv += go * gv;
                            }
                        }
                    }
                    if let Some(dc) = dcoords.as_mut() {
                        dc[ci] = du;
                        dc[ci + 1] = dv;
                    }
                }
            }
        }
        vec![
            dvol.map(|d| ArrayD::from_shape_vec(vol.raw_dim(), d).unwrap()),
            dcoords.map(|d| ArrayD::from_shape_vec(coords.raw_dim(), d).unwrap()),
        ]
    }
}

impl Graph {
    /// Bilinear resample: `out[n,c,y,x] = img[n,c]` read at `coords[n,y,x]`.
    /// `img` is `(N,C,H,W)`, `coords` is `(N,Ho,Wo,2)` in pixel units of
    /// `img`; reads outside the image return zero.
    pub fn grid_sample(&mut self, img: TensorId, coords: TensorId) -> TensorId {
        let is = self.value(img).shape().to_vec();
        let cs = self.value(coords).shape().to_vec();
        assert_eq!(is.len(), 4, "grid_sample: image must be (N,C,H,W)");
        assert_eq!(cs.len(), 4, "grid_sample: coords must be (N,Ho,Wo,2)");
        assert_eq!(cs[3], 2, "grid_sample: coords last dim must be 2");
        assert_eq!(is[0], cs[0], "grid_sample: batch mismatch");
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (oh, ow) = (cs[1], cs[2]);
        let imgs = self.value(img).as_slice().unwrap();
        let crd = self.value(coords).as_slice().unwrap();
        let mut out = vec![0.0; n * c * oh * ow];
        for s in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let ci = ((s * oh + oy) * ow + ox) * 2;
                    let (u, v) = (crd[ci], crd[ci + 1]);
                    for ch in 0..c {
                        let plane_off = (s * c + ch) * h * w;
                        out[((s * c + ch) * oh + oy) * ow + ox] =
                            bilerp(&imgs[plane_off..plane_off + h * w], h, w, u, v);
                    }
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
        self.push(v, vec![img, coords], Box::new(GridSampleBack))
    }

    /// Reads a `(2r+1)²` neighborhood out of a correlation volume
    /// `(N,HA,WA,HB,WB)` around per-position centers `coords` `(N,HA,WA,2)`
    /// given in `(u,v)` pixels of the `(HB,WB)` plane. Output channel
    /// `dy·(2r+1)+dx` holds the bilinear read at offset
    /// `(u + dx - r, v + dy - r)`; the center tap is the middle channel.
    pub fn correlation_lookup(
        &mut self,
        vol: TensorId,
        coords: TensorId,
        radius: usize,
    ) -> TensorId {
        let s = self.value(vol).shape().to_vec();
        let cs = self.value(coords).shape().to_vec();
        assert_eq!(s.len(), 5, "correlation_lookup: volume must be (N,HA,WA,HB,WB)");
        assert_eq!(
            &cs[..],
            &[s[0], s[1], s[2], 2],
            "correlation_lookup: coords must be (N,HA,WA,2)"
        );
        let (n, ha, wa, hb, wb) = (s[0], s[1], s[2], s[3], s[4]);
        let k = 2 * radius + 1;
        let r = radius as f64;
        let vs = self.value(vol).as_slice().unwrap();
        let crd = self.value(coords).as_slice().unwrap();
        let mut out = vec![0.0; n * k * k * ha * wa];
        for sn in 0..n {
            for i in 0..ha {
                for j in 0..wa {
                    let ci = ((sn * ha + i) * wa + j) * 2;
                    let (u, v) = (crd[ci], crd[ci + 1]);
                    let plane_off = ((sn * ha + i) * wa + j) * hb * wb;
                    let plane = &vs[plane_off..plane_off + hb * wb];
                    for dy in 0..k {
                        for dx in 0..k {
                            out[((sn * k * k + dy * k + dx) * ha + i) * wa + j] = bilerp(
                                plane,
                                hb,
                                wb,
                                u + dx as f64 - r,
                                v + dy as f64 - r,
                            );
                        }
                    }
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, k * k, ha, wa]), out).unwrap();
        self.push(v, vec![vol, coords], Box::new(CorrelationLookupBack { radius }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_grad, rng_array};

    /// Fractional in-bounds coordinates away from integer crossings so the
    /// finite-difference stencil stays inside one bilinear cell.
    fn safe_coords(shape: &[usize], seed: u64, h: usize, w: usize) -> ArrayD<f64> {
        let mut c = rng_array(shape, seed, 1.0);
        let mut i = 0;
        c.mapv_inplace(|v| {
            let lim = if i % 2 == 0 { w } else { h } as f64 - 2.0;
            i += 1;
            let frac = 0.3 + 0.4 * (v * 0.5 + 0.5); // in [0.3, 0.7]
            (v.abs() * lim).floor().min(lim - 1.0) + frac
        });
        c
    }

    #[test]
    fn grid_sample_matches_scalar_bilinear() {
        let img = rng_array(&[1, 2, 5, 6], 60, 1.0);
        let coords = safe_coords(&[1, 3, 3, 2], 61, 5, 6);
        let mut g = Graph::new();
        let it = g.input(img.clone());
        let ct = g.input(coords.clone());
        let y = g.grid_sample(it, ct);
        for oy in 0..3 {
            for ox in 0..3 {
                let u = coords[[0, oy, ox, 0]];
                let v = coords[[0, oy, ox, 1]];
                for c in 0..2 {
                    let plane: Vec<f64> = img
                        .index_axis(ndarray::Axis(0), 0)
                        .index_axis(ndarray::Axis(0), c)
                        .iter()
                        .copied()
                        .collect();
                    let want = bilerp(&plane, 5, 6, u, v);
                    assert!((g.value(y)[[0, c, oy, ox]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grid_sample_is_zero_outside() {
        let img = rng_array(&[1, 1, 4, 4], 62, 1.0);
        let mut coords = ArrayD::zeros(IxDyn(&[1, 1, 3, 2]));
        coords[[0, 0, 0, 0]] = -5.0;
        coords[[0, 0, 0, 1]] = 1.0;
        coords[[0, 0, 1, 0]] = 1.0;
        coords[[0, 0, 1, 1]] = 9.0;
        coords[[0, 0, 2, 0]] = 3.5; // straddles the right edge: half weight
        coords[[0, 0, 2, 1]] = 0.0;
        let mut g = Graph::new();
        let it = g.input(img.clone());
        let ct = g.input(coords);
        let y = g.grid_sample(it, ct);
        assert_eq!(g.value(y)[[0, 0, 0, 0]], 0.0);
        assert_eq!(g.value(y)[[0, 0, 0, 1]], 0.0);
        let edge = g.value(y)[[0, 0, 0, 2]];
        assert!((edge - 0.5 * img[[0, 0, 0, 3]]).abs() < 1e-12);
    }

    #[test]
    fn grid_sample_grads_match_finite_differences() {
        let img = rng_array(&[2, 2, 5, 5], 63, 1.0);
        let coords = safe_coords(&[2, 3, 3, 2], 64, 5, 5);
        let cc = coords.clone();
        check_grad(&img, 1e-6, move |g, t| {
            let ct = g.input(cc.clone());
            let y = g.grid_sample(t, ct);
            let w = g.input(rng_array(&[2, 2, 3, 3], 65, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
        check_grad(&coords, 1e-5, move |g, t| {
            let it = g.input(img.clone());
            let y = g.grid_sample(it, t);
            let w = g.input(rng_array(&[2, 2, 3, 3], 66, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
    }

    #[test]
    fn correlation_lookup_center_tap_reads_at_coords() {
        let vol = rng_array(&[1, 3, 3, 6, 6], 67, 1.0);
        let coords = safe_coords(&[1, 3, 3, 2], 68, 6, 6);
        let mut g = Graph::new();
        let vt = g.input(vol.clone());
        let ct = g.input(coords.clone());
        let y = g.correlation_lookup(vt, ct, 1);
        let center = (3 * 3 - 1) / 2; // dy = dx = r
        for i in 0..3 {
            for j in 0..3 {
                let plane: Vec<f64> = vol
                    .slice(ndarray::s![0, i, j, .., ..])
                    .iter()
                    .copied()
                    .collect();
                let want = bilerp(
                    &plane,
                    6,
                    6,
                    coords[[0, i, j, 0]],
                    coords[[0, i, j, 1]],
                );
                assert!((g.value(y)[[0, center, i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correlation_lookup_grads_match_finite_differences() {
        let vol = rng_array(&[1, 2, 2, 5, 5], 69, 1.0);
        let coords = safe_coords(&[1, 2, 2, 2], 70, 5, 5);
        let cc = coords.clone();
        check_grad(&vol, 1e-6, move |g, t| {
            let ct = g.input(cc.clone());
            let y = g.correlation_lookup(t, ct, 1);
            let w = g.input(rng_array(&[1, 9, 2, 2], 71, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
        check_grad(&coords, 1e-5, move |g, t| {
            let vt = g.input(vol.clone());
            let y = g.correlation_lookup(vt, t, 1);
            let w = g.input(rng_array(&[1, 9, 2, 2], 72, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
    }
}
