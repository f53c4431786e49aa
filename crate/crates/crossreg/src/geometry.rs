//! Planar projective geometry on the four-corner displacement parameterization.
//!
//! A homography is represented two ways: as a normalized 3×3 matrix
//! ([`HomographyMatrix`], `h[2][2] == 1`) or as the displacement of the four
//! image corners ([`CornerDisplacement`]). [`solve_dlt`] converts displacement
//! to matrix via the direct linear transform;
//! [`displacement_from_homography`] goes the other way. Corner order is fixed
//! throughout the crate: top-left, top-right, bottom-left, bottom-right, with
//! coordinates written `(u, v)` = (column, row) in pixels.
//!
//! Warp convention: a homography maps **source** coordinates to **target**
//! coordinates, so [`warp_image`]`(img, h)` produces the source image
//! resampled onto the target frame by backward sampling through `h⁻¹`.
//! This one convention is used everywhere, including data synthesis.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use ndarray::{Array2, Array3};
use thiserror::Error;

/// Homogeneous coordinates below this magnitude are treated as at infinity.
pub const W_EPSILON: f64 = 1e-8;

/// Errors from geometric operations. Degeneracies are reported, never
/// silently regularized.
#[derive(Debug, Error)]
pub enum GeometryError {
    /// The DLT system matrix is rank-deficient (e.g. displaced corners
    /// collinear), or a matrix has no usable inverse.
    #[error("singular system: {0}")]
    SingularSystem(String),
    /// A corner projected to a point with homogeneous coordinate w ≤ 1e-8.
    #[error("projective overflow: corner {corner} maps to w = {w:.3e}")]
    ProjectiveOverflow { corner: usize, w: f64 },
    /// A matrix entry or input coordinate was NaN/∞.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Offsets of the four image corners in pixels, order TL, TR, BL, BR,
/// each entry `(du, dv)` = (horizontal, vertical).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CornerDisplacement(pub [[f64; 2]; 4]);

impl CornerDisplacement {
    /// The zero displacement (identity homography).
    pub fn zero() -> Self {
        Self([[0.0; 2]; 4])
    }

    /// Flattened view in corner-major order: `[du₁, dv₁, du₂, dv₂, …]`.
    pub fn as_flat(&self) -> [f64; 8] {
        let d = &self.0;
        [
            d[0][0], d[0][1], d[1][0], d[1][1], d[2][0], d[2][1], d[3][0], d[3][1],
        ]
    }

    /// Inverse of [`Self::as_flat`].
    pub fn from_flat(f: [f64; 8]) -> Self {
        Self([[f[0], f[1]], [f[2], f[3]], [f[4], f[5]], [f[6], f[7]]])
    }

    /// Largest absolute entry, useful for range checks.
    pub fn max_abs(&self) -> f64 {
        self.as_flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.as_flat().iter().all(|v| v.is_finite())
    }
}

/// Reference corner coordinates of a `width × height` image:
/// TL `(0,0)`, TR `(w-1,0)`, BL `(0,h-1)`, BR `(w-1,h-1)`.
pub fn image_corners(width: usize, height: usize) -> [[f64; 2]; 4] {
    let w = (width - 1) as f64;
    let h = (height - 1) as f64;
    [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]
}

/// Normalized 3×3 projective transform on pixel coordinates (`h[2][2] == 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyMatrix(Matrix3<f64>);

impl HomographyMatrix {
    /// Validates and normalizes a raw matrix: entries must be finite, the
    /// matrix invertible, and `h[2][2]` far enough from zero to scale by.
    pub fn try_new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("homography matrix"));
        }
        let h33 = m[(2, 2)];
        if h33.abs() < 1e-12 {
            return Err(GeometryError::SingularSystem(
                "h33 too small to normalize".into(),
            ));
        }
        let m = m / h33;
        let det = m.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(GeometryError::SingularSystem(format!(
                "determinant {det:.3e}"
            )));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn as_matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Row-major 9-element serialization, `h[2][2]` last and equal to 1.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self, GeometryError> {
        Self::try_new(Matrix3::new(
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8],
        ))
    }

    /// Inverse transform, computed by adjugate/determinant so that the
    /// inverse of an exact identity is again an exact identity.
    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let m = &self.0;
        let det = m.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(GeometryError::SingularSystem(format!(
                "determinant {det:.3e}"
            )));
        }
        let adj = Matrix3::new(
            m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)],
            m[(0, 2)] * m[(2, 1)] - m[(0, 1)] * m[(2, 2)],
            m[(0, 1)] * m[(1, 2)] - m[(0, 2)] * m[(1, 1)],
            m[(1, 2)] * m[(2, 0)] - m[(1, 0)] * m[(2, 2)],
            m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)],
            m[(0, 2)] * m[(1, 0)] - m[(0, 0)] * m[(1, 2)],
            m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)],
            m[(0, 1)] * m[(2, 0)] - m[(0, 0)] * m[(2, 1)],
            m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        );
        Self::try_new(adj / det)
    }

    /// Composition `(self ∘ other)(x) = self(other(x))`.
    pub fn compose(&self, other: &Self) -> Result<Self, GeometryError> {
        Self::try_new(self.0 * other.0)
    }

    /// Projects a single point; errors if it lands at infinity (w ≤ ε).
    pub fn apply(&self, p: [f64; 2]) -> Result<[f64; 2], GeometryError> {
        let q = self.0 * Vector3::new(p[0], p[1], 1.0);
        if q.z <= W_EPSILON {
            return Err(GeometryError::ProjectiveOverflow { corner: 0, w: q.z });
        }
        Ok([q.x / q.z, q.y / q.z])
    }
}

/// Builds the 8×8 DLT system `A h = b` for the given corners and their
/// displaced positions. Row pair per corner `i`:
/// `[uᵢ vᵢ 1 0 0 0 −uᵢuᵢ′ −vᵢuᵢ′] · h = uᵢ′` and
/// `[0 0 0 uᵢ vᵢ 1 −uᵢvᵢ′ −vᵢvᵢ′] · h = vᵢ′`,
/// with `h = [H₁₁ H₁₂ H₁₃ H₂₁ H₂₂ H₂₃ H₃₁ H₃₂]ᵀ` and `H₃₃ = 1`.
pub(crate) fn dlt_system(
    corners: &[[f64; 2]; 4],
    displacement: &CornerDisplacement,
) -> (SMatrix<f64, 8, 8>, SVector<f64, 8>) {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [u, v] = corners[i];
        let up = u + displacement.0[i][0];
        let vp = v + displacement.0[i][1];
        let r = 2 * i;
        a[(r, 0)] = u;
        a[(r, 1)] = v;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -u * up;
        a[(r, 7)] = -v * up;
        b[r] = up;
        a[(r + 1, 3)] = u;
        a[(r + 1, 4)] = v;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -u * vp;
        a[(r + 1, 7)] = -v * vp;
        b[r + 1] = vp;
    }
    (a, b)
}

/// Solves for the homography that moves each reference corner by the given
/// displacement, via a dense LU solve of the 8×8 DLT system.
///
/// Returns [`GeometryError::SingularSystem`] when the system is
/// rank-deficient (e.g. three displaced corners collinear).
pub fn solve_dlt(
    corners: &[[f64; 2]; 4],
    displacement: &CornerDisplacement,
) -> Result<HomographyMatrix, GeometryError> {
    if !displacement.is_finite() {
        return Err(GeometryError::NonFinite("corner displacement"));
    }
    let (a, b) = dlt_system(corners, displacement);
    let lu = a.lu();
    let h = lu
        .solve(&b)
        .ok_or_else(|| GeometryError::SingularSystem("DLT system rank-deficient".into()))?;
    // LU with a tiny pivot can "succeed" with garbage; a residual check is
    // the honest acceptance test for the solve.
    let residual = (a * h - b).amax();
    if !h.iter().all(|v| v.is_finite()) || residual > 1e-6 * (1.0 + b.amax()) {
        return Err(GeometryError::SingularSystem(format!(
            "DLT residual {residual:.3e}"
        )));
    }
    HomographyMatrix::try_new(Matrix3::new(
        h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0,
    ))
}

/// Projects each reference corner through `h` and returns the offsets from
/// the original corner positions. Inverse of [`solve_dlt`] on the same
/// corner set.
///
/// Returns [`GeometryError::ProjectiveOverflow`] if a corner maps to a point
/// with homogeneous coordinate w ≤ 1e-8.
pub fn displacement_from_homography(
    h: &HomographyMatrix,
    corners: &[[f64; 2]; 4],
) -> Result<CornerDisplacement, GeometryError> {
    let m = h.as_matrix();
    let mut d = [[0.0; 2]; 4];
    for (i, &[u, v]) in corners.iter().enumerate() {
        let q = m * Vector3::new(u, v, 1.0);
        if q.z <= W_EPSILON {
            return Err(GeometryError::ProjectiveOverflow { corner: i, w: q.z });
        }
        d[i] = [q.x / q.z - u, q.y / q.z - v];
    }
    Ok(CornerDisplacement(d))
}

/// Dense grid of (u, v) pixel coordinates, shape `H × W × 2`.
#[derive(Debug, Clone)]
pub struct PixelGrid {
    /// `coords[(y, x)] = [x, y]` in pixels.
    pub coords: Array3<f64>,
}

impl PixelGrid {
    /// The integer lattice of an `height × width` image or feature map.
    pub fn lattice(height: usize, width: usize) -> Self {
        let mut coords = Array3::zeros((height, width, 2));
        for y in 0..height {
            for x in 0..width {
                coords[(y, x, 0)] = x as f64;
                coords[(y, x, 1)] = y as f64;
            }
        }
        Self { coords }
    }

    pub fn height(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[1]
    }
}

/// Projected coordinates plus a validity mask; positions where the
/// homogeneous coordinate came within [`W_EPSILON`] of zero are flagged
/// invalid instead of producing infinities.
#[derive(Debug, Clone)]
pub struct ProjectedGrid {
    pub coords: Array3<f64>,
    pub valid: Array2<bool>,
}

/// Projects every grid point through `h`:
/// `(u, v) ↦ ((h₁·p)/(h₃·p), (h₂·p)/(h₃·p))` with `p = (u, v, 1)`.
pub fn project_points(h: &HomographyMatrix, pts: &PixelGrid) -> ProjectedGrid {
    let m = h.as_matrix();
    let (height, width) = (pts.height(), pts.width());
    let mut coords = Array3::zeros((height, width, 2));
    let mut valid = Array2::from_elem((height, width), true);
    for y in 0..height {
        for x in 0..width {
            let u = pts.coords[(y, x, 0)];
            let v = pts.coords[(y, x, 1)];
            let w = m[(2, 0)] * u + m[(2, 1)] * v + m[(2, 2)];
            if w.abs() < W_EPSILON {
                valid[(y, x)] = false;
                continue;
            }
            coords[(y, x, 0)] = (m[(0, 0)] * u + m[(0, 1)] * v + m[(0, 2)]) / w;
            coords[(y, x, 1)] = (m[(1, 0)] * u + m[(1, 1)] * v + m[(1, 2)]) / w;
        }
    }
    ProjectedGrid { coords, valid }
}

/// Bilinear sample of channel plane `img[c]` at continuous position `(u, v)`;
/// neighbors outside the image contribute zero.
fn bilinear(img: &Array3<f64>, c: usize, u: f64, v: f64) -> f64 {
    let (_, h, w) = img.dim();
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let x = x0 as isize + dx;
            let y = y0 as isize + dy;
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                acc += wy * wx * img[(c, y as usize, x as usize)];
            }
        }
    }
    acc
}

/// Resamples `img` (layout `C × H × W`) onto the target frame of `h`:
/// output pixel `x` reads the input at `h⁻¹ · x` with bilinear
/// interpolation; samples outside the input, or positions where the inverse
/// projection degenerates, fill with zero.
pub fn warp_image(img: &Array3<f64>, h: &HomographyMatrix) -> Result<Array3<f64>, GeometryError> {
    let hinv = h.inverse()?;
    let (channels, height, width) = img.dim();
    let grid = project_points(&hinv, &PixelGrid::lattice(height, width));
    let mut out = Array3::zeros((channels, height, width));
    for y in 0..height {
        for x in 0..width {
            if !grid.valid[(y, x)] {
                continue;
            }
            let u = grid.coords[(y, x, 0)];
            let v = grid.coords[(y, x, 1)];
            for c in 0..channels {
                out[(c, y, x)] = bilinear(img, c, u, v);
            }
        }
    }
    Ok(out)
}
