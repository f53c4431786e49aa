//! Pointwise, shape, matrix-product, and normalization ops on the tape.
//!
//! Every op output is materialized in standard (row-major, contiguous)
//! layout, so downstream kernels never see exotic strides. Shape mismatches
//! are programmer errors and panic; data-dependent failures exist only in
//! the projective ops (see `homography.rs`).

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn, Slice, Zip};

use super::graph::{Backward, Ctx, Graph, TensorId};

/// Shared epsilon for the variance denominators of all normalization ops.
pub const NORM_EPS: f64 = 1e-5;

pub(crate) fn standard(v: ArrayD<f64>) -> ArrayD<f64> {
    if v.is_standard_layout() {
        v
    } else {
        v.as_standard_layout().into_owned()
    }
}

fn std_view(v: ArrayViewD<'_, f64>) -> ArrayD<f64> {
    v.as_standard_layout().into_owned()
}

/// Sums `g` down to `shape` (reversing a numpy-style broadcast): extra
/// leading axes are summed away, then axes where `shape` is 1.
pub(crate) fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut r = g.to_owned();
    while r.ndim() > shape.len() {
        r = r.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    r
}

/// Pads `shape` with leading 1s to `ndim` entries (broadcast alignment).
fn pad_shape(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut s = vec![1; ndim - shape.len()];
    s.extend_from_slice(shape);
    s
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

struct AddBack;
impl Backward for AddBack {
    fn backward(&self, _: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct SubBack;
impl Backward for SubBack {
    fn backward(&self, _: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        vec![Some(g.clone()), Some(-g)]
    }
}

struct MulBack;
impl Backward for MulBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let da = ctx.needs_grad(0).then(|| g * ctx.parent(1));
        let db = ctx.needs_grad(1).then(|| g * ctx.parent(0));
        vec![da, db]
    }
}

struct ScaleBack(f64);
impl Backward for ScaleBack {
    fn backward(&self, _: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        vec![Some(g * self.0)]
    }
}

struct AddBcastBack;
impl Backward for AddBcastBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let da = ctx.needs_grad(0).then(|| g.clone());
        let db = ctx
            .needs_grad(1)
            .then(|| {
                let bshape = ctx.parent(1).shape().to_vec();
                reduce_to_shape(g, &pad_shape(&bshape, g.ndim()))
                    .into_shape_with_order(IxDyn(&bshape))
                    .unwrap()
            });
        vec![da, db]
    }
}

struct ReluBack;
impl Backward for ReluBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let x = ctx.parent(0);
        let mut dx = g.clone();
        Zip::from(&mut dx).and(x).for_each(|d, &x| {
            if x <= 0.0 {
                *d = 0.0;
            }
        });
        vec![Some(dx)]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct GeluBack;
impl Backward for GeluBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let mut dx = g.clone();
        Zip::from(&mut dx).and(ctx.parent(0)).for_each(|d, &x| *d *= gelu_grad(x));
        vec![Some(dx)]
    }
}

struct AbsBack;
impl Backward for AbsBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let mut dx = g.clone();
        Zip::from(&mut dx).and(ctx.parent(0)).for_each(|d, &x| {
            *d *= if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        vec![Some(dx)]
    }
}

struct SquareBack;
impl Backward for SquareBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let mut dx = g.clone();
        Zip::from(&mut dx).and(ctx.parent(0)).for_each(|d, &x| *d *= 2.0 * x);
        vec![Some(dx)]
    }
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

struct SumBack {
    in_shape: Vec<usize>,
}
impl Backward for SumBack {
    fn backward(&self, _: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let s = g.iter().next().copied().unwrap();
        vec![Some(ArrayD::from_elem(IxDyn(&self.in_shape), s))]
    }
}

struct MeanBack {
    in_shape: Vec<usize>,
    n: f64,
}
impl Backward for MeanBack {
    fn backward(&self, _: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let s = g.iter().next().copied().unwrap() / self.n;
        vec![Some(ArrayD::from_elem(IxDyn(&self.in_shape), s))]
    }
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

struct ReshapeBack {
    in_shape: Vec<usize>,
}
impl Backward for ReshapeBack {
    fn backward(&self, _: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        vec![Some(
            standard(g.clone())
                .into_shape_with_order(IxDyn(&self.in_shape))
                .unwrap(),
        )]
    }
}

struct PermuteBack {
    axes: Vec<usize>,
}
impl Backward for PermuteBack {
    fn backward(&self, _: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let mut inverse = vec![0usize; self.axes.len()];
        for (i, &a) in self.axes.iter().enumerate() {
            inverse[a] = i;
        }
        vec![Some(std_view(g.view().permuted_axes(IxDyn(&inverse))))]
    }
}

struct ConcatBack {
    axis: usize,
    sizes: Vec<usize>,
}
impl Backward for ConcatBack {
    fn backward(&self, _: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut start = 0isize;
        for &s in &self.sizes {
            let end = start + s as isize;
            out.push(Some(std_view(
                g.slice_axis(Axis(self.axis), Slice::new(start, Some(end), 1)),
            )));
            start = end;
        }
        out
    }
}

fn roll_axis(v: &ArrayD<f64>, axis: usize, shift: isize) -> ArrayD<f64> {
    let len = v.shape()[axis] as isize;
    let s = shift.rem_euclid(len);
    if s == 0 {
        return v.clone();
    }
    // out[i] = in[(i - s) mod len]: front block comes from the tail.
    let tail = v.slice_axis(Axis(axis), Slice::new(len - s, None, 1));
    let head = v.slice_axis(Axis(axis), Slice::new(0, Some(len - s), 1));
    concatenate(Axis(axis), &[tail, head]).unwrap()
}

struct RollBack {
    shifts: Vec<(usize, isize)>,
}
impl Backward for RollBack {
    fn backward(&self, _: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let mut r = g.clone();
        for &(axis, shift) in self.shifts.iter().rev() {
            r = roll_axis(&r, axis, -shift);
        }
        vec![Some(standard(r))]
    }
}

struct GatherRowsBack {
    idx: std::sync::Arc<Vec<usize>>,
    rows: usize,
}
impl Backward for GatherRowsBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let cols = ctx.parent(0).shape()[1];
        let mut dt = ArrayD::zeros(IxDyn(&[self.rows, cols]));
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let mut dt2 = dt.view_mut().into_dimensionality::<Ix2>().unwrap();
        for (i, &r) in self.idx.iter().enumerate() {
            let src = g2.row(i);
            let mut dst = dt2.row_mut(r);
            dst += &src;
        }
        vec![Some(dt)]
    }
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

struct MatmulBack;
impl Backward for MatmulBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let a = ctx.parent(0).view().into_dimensionality::<Ix2>().unwrap();
        let b = ctx.parent(1).view().into_dimensionality::<Ix2>().unwrap();
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let da = ctx.needs_grad(0).then(|| g2.dot(&b.t()).into_dyn());
        let db = ctx.needs_grad(1).then(|| a.t().dot(&g2).into_dyn());
        vec![da, db]
    }
}

struct BmmBack;
impl Backward for BmmBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let a = ctx.parent(0).view().into_dimensionality::<Ix3>().unwrap();
        let b = ctx.parent(1).view().into_dimensionality::<Ix3>().unwrap();
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let batch = a.shape()[0];
        let da = ctx.needs_grad(0).then(|| {
            let mut da = ndarray::Array3::zeros((batch, a.shape()[1], a.shape()[2]));
            for i in 0..batch {
                let d = g3.index_axis(Axis(0), i).dot(&b.index_axis(Axis(0), i).t());
                da.index_axis_mut(Axis(0), i).assign(&d);
            }
            da.into_dyn()
        });
        let db = ctx.needs_grad(1).then(|| {
            let mut db = ndarray::Array3::zeros((batch, b.shape()[1], b.shape()[2]));
            for i in 0..batch {
                let d = a.index_axis(Axis(0), i).t().dot(&g3.index_axis(Axis(0), i));
                db.index_axis_mut(Axis(0), i).assign(&d);
            }
            db.into_dyn()
        });
        vec![da, db]
    }
}

// ---------------------------------------------------------------------------
// softmax / normalization
// ---------------------------------------------------------------------------

struct SoftmaxBack;
impl Backward for SoftmaxBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let y = ctx.out();
        let d = y.shape()[y.ndim() - 1];
        let rows = y.len() / d;
        let y2 = y.view().into_shape_with_order((rows, d)).unwrap();
        let g2 = standard(g.clone());
        let g2 = g2.view().into_shape_with_order((rows, d)).unwrap();
        let mut dx = ndarray::Array2::zeros((rows, d));
        for r in 0..rows {
            let yr = y2.row(r);
            let gr = g2.row(r);
            let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
            let mut dr = dx.row_mut(r);
            for i in 0..d {
                dr[i] = yr[i] * (gr[i] - dot);
            }
        }
        vec![Some(
            dx.into_dyn()
                .into_shape_with_order(y.raw_dim())
                .unwrap(),
        )]
    }
}

/// Row-wise mean/inverse-stddev used by all normalization kernels.
fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Gradient of `y = xh*γ + β` with `xh = (x-μ)·r` for one normalization row;
/// writes dx and accumulates dγ/dβ (caller maps `k` to the affine index).
#[allow(clippy::too_many_arguments)]
fn row_norm_backward(
    x: &[f64],
    g: &[f64],
    gamma_at: &dyn Fn(usize) -> f64,
    eps: f64,
    dx: &mut [f64],
    mut dgamma_at: impl FnMut(usize, f64),
    mut dbeta_at: impl FnMut(usize, f64),
) {
    let n = x.len() as f64;
    let (mean, r) = row_stats(x, eps);
    let mut sum_dxh = 0.0;
    let mut sum_dxh_xh = 0.0;
    for k in 0..x.len() {
        let xh = (x[k] - mean) * r;
        let dxh = g[k] * gamma_at(k);
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh;
        dgamma_at(k, g[k] * xh);
        dbeta_at(k, g[k]);
    }
    let m1 = sum_dxh / n;
    let m2 = sum_dxh_xh / n;
    for k in 0..x.len() {
        let xh = (x[k] - mean) * r;
        let dxh = g[k] * gamma_at(k);
        dx[k] = r * (dxh - m1 - xh * m2);
    }
}

/// Normalization over contiguous rows of a standard-layout tensor.
/// `affine(row, k)` maps a row element to its γ/β index.
struct RowNormBack {
    row_len: usize,
    affine_len: usize,
    affine: fn(usize, usize, &RowNormMeta) -> usize,
    meta: RowNormMeta,
    eps: f64,
}

#[derive(Clone, Copy)]
struct RowNormMeta {
    channels: usize,
    group_width: usize, // channels per group (group_norm), else 0
    spatial: usize,     // H*W for channelwise affine, else 0
}

fn affine_lastdim(_row: usize, k: usize, _m: &RowNormMeta) -> usize {
    k
}

fn affine_instance(row: usize, _k: usize, m: &RowNormMeta) -> usize {
    row % m.channels
}

fn affine_group(row: usize, k: usize, m: &RowNormMeta) -> usize {
    let group = row % (m.channels / m.group_width);
    group * m.group_width + k / m.spatial
}

impl Backward for RowNormBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let x = ctx.parent(0);
        let gamma = ctx.parent(1);
        let rows = x.len() / self.row_len;
        let xs = x.as_slice().unwrap();
        let gflat = standard(g.clone());
        let gs = gflat.as_slice().unwrap();
        let gammas = gamma.as_slice().unwrap();
        let mut dx = vec![0.0; x.len()];
        let mut dgamma = vec![0.0; self.affine_len];
        let mut dbeta = vec![0.0; self.affine_len];
        for row in 0..rows {
            let lo = row * self.row_len;
            let hi = lo + self.row_len;
            let aff = |k: usize| (self.affine)(row, k, &self.meta);
            row_norm_backward(
                &xs[lo..hi],
                &gs[lo..hi],
                &|k| gammas[aff(k)],
                self.eps,
                &mut dx[lo..hi],
                |k, v| dgamma[aff(k)] += v,
                |k, v| dbeta[aff(k)] += v,
            );
        }
        let dx = ArrayD::from_shape_vec(x.raw_dim(), dx).unwrap();
        let dgamma = ctx
            .needs_grad(1)
            .then(|| ArrayD::from_shape_vec(IxDyn(&[self.affine_len]), dgamma).unwrap());
        let dbeta = ctx
            .needs_grad(2)
            .then(|| ArrayD::from_shape_vec(IxDyn(&[self.affine_len]), dbeta).unwrap());
        vec![Some(dx), dgamma, dbeta]
    }
}

// ---------------------------------------------------------------------------
// Graph methods
// ---------------------------------------------------------------------------

impl Graph {
    fn assert_same_shape(&self, a: TensorId, b: TensorId, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        self.push(v, vec![a, b], Box::new(AddBack))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        self.push(v, vec![a, b], Box::new(SubBack))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "mul");
        let v = self.value(a) * self.value(b);
        self.push(v, vec![a, b], Box::new(MulBack))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a) * c;
        self.push(v, vec![a], Box::new(ScaleBack(c)))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -1.0)
    }

    /// `a + b` with `b` broadcast to `a`'s shape (numpy trailing-axis rules).
    pub fn add_bcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let bshape = pad_shape(self.value(b).shape(), self.value(a).ndim());
        let bv = self
            .value(b)
            .view()
            .into_shape_with_order(IxDyn(&bshape))
            .unwrap();
        let v = self.value(a) + &bv.broadcast(self.value(a).raw_dim()).expect("broadcast");
        self.push(v, vec![a, b], Box::new(AddBcastBack))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, vec![a], Box::new(ReluBack))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(gelu_val);
        self.push(v, vec![a], Box::new(GeluBack))
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, vec![a], Box::new(AbsBack))
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, vec![a], Box::new(SquareBack))
    }

    /// Sum of all elements (scalar output, shape `[]`→`[1]` as 1-element).
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let in_shape = self.value(a).shape().to_vec();
        let v = ArrayD::from_elem(IxDyn(&[1]), self.value(a).sum());
        self.push(v, vec![a], Box::new(SumBack { in_shape }))
    }

    /// Mean of all elements (scalar output).
    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let in_shape = self.value(a).shape().to_vec();
        let n = self.value(a).len() as f64;
        let v = ArrayD::from_elem(IxDyn(&[1]), self.value(a).sum() / n);
        self.push(v, vec![a], Box::new(MeanBack { in_shape, n }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let in_shape = self.value(a).shape().to_vec();
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(a).len(),
            "reshape: element count mismatch"
        );
        let v = standard(self.value(a).clone())
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        self.push(v, vec![a], Box::new(ReshapeBack { in_shape }))
    }

    pub fn permute(&mut self, a: TensorId, axes: &[usize]) -> TensorId {
        assert_eq!(axes.len(), self.value(a).ndim(), "permute: rank mismatch");
        let v = std_view(self.value(a).view().permuted_axes(IxDyn(axes)));
        self.push(v, vec![a], Box::new(PermuteBack { axes: axes.to_vec() }))
    }

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let views: Vec<_> = parts.iter().map(|&t| self.value(t).view()).collect();
        let v = standard(concatenate(Axis(axis), &views).expect("concat shapes"));
        let sizes = parts.iter().map(|&t| self.value(t).shape()[axis]).collect();
        self.push(v, parts.to_vec(), Box::new(ConcatBack { axis, sizes }))
    }

    /// Cyclic shift along the given axes (positive shift moves content to
    /// higher indices, wrapping around).
    pub fn roll(&mut self, a: TensorId, shifts: &[(usize, isize)]) -> TensorId {
        let mut v = self.value(a).clone();
        for &(axis, shift) in shifts {
            v = roll_axis(&v, axis, shift);
        }
        self.push(
            standard(v),
            vec![a],
            Box::new(RollBack { shifts: shifts.to_vec() }),
        )
    }

    /// Gathers rows of a 2-D table: `out[i] = table[idx[i]]`.
    pub fn gather_rows(&mut self, table: TensorId, idx: std::sync::Arc<Vec<usize>>) -> TensorId {
        let t = self.value(table);
        assert_eq!(t.ndim(), 2, "gather_rows: table must be 2-D");
        let rows = t.shape()[0];
        let cols = t.shape()[1];
        let t2 = t.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = ndarray::Array2::zeros((idx.len(), cols));
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < rows, "gather_rows: index out of range");
            out.row_mut(i).assign(&t2.row(r));
        }
        self.push(
            out.into_dyn(),
            vec![table],
            Box::new(GatherRowsBack { idx, rows }),
        )
    }

    /// 2-D matrix product `(m,k)·(k,n)`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul: inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        self.push(v, vec![a, b], Box::new(MatmulBack))
    }

    /// Batched matrix product `(B,m,k)·(B,k,n)`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.value(a).view().into_dimensionality::<Ix3>().expect("bmm lhs 3-D");
        let bv = self.value(b).view().into_dimensionality::<Ix3>().expect("bmm rhs 3-D");
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm: batch mismatch");
        assert_eq!(av.shape()[2], bv.shape()[1], "bmm: inner dim mismatch");
        let batch = av.shape()[0];
        let mut out = ndarray::Array3::zeros((batch, av.shape()[1], bv.shape()[2]));
        for i in 0..batch {
            let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push(out.into_dyn(), vec![a, b], Box::new(BmmBack))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: TensorId) -> TensorId {
        let x = self.value(a);
        let d = x.shape()[x.ndim() - 1];
        let rows = x.len() / d;
        let xs = standard(x.clone());
        let x2 = xs.view().into_shape_with_order((rows, d)).unwrap();
        let mut y = ndarray::Array2::zeros((rows, d));
        for r in 0..rows {
            let row = x2.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (yv, &xv) in y.row_mut(r).iter_mut().zip(row.iter()) {
                *yv = (xv - max).exp();
                sum += *yv;
            }
            y.row_mut(r).mapv_inplace(|v| v / sum);
        }
        let v = y.into_dyn().into_shape_with_order(x.raw_dim()).unwrap();
        self.push(v, vec![a], Box::new(SoftmaxBack))
    }

    /// Layer normalization over the last axis with per-feature affine.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let d = *self.value(x).shape().last().expect("layer_norm on 0-d");
        assert_eq!(self.value(gamma).shape(), [d], "layer_norm: gamma shape");
        assert_eq!(self.value(beta).shape(), [d], "layer_norm: beta shape");
        self.row_norm(
            x,
            gamma,
            beta,
            d,
            d,
            affine_lastdim,
            RowNormMeta { channels: 0, group_width: 0, spatial: 0 },
        )
    }

    /// Instance normalization of an `(N,C,H,W)` tensor: each `(n,c)` plane
    /// is normalized over its spatial extent, with per-channel affine.
    pub fn instance_norm2d(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4, "instance_norm2d expects (N,C,H,W)");
        let (c, h, w) = (s[1], s[2], s[3]);
        assert_eq!(self.value(gamma).shape(), [c], "instance_norm2d: gamma");
        assert_eq!(self.value(beta).shape(), [c], "instance_norm2d: beta");
        self.row_norm(
            x,
            gamma,
            beta,
            h * w,
            c,
            affine_instance,
            RowNormMeta { channels: c, group_width: 0, spatial: h * w },
        )
    }

    /// Group normalization of an `(N,C,H,W)` tensor over `groups` channel
    /// groups, with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: TensorId,
        groups: usize,
        gamma: TensorId,
        beta: TensorId,
    ) -> TensorId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4, "group_norm expects (N,C,H,W)");
        let (c, h, w) = (s[1], s[2], s[3]);
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
        assert_eq!(self.value(gamma).shape(), [c], "group_norm: gamma");
        assert_eq!(self.value(beta).shape(), [c], "group_norm: beta");
        let width = c / groups;
        self.row_norm(
            x,
            gamma,
            beta,
            width * h * w,
            c,
            affine_group,
            RowNormMeta { channels: c, group_width: width, spatial: h * w },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn row_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        row_len: usize,
        affine_len: usize,
        affine: fn(usize, usize, &RowNormMeta) -> usize,
        meta: RowNormMeta,
    ) -> TensorId {
        let xv = self.value(x);
        assert_eq!(xv.len() % row_len, 0);
        let rows = xv.len() / row_len;
        let xs = xv.as_slice().expect("standard layout");
        let gammas = self.value(gamma).as_slice().unwrap().to_vec();
        let betas = self.value(beta).as_slice().unwrap().to_vec();
        let mut y = vec![0.0; xv.len()];
        for row in 0..rows {
            let lo = row * row_len;
            let (mean, r) = row_stats(&xs[lo..lo + row_len], NORM_EPS);
            for k in 0..row_len {
                let a = affine(row, k, &meta);
                y[lo + k] = (xs[lo + k] - mean) * r * gammas[a] + betas[a];
            }
        }
        let v = ArrayD::from_shape_vec(xv.raw_dim(), y).unwrap();
        self.push(
            v,
            vec![x, gamma, beta],
            Box::new(RowNormBack { row_len, affine_len, affine, meta, eps: NORM_EPS }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_grad, rng_array};

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let x = rng_array(&[3, 4], 1, 1.0);
        check_grad(&x, 1e-6, |g, t| {
            let c = g.input(rng_array(&[3, 4], 2, 1.0));
            let s = g.mul(t, c);
            let s = g.add(s, t);
            let s = g.sub(s, c);
            let s = g.scale(s, 0.7);
            g.sum_all(s)
        });
        check_grad(&x, 1e-6, |g, t| {
            let y = g.square(t);
            g.mean_all(y)
        });
    }

    #[test]
    fn activation_grads_match_finite_differences() {
        // Keep inputs away from the relu/abs kink at zero.
        let mut x = rng_array(&[4, 5], 3, 1.0);
        x.mapv_inplace(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        check_grad(&x, 1e-6, |g, t| {
            let y = g.relu(t);
            g.sum_all(y)
        });
        check_grad(&x, 1e-6, |g, t| {
            let y = g.abs(t);
            g.sum_all(y)
        });
        check_grad(&x, 1e-6, |g, t| {
            let y = g.gelu(t);
            g.sum_all(y)
        });
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let x = rng_array(&[2, 3, 4], 4, 1.0);
        let b = rng_array(&[3, 1], 5, 1.0);
        check_grad(&x, 1e-6, |g, t| {
            let bt = g.input(b.clone());
            let y = g.add_bcast(t, bt);
            let y = g.square(y);
            g.sum_all(y)
        });
        check_grad(&b, 1e-6, |g, t| {
            let xt = g.input(x.clone());
            let y = g.add_bcast(xt, t);
            let y = g.square(y);
            g.sum_all(y)
        });
    }

    #[test]
    fn shape_op_grads_match_finite_differences() {
        let x = rng_array(&[2, 3, 4], 6, 1.0);
        check_grad(&x, 1e-6, |g, t| {
            let y = g.permute(t, &[2, 0, 1]);
            let y = g.reshape(y, &[4, 6]);
            let y = g.square(y);
            g.sum_all(y)
        });
        check_grad(&x, 1e-6, |g, t| {
            let y = g.roll(t, &[(1, 2), (2, -1)]);
            let w = g.input(rng_array(&[2, 3, 4], 7, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
        check_grad(&x, 1e-6, |g, t| {
            let other = g.input(rng_array(&[2, 2, 4], 8, 1.0));
            let y = g.concat(1, &[t, other]);
            let y = g.square(y);
            g.sum_all(y)
        });
    }

    #[test]
    fn roll_wraps_cyclically() {
        let mut g = Graph::new();
        let x = g.input(
            ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
        );
        let y = g.roll(x, &[(1, 1)]);
        assert_eq!(
            g.value(y).as_slice().unwrap(),
            &[3.0, 0.0, 1.0, 2.0],
            "positive shift moves content toward higher indices"
        );
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let a = rng_array(&[3, 4], 9, 1.0);
        let b = rng_array(&[4, 2], 10, 1.0);
        check_grad(&a, 1e-6, |g, t| {
            let bt = g.input(b.clone());
            let y = g.matmul(t, bt);
            let y = g.square(y);
            g.sum_all(y)
        });
        check_grad(&b, 1e-6, |g, t| {
            let at = g.input(a.clone());
            let y = g.matmul(at, t);
            let y = g.square(y);
            g.sum_all(y)
        });
    }

    #[test]
    fn bmm_matches_per_slice_matmul_and_fd() {
        let a = rng_array(&[2, 3, 4], 11, 1.0);
        let b = rng_array(&[2, 4, 5], 12, 1.0);
        let mut g = Graph::new();
        let at = g.input(a.clone());
        let bt = g.input(b.clone());
        let y = g.bmm(at, bt);
        for i in 0..2 {
            let ai = a.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap().to_owned();
            let bi = b.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap().to_owned();
            let want = ai.dot(&bi);
            let got = g.value(y).index_axis(Axis(0), i).to_owned();
            assert!(want.into_dyn().abs_diff_eq(&got, 1e-12));
        }
        check_grad(&a, 1e-6, |g, t| {
            let bt = g.input(b.clone());
            let y = g.bmm(t, bt);
            let y = g.square(y);
            g.sum_all(y)
        });
        check_grad(&b, 1e-6, |g, t| {
            let at = g.input(a.clone());
            let y = g.bmm(at, t);
            let y = g.square(y);
            g.sum_all(y)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grads_match() {
        let x = rng_array(&[3, 5], 13, 2.0);
        let mut g = Graph::new();
        let t = g.input(x.clone());
        let y = g.softmax_last(t);
        for r in 0..3 {
            let s: f64 = g.value(y).index_axis(Axis(0), r).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        check_grad(&x, 1e-6, |g, t| {
            let y = g.softmax_last(t);
            let w = g.input(rng_array(&[3, 5], 14, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
    }

    #[test]
    fn layer_norm_normalizes_and_grads_match() {
        let x = rng_array(&[4, 6], 15, 2.0);
        let gamma = rng_array(&[6], 16, 0.5);
        let beta = rng_array(&[6], 17, 0.5);
        let mut g = Graph::new();
        let (xt, gt, bt) = (g.input(x.clone()), g.input(gamma.clone()), g.input(beta.clone()));
        let y = g.layer_norm(xt, gt, bt);
        // With γ=1, β=0 the rows would be zero-mean/unit-var; check via the
        // affine-removed reconstruction.
        for r in 0..4 {
            let yr = g.value(y).index_axis(Axis(0), r).to_owned();
            let mut back: Vec<f64> = Vec::new();
            for k in 0..6 {
                back.push((yr[k] - beta[k]) / gamma[k]);
            }
            let mean: f64 = back.iter().sum::<f64>() / 6.0;
            let var: f64 = back.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        for (i, leaf) in [x.clone(), gamma.clone(), beta.clone()].into_iter().enumerate() {
            let (x, gamma, beta) = (x.clone(), gamma.clone(), beta.clone());
            check_grad(&leaf, 1e-5, move |g, t| {
                let xt = if i == 0 { t } else { g.input(x.clone()) };
                let gt = if i == 1 { t } else { g.input(gamma.clone()) };
                let bt = if i == 2 { t } else { g.input(beta.clone()) };
                let y = g.layer_norm(xt, gt, bt);
                let w = g.input(rng_array(&[4, 6], 18, 1.0));
                let y = g.mul(y, w);
                g.sum_all(y)
            });
        }
    }

    #[test]
    fn instance_and_group_norm_grads_match() {
        let x = rng_array(&[2, 4, 3, 3], 19, 2.0);
        let gamma = rng_array(&[4], 20, 0.5);
        let beta = rng_array(&[4], 21, 0.5);
        let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
        check_grad(&x, 1e-5, move |g, t| {
            let gt = g.input(gc.clone());
            let bt = g.input(bc.clone());
            let y = g.instance_norm2d(t, gt, bt);
            let w = g.input(rng_array(&[2, 4, 3, 3], 22, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
        let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
        check_grad(&gamma, 1e-5, move |g, t| {
            let xt = g.input(xc.clone());
            let bt = g.input(bc.clone());
            let y = g.instance_norm2d(xt, t, bt);
            let w = g.input(rng_array(&[2, 4, 3, 3], 23, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
        let (gc, bc) = (gamma.clone(), beta.clone());
        check_grad(&x, 1e-5, move |g, t| {
            let gt = g.input(gc.clone());
            let bt = g.input(bc.clone());
            let y = g.group_norm(t, 2, gt, bt);
            let w = g.input(rng_array(&[2, 4, 3, 3], 24, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
        check_grad(&gamma, 1e-5, move |g, t| {
            let xt = g.input(x.clone());
            let bt = g.input(beta.clone());
            let y = g.group_norm(xt, 2, t, bt);
            let w = g.input(rng_array(&[2, 4, 3, 3], 25, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
    }

    #[test]
    fn group_norm_with_channel_groups_matches_instance_norm() {
        // groups == C makes group_norm degenerate to instance_norm.
        let x = rng_array(&[2, 4, 3, 3], 26, 2.0);
        let gamma = rng_array(&[4], 27, 0.5);
        let beta = rng_array(&[4], 28, 0.5);
        let mut g = Graph::new();
        let (xt, gt, bt) = (g.input(x.clone()), g.input(gamma), g.input(beta));
        let a = g.instance_norm2d(xt, gt, bt);
        let b = g.group_norm(xt, 4, gt, bt);
        assert!(g.value(a).abs_diff_eq(g.value(b), 1e-12));
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let table = rng_array(&[5, 3], 29, 1.0);
        let idx = std::sync::Arc::new(vec![0usize, 2, 2, 4]);
        check_grad(&table, 1e-6, move |g, t| {
            let y = g.gather_rows(t, idx.clone());
            let w = g.input(rng_array(&[4, 3], 30, 1.0));
            let y = g.mul(y, w);
            g.sum_all(y)
        });
    }
}
