//! 2-D convolution and max-pooling kernels.
//!
//! Convolution lowers to GEMM through an im2col buffer laid out
//! `(C·kh·kw, OH·OW)` per sample, so the inner copies run along contiguous
//! output rows. The buffer is rebuilt during backward rather than cached:
//! peak memory stays proportional to one layer's activation instead of one
//! layer's unrolled patches.

use ndarray::{Array2, Array4, ArrayD, Ix4, IxDyn};

use super::graph::{Backward, Ctx, Graph, TensorId};

#[derive(Clone, Copy)]
struct ConvSpec {
    stride: usize,
    pad: usize,
}

fn conv_out_size(inp: usize, k: usize, spec: ConvSpec) -> usize {
    assert!(
        inp + 2 * spec.pad >= k,
        "conv2d: kernel larger than padded input"
    );
    (inp + 2 * spec.pad - k) / spec.stride + 1
}

/// Unrolls one sample `(C,H,W)` into `(C·kh·kw, OH·OW)`; out-of-image taps
/// stay zero.
fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::zeros((c * kh * kw, oh * ow));
    let xs = x.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + i) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = (ci * h + iy as usize) * w;
                    let dst_base = row * oh * ow + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + j) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cs[dst_base + ox] = xs[src_base + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds an unrolled gradient back onto the input plane (inverse of
/// [`im2col`]).
fn col2im(
    dcol: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f64> {
    let mut dx = ndarray::Array3::zeros((c, h, w));
    let ds = dcol.as_slice().unwrap();
    let xs = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + i) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (ci * h + iy as usize) * w;
                    let src_base = row * oh * ow + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + j) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        xs[dst_base + ix as usize] += ds[src_base + ox];
                    }
                }
            }
        }
    }
    dx
}

struct Conv2dBack {
    spec: ConvSpec,
}

impl Backward for Conv2dBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let x = ctx.parent(0).view().into_dimensionality::<Ix4>().unwrap();
        let wt = ctx.parent(1).view().into_dimensionality::<Ix4>().unwrap();
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
        let (oh, ow) = (g4.shape()[2], g4.shape()[3]);
        let w2 = wt
            .to_shape((o, c * kh * kw))
            .unwrap()
            .to_owned();
        let mut dx = ctx
            .needs_grad(0)
            .then(|| Array4::<f64>::zeros((n, c, h, w)));
        let mut dw2 = ctx
            .needs_grad(1)
            .then(|| Array2::<f64>::zeros((o, c * kh * kw)));
        for s in 0..n {
            // g slice as (O, OH·OW)
            let gs = g4
                .index_axis(ndarray::Axis(0), s)
                .to_shape((o, oh * ow))
                .unwrap()
                .to_owned();
            if let Some(dw2) = dw2.as_mut() {
                let col = im2col(&x.index_axis(ndarray::Axis(0), s), kh, kw, self.spec, oh, ow);
                *dw2 += &gs.dot(&col.t());
            }
            if let Some(dx) = dx.as_mut() {
                let dcol = w2.t().dot(&gs);
                let d = col2im(&dcol, c, h, w, kh, kw, self.spec, oh, ow);
                dx.index_axis_mut(ndarray::Axis(0), s).assign(&d);
            }
        }
        vec![
            dx.map(|v| v.into_dyn()),
            dw2.map(|v| {
                v.into_shape_with_order((o, c, kh, kw))
                    .unwrap()
                    .into_dyn()
            }),
        ]
    }
}

struct BiasChannelBack;

impl Backward for BiasChannelBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let db = ctx.needs_grad(1).then(|| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let db = g4
                .sum_axis(ndarray::Axis(3))
                .sum_axis(ndarray::Axis(2))
                .sum_axis(ndarray::Axis(0));
            db.into_dyn()
        });
        vec![Some(g.clone()), db]
    }
}

struct MaxPool2dBack {
    k: usize,
    argmax: Vec<u8>, // flat (dy·k + dx) winner per output element
}

impl Backward for MaxPool2dBack {
    fn backward(&self, ctx: &Ctx<'_>, g: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let x = ctx.parent(0);
        let (n, c, h, w) = {
            let s = x.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (oh, ow) = (h / self.k, w / self.k);
        let gs = g.as_slice().unwrap();
        let mut dx = vec![0.0; x.len()];
        for nc in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let oi = (nc * oh + oy) * ow + ox;
                    let a = self.argmax[oi] as usize;
                    let (dy, dx_) = (a / self.k, a % self.k);
                    let iy = oy * self.k + dy;
                    let ix = ox * self.k + dx_;
                    dx[(nc * h + iy) * w + ix] += gs[oi];
                }
            }
        }
        vec![Some(ArrayD::from_shape_vec(x.raw_dim(), dx).unwrap())]
    }
}

impl Graph {
    /// 2-D convolution of `(N,C,H,W)` by weights `(O,C,kh,kw)` with the
    /// usual floor-division output extent.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        weight: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be (N,C,H,W)");
        assert_eq!(ws.len(), 4, "conv2d: weight must be (O,C,kh,kw)");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        let spec = ConvSpec { stride, pad };
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = conv_out_size(h, kh, spec);
        let ow = conv_out_size(w, kw, spec);
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let w2 = self
            .value(weight)
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap()
            .to_owned();
        let mut out = Array4::zeros((n, o, oh, ow));
        for s in 0..n {
            let col = im2col(&xv.index_axis(ndarray::Axis(0), s), kh, kw, spec, oh, ow);
            let prod = w2.dot(&col); // (O, OH·OW)
            out.index_axis_mut(ndarray::Axis(0), s).assign(
                &prod
                    .into_shape_with_order((o, oh, ow))
                    .unwrap(),
            );
        }
        self.push(out.into_dyn(), vec![x, weight], Box::new(Conv2dBack { spec }))
    }

    /// Adds a per-channel bias `(C,)` to an `(N,C,H,W)` tensor.
    pub fn bias_channel(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "bias_channel: input must be (N,C,H,W)");
        assert_eq!(self.value(bias).shape(), [xs[1]], "bias_channel: shape");
        let b = self
            .value(bias)
            .view()
            .into_shape_with_order(IxDyn(&[1, xs[1], 1, 1]))
            .unwrap()
            .to_owned();
        let v = self.value(x) + &b.broadcast(IxDyn(&xs)).unwrap();
        self.push(v, vec![x, bias], Box::new(BiasChannelBack))
    }

    /// Max pooling with square window `k` and stride `k`; spatial dims must
    /// divide exactly. Ties resolve to the first element in scan order.
    pub fn maxpool2d(&mut self, x: TensorId, k: usize) -> TensorId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "maxpool2d: input must be (N,C,H,W)");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(h % k == 0 && w % k == 0, "maxpool2d: {h}x{w} not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let xsl = self.value(x).as_slice().unwrap();
        let mut out = vec![f64::NEG_INFINITY; n * c * oh * ow];
        let mut argmax = vec![0u8; n * c * oh * ow];
        for nc in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let oi = (nc * oh + oy) * ow + ox;
                    for dy in 0..k {
                        for dx in 0..k {
                            let v = xsl[(nc * h + oy * k + dy) * w + ox * k + dx];
                            if v > out[oi] {
                                out[oi] = v;
                                argmax[oi] = (dy * k + dx) as u8;
                            }
                        }
                    }
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
        self.push(v, vec![x], Box::new(MaxPool2dBack { k, argmax }))
    }
}
