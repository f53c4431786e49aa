//! Thin layer wrappers: each owns `ParamId`s registered in a [`ParamStore`]
//! and binds them onto whatever tape the current step is building. Layers
//! hold no tensors themselves, so the same weights can serve any number of
//! forward passes per step (shared-weight feature extractors) and any
//! freeze schedule the trainer picks.

use rand::Rng;

use super::graph::{Graph, ParamId, ParamStore, TensorId};
use super::init;

/// 2-D convolution with optional per-channel bias.
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init::kaiming_normal(rng, &[cout, cin, k, k], cin * k * k),
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), init::zeros(&[cout])));
        Self { w, b, stride, pad }
    }

    /// Like [`Conv2d::new`] but with weights and bias set to zero, for
    /// heads whose first prediction must be exactly neutral.
    pub fn new_zeroed(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), init::zeros(&[cout, cin, k, k]));
        let b = Some(ps.add(format!("{name}.b"), init::zeros(&[cout])));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: TensorId) -> TensorId {
        let w = g.bind(ps, self.w);
        let y = g.conv2d(x, w, self.stride, self.pad);
        match self.b {
            Some(b) => {
                let b = g.bind(ps, b);
                g.bias_channel(y, b)
            }
            None => y,
        }
    }
}

/// Fully connected layer on the last axis.
pub struct Linear {
    pub w: ParamId, // (in, out)
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init::xavier_uniform(rng, &[din, dout], din, dout),
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), init::zeros(&[dout])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: TensorId) -> TensorId {
        let shape = g.value(x).shape().to_vec();
        let din = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let w = g.bind(ps, self.w);
        let dout = g.value(w).shape()[1];
        let x2 = g.reshape(x, &[rows, din]);
        let mut y = g.matmul(x2, w);
        if let Some(b) = self.b {
            let b = g.bind(ps, b);
            y = g.add_bcast(y, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = dout;
        g.reshape(y, &out_shape)
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), init::ones(&[dim])),
            beta: ps.add(format!("{name}.beta"), init::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: TensorId) -> TensorId {
        let gamma = g.bind(ps, self.gamma);
        let beta = g.bind(ps, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Instance normalization of `(N,C,H,W)`.
pub struct InstanceNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), init::ones(&[channels])),
            beta: ps.add(format!("{name}.beta"), init::zeros(&[channels])),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: TensorId) -> TensorId {
        let gamma = g.bind(ps, self.gamma);
        let beta = g.bind(ps, self.beta);
        g.instance_norm2d(x, gamma, beta)
    }
}

/// Group normalization of `(N,C,H,W)`.
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Self {
        assert!(channels % groups == 0, "group_norm channels/groups mismatch");
        Self {
            groups,
            gamma: ps.add(format!("{name}.gamma"), init::ones(&[channels])),
            beta: ps.add(format!("{name}.beta"), init::zeros(&[channels])),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: TensorId) -> TensorId {
        let gamma = g.bind(ps, self.gamma);
        let beta = g.bind(ps, self.beta);
        g.group_norm(x, self.groups, gamma, beta)
    }
}
