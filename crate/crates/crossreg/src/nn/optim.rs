//! AdamW with decoupled weight decay, plus the one-cycle learning-rate
//! schedule. One optimizer instance owns one parameter group; the trainer
//! keeps separate instances (with separate moment state and schedules) per
//! training phase.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::graph::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    params: Vec<ParamId>,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, cfg: AdamWConfig) -> Self {
        let m = params
            .iter()
            .map(|&p| ArrayD::zeros(store.value(p).raw_dim()))
            .collect();
        let v = params
            .iter()
            .map(|&p| ArrayD::zeros(store.value(p).raw_dim()))
            .collect();
        Self { cfg, params, step: 0, m, v }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in the store, then
    /// zeroes those gradients. Decay is decoupled:
    /// `p ← p − lr·wd·p − lr·m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, &p) in self.params.iter().enumerate() {
            {
                let grad = store.grad(p).clone();
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                m.zip_mut_with(&grad, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
                v.zip_mut_with(&grad, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
                let value = store.value_mut(p);
                ndarray::Zip::from(&mut *value)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|p, &m, &v| {
                        let mhat = m / bc1;
                        let vhat = v / bc2;
                        *p -= lr * c.weight_decay * *p + lr * mhat / (vhat.sqrt() + c.eps);
                    });
            }
            store.zero_grad(p);
        }
    }

    /// Raw moment state in parameter order, for checkpointing.
    pub fn state(&self) -> (&[ArrayD<f64>], &[ArrayD<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores moment state saved by [`AdamW::state`].
    pub fn restore(&mut self, step: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        assert_eq!(m.len(), self.params.len(), "optimizer state length");
        assert_eq!(v.len(), self.params.len(), "optimizer state length");
        for (i, &p) in self.params.iter().enumerate() {
            assert_eq!(m[i].shape(), self.m[i].shape(), "moment shape for param {p:?}");
            assert_eq!(v[i].shape(), self.v[i].shape(), "moment shape for param {p:?}");
        }
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// One-cycle schedule: cosine ramp from `max_lr / div_factor` up to `max_lr`
/// over the first `pct_start` of training, then cosine anneal down to
/// `max_lr / (div_factor · final_div_factor)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: u64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: u64) -> Self {
        Self {
            max_lr,
            total_steps: total_steps.max(1),
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let initial = self.max_lr / self.div_factor;
        let min_lr = initial / self.final_div_factor;
        let total = self.total_steps as f64;
        let up = (self.pct_start * total).max(1.0);
        let s = (step as f64).min(total - 1.0);
        if s < up {
            let t = s / up;
            initial + (self.max_lr - initial) * 0.5 * (1.0 - (std::f64::consts::PI * t).cos())
        } else {
            let t = (s - up) / (total - up).max(1.0);
            min_lr + (self.max_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use ndarray::IxDyn;

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let target = [1.0, -2.0, 0.5];
        let mut opt = AdamW::new(
            &store,
            vec![p],
            AdamWConfig { weight_decay: 0.0, ..Default::default() },
        );
        for _ in 0..400 {
            let mut g = Graph::new();
            g.mark_trainable([p]);
            let x = g.bind(&store, p);
            let t = g.input(ArrayD::from_shape_vec(IxDyn(&[3]), target.to_vec()).unwrap());
            let d = g.sub(x, t);
            let d = g.square(d);
            let loss = g.sum_all(d);
            g.backward(loss);
            g.collect_grads(&mut store);
            opt.step(&mut store, 0.05);
        }
        for (got, want) in store.value(p).iter().zip(target) {
            assert!((got - want).abs() < 1e-2, "{got} vs {want}");
        }
    }

    #[test]
    fn decoupled_decay_shrinks_parameters_without_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("x", ArrayD::from_elem(IxDyn(&[1]), 4.0));
        let mut opt = AdamW::new(
            &store,
            vec![p],
            AdamWConfig { weight_decay: 0.1, ..Default::default() },
        );
        for _ in 0..10 {
            opt.step(&mut store, 0.1); // zero gradients: only decay acts
        }
        let v = store.value(p)[[0]];
        let want = 4.0 * (1.0 - 0.1 * 0.1f64).powi(10);
        assert!((v - want).abs() < 1e-9, "{v} vs {want}");
    }

    #[test]
    fn one_cycle_ramps_up_then_anneals() {
        let sched = OneCycle::new(3e-4, 1000);
        assert!((sched.lr_at(0) - 3e-4 / 25.0).abs() < 1e-12);
        let peak_step = 300;
        let mut prev = 0.0;
        for s in 0..peak_step {
            let lr = sched.lr_at(s);
            assert!(lr >= prev - 1e-15, "ramp not monotone at {s}");
            prev = lr;
        }
        assert!((sched.lr_at(peak_step) - 3e-4).abs() < 1e-8);
        prev = f64::INFINITY;
        for s in peak_step..1000 {
            let lr = sched.lr_at(s);
            assert!(lr <= prev + 1e-15, "anneal not monotone at {s}");
            prev = lr;
        }
        assert!(sched.lr_at(999) < 3e-4 / 25.0 / 100.0);
    }
}
