//! Minimal reverse-mode autodiff engine used by the whole training stack.
//!
//! Everything computes in `f64` on dynamically-shaped ndarrays. The engine is
//! deliberately small: exactly the ops this crate's models need, each with a
//! hand-written backward kernel checked against central finite differences.
//! Determinism is a design requirement — no threading, no hash-order
//! iteration, fixed reduction orders — so a seeded run reproduces
//! bit-identically.

mod conv;
mod graph;
mod homography;
pub mod init;
pub mod layers;
mod ops;
pub mod optim;
mod sample;

pub use graph::{Graph, ParamId, ParamStore, TensorId};
pub use homography::cube_to_displacement;
pub use ops::NORM_EPS;

#[cfg(test)]
pub(crate) mod testutil {
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    use super::graph::{Graph, TensorId};

    /// Seeded uniform array in `(-scale, scale)`.
    pub fn rng_array(shape: &[usize], seed: u64, scale: f64) -> ArrayD<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-scale..scale))
    }

    /// Verifies the analytic gradient of `build` (a scalar-valued graph
    /// builder receiving `x0` as its differentiable leaf) against central
    /// finite differences on every coordinate.
    pub fn check_grad(
        x0: &ArrayD<f64>,
        tol: f64,
        build: impl Fn(&mut Graph, TensorId) -> TensorId,
    ) {
        let mut g = Graph::new();
        let t = g.variable(x0.clone());
        let loss = build(&mut g, t);
        g.backward(loss);
        let analytic = g.grad(t).expect("leaf received no gradient").clone();

        let eval = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let t = g.input(x.clone());
            let loss = build(&mut g, t);
            g.scalar(loss)
        };
        let flat_analytic = analytic.as_slice().unwrap();
        let mut worst = 0.0f64;
        let mut worst_pair = (0.0, 0.0);
        for i in 0..x0.len() {
            let base = x0.as_slice().unwrap()[i];
            let eps = 1e-5 * (1.0 + base.abs());
            let mut xp = x0.clone();
            xp.as_slice_mut().unwrap()[i] = base + eps;
            let mut xm = x0.clone();
            xm.as_slice_mut().unwrap()[i] = base - eps;
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * eps);
            let a = flat_analytic[i];
            let rel = (a - numeric).abs() / (1.0 + a.abs().max(numeric.abs()));
            if rel > worst {
                worst = rel;
                worst_pair = (a, numeric);
            }
        }
        assert!(
            worst <= tol,
            "gradient mismatch: rel err {worst:.3e} (analytic {:.6e} vs numeric {:.6e})",
            worst_pair.0,
            worst_pair.1
        );
    }

    /// Asserts elementwise closeness with a mixed absolute/relative bound.
    pub fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape(), "shape mismatch");
        let mut worst = 0.0f64;
        for (x, y) in a.iter().zip(b.iter()) {
            let d = (x - y).abs() / (1.0 + x.abs().max(y.abs()));
            worst = worst.max(d);
        }
        assert!(worst <= tol, "max mixed error {worst:.3e} > {tol:.1e}");
    }
}
