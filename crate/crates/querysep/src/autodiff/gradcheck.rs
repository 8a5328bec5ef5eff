//! Finite-difference gradient oracle.
//!
//! Analytic gradients from [`Tape::backward`] are compared against central
//! differences computed by re-running the forward closure with each input
//! element nudged by ±h. Checks run in f64; h = 1e-4 puts the truncation
//! error near 1e-8 for well-scaled functions, far below the tolerances the
//! tests assert.

use super::{Tape, Tensor, Var};
use crate::rng::{rng_for, uniform};

const H: f64 = 1e-4;

/// Worst-case deviation between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_abs_diff: f64,
    pub max_rel_err: f64,
}

impl GradReport {
    /// Panics unless every element agrees within `tol` (relative where the
    /// gradient has magnitude, absolute where it is near zero).
    pub fn assert_within(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol && self.max_abs_diff < tol.max(1e-6) * 10.0,
            "gradient mismatch: rel {:.3e}, abs {:.3e}, tol {tol:.1e}",
            self.max_rel_err,
            self.max_abs_diff
        );
    }
}

/// Checks `f` on inputs sampled uniformly from [-1, 1].
///
/// `f` must build a scalar output from the given leaf vars. Every leaf is
/// marked as requiring gradients.
pub fn check_gradients<F>(shapes: &[&[usize]], seed: u64, f: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut rng = rng_for(seed, "gradcheck/inputs");
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|shape| {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| uniform(&mut rng, -1.0, 1.0))
                .collect();
            Tensor::from_vec(shape, data)
        })
        .collect();
    check_gradients_on(inputs, f)
}

/// Checks `f` on caller-supplied inputs (for ops with restricted domains).
pub fn check_gradients_on<F>(inputs: Vec<Tensor<f64>>, f: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_grad(t.clone())).collect();
        let out = f(&mut tape, &vars);
        assert_eq!(tape.val(out).numel(), 1, "gradcheck output must be scalar");
        (tape, vars, out)
    };

    let (mut tape, vars, out) = eval(&inputs);
    let grads = tape.backward(out);

    let mut max_abs_diff = 0.0f64;
    let mut max_rel_err = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .unwrap_or_else(|| panic!("input {i} received no gradient"));
        for e in 0..input.numel() {
            let mut bumped = inputs.clone();
            bumped[i].data[e] = input.data[e] + H;
            let (tape_p, _, out_p) = eval(&bumped);
            let fp = tape_p.val(out_p).data[0];
            bumped[i].data[e] = input.data[e] - H;
            let (tape_m, _, out_m) = eval(&bumped);
            let fm = tape_m.val(out_m).data[0];

            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic.data[e];
            let diff = (a - numeric).abs();
            max_abs_diff = max_abs_diff.max(diff);
            let denom = a.abs().max(numeric.abs());
            if denom > 1e-4 {
                max_rel_err = max_rel_err.max(diff / denom);
            }
        }
    }
    GradReport { max_abs_diff, max_rel_err }
}
