//! Finite-difference gradient verification.
//!
//! Runs entirely in `f64`: central differences with h ~ 1e-4 have truncation
//! error around 1e-8 there, far below the 1e-4 relative tolerance the test
//! suite enforces, while f32 noise would swamp it.

use super::dense::Tensor;
use super::tape::{Tape, Var};

pub struct CheckReport {
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) for the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub elements_checked: usize,
}

impl CheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient mismatch: rel err {:.3e} >= {tol:.1e} at {:?} ({} elements checked)",
            self.max_rel_err,
            self.worst,
            self.elements_checked
        );
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` must return a scalar. Every input is treated as differentiable. At
/// most `max_per_input` elements per input are probed, spread evenly across
/// the tensor (always including the first and last element), which keeps
/// composite checks affordable without leaving whole parameter blocks
/// unchecked.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], max_per_input: usize, h: f64, f: F) -> CheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    assert_eq!(loss.value().len(), 1, "gradcheck needs a scalar loss");
    let grads = tape.backward(loss).expect("scalar loss");

    let eval = |mod_input: usize, elem: usize, value: f64| -> f64 {
        let t = Tape::new();
        let vars: Vec<Var<'_, f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, src)| {
                if i == mod_input {
                    let mut c = src.clone();
                    c.data_mut()[elem] = value;
                    t.constant(c)
                } else {
                    t.constant(src.clone())
                }
            })
            .collect();
        let out = f(&t, &vars).value().item();
        out
    };

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: None,
        elements_checked: 0,
    };

    for (ti, input) in inputs.iter().enumerate() {
        let n = input.len();
        if n == 0 {
            continue;
        }
        let analytic = grads.get(vars[ti]);
        let probes: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            let mut v: Vec<usize> = (0..max_per_input)
                .map(|j| j * (n - 1) / (max_per_input - 1))
                .collect();
            v.dedup();
            v
        };
        for idx in probes {
            let x = input.data()[idx];
            let hh = h * x.abs().max(1.0);
            let fp = eval(ti, idx, x + hh);
            let fm = eval(ti, idx, x - hh);
            let numeric = (fp - fm) / (2.0 * hh);
            let a = analytic.map_or(0.0, |g| g.data()[idx]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.elements_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, idx, a, numeric));
            }
        }
    }
    report
}
