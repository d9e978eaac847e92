//! Central finite-difference oracle for verifying tape gradients.
//!
//! Runs in `f64`; the tolerances used across the workspace (1e-5 per
//! primitive, 1e-4 for whole models) are out of reach in `f32`.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error used by every gradient check:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Which input and flat coordinate produced `max_rel_error`.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Gradient check configuration.
#[derive(Clone, Debug)]
pub struct FiniteDiff {
    pub h: f64,
    /// Test fixture: corrupt the backward rule of this op before checking.
    pub corrupt: Option<&'static str>,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        Self { h: 1e-4, corrupt: None }
    }
}

impl FiniteDiff {
    pub fn new(h: f64) -> Self {
        Self { h, corrupt: None }
    }

    /// Compares the tape gradient of scalar `f` w.r.t. every input against
    /// central differences.
    pub fn check<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).item())
        };

        let mut tape = Tape::new();
        tape.corrupt_gradient_of(self.corrupt);
        let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?;

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut perturbed = inputs.to_vec();
        for (which, var) in vars.iter().enumerate() {
            let analytic = tape
                .grad(*var)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
            for (i, &a) in analytic.iter().enumerate() {
                let orig = inputs[which].data()[i];
                perturbed[which].data_mut()[i] = orig + self.h;
                let plus = eval(&perturbed)?;
                perturbed[which].data_mut()[i] = orig - self.h;
                let minus = eval(&perturbed)?;
                perturbed[which].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.h);
                let err = relative_error(a, numeric);
                if err > report.max_rel_error {
                    report = GradCheckReport {
                        max_rel_error: err,
                        worst: (which, i),
                        analytic: a,
                        numeric,
                    };
                }
            }
        }
        Ok(report)
    }
}

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences with step `h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report = FiniteDiff::new(h).check(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x))?;
    Ok(report.max_rel_error)
}
