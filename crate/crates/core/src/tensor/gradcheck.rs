//! Central finite-difference checks of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step and tolerances of a gradient check. An entry passes when its error
/// is within `rtol` relative or `atol` absolute, whichever is looser.
///
/// A piecewise-linear function (ReLU networks, L1 losses) has kinks; when
/// one falls within `step` of the evaluation point the central difference
/// is wrong regardless of the gradient. Such an entry is re-checked with
/// the step divided by 10, at most `refinements` times, and counted in
/// [`GradReport::refined`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    pub refinements: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            rtol: 1e-4,
            atol: 1e-7,
            refinements: 0,
        }
    }
}

/// Largest discrepancy found by [`GradCheck::run`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    /// Entries that needed a smaller step.
    pub refined: usize,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Error of the worst entry over its tolerance; above 1 fails.
    pub ratio: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.ratio <= 1.0
    }
}

impl GradCheck {
    fn tolerance(&self, analytic: f64, numeric: f64) -> f64 {
        (self.rtol * analytic.abs().max(numeric.abs())).max(self.atol)
    }

    /// Compares the tape gradient of the scalar `f(inputs)` with central
    /// differences for every element of every input. `only` limits the
    /// check to a subset of flat indices per input; `None` checks all.
    pub fn run(
        &self,
        inputs: &[Tensor<f64>],
        only: Option<&[Vec<usize>]>,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    ) -> Result<GradReport> {
        let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).item())
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        let mut report = GradReport {
            checked: 0,
            refined: 0,
            worst_input: 0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            ratio: 0.0,
        };
        let mut xs = inputs.to_vec();
        for (k, v) in vars.iter().enumerate() {
            let zero = Tensor::zeros(inputs[k].shape());
            let analytic = grads.get(*v).unwrap_or(&zero).clone();
            let all: Vec<usize>;
            let idx = match only {
                Some(sel) => sel.get(k).map(Vec::as_slice).unwrap_or(&[]),
                None => {
                    all = (0..inputs[k].len()).collect();
                    &all
                }
            };
            for &i in idx {
                let a = analytic.data()[i];
                let mut step = self.step;
                let mut attempt = 0;
                let (numeric, ratio) = loop {
                    let x0 = inputs[k].data()[i];
                    xs[k].data_mut()[i] = x0 + step;
                    let up = eval(&xs)?;
                    xs[k].data_mut()[i] = x0 - step;
                    let down = eval(&xs)?;
                    xs[k].data_mut()[i] = x0;
                    let numeric = (up - down) / (2.0 * step);
                    if !numeric.is_finite() || !a.is_finite() {
                        return Err(Error::NonFinite(format!("gradient check of input {k} element {i}")));
                    }
                    let ratio = (a - numeric).abs() / self.tolerance(a, numeric);
                    if ratio <= 1.0 || attempt == self.refinements {
                        break (numeric, ratio);
                    }
                    attempt += 1;
                    step /= 10.0;
                };
                report.checked += 1;
                report.refined += (attempt > 0) as usize;
                if ratio > report.ratio {
                    report.worst_input = k;
                    report.worst_index = i;
                    report.analytic = a;
                    report.numeric = numeric;
                    report.ratio = ratio;
                }
            }
        }
        Ok(report)
    }
}
