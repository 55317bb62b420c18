//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Result of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` seen.
    pub max_rel_error: f64,
    /// Input index and flat element index of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f` builds the function on a fresh tape from leaf handles of `inputs`; it is
/// invoked once analytically and twice per perturbed element.
pub fn gradcheck<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.slice(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut work = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    step: report.checked,
                    detail: format!("finite difference at input {} element {}", i, j),
                });
            }
            let a = analytic[i][j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
