//! Central finite-difference gradient checking.
//!
//! This is the independent oracle for every analytic backward rule: the loss
//! is re-evaluated forward-only with each input coordinate nudged by ±h.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape's gradients of `build(inputs)` with central differences.
///
/// `build` receives a fresh tape and one [`Var`] per input tensor and must
/// return a scalar. When `max_coords` is set, at most that many evenly
/// spaced coordinates per input are probed.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, max_coords: Option<usize>, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let n = inputs[which].numel();
        let analytic = tape.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let stride = match max_coords {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for c in (0..n).step_by(stride) {
            let orig = inputs[which].data()[c];
            probe[which].data_mut()[c] = orig + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[c] = orig - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[c], numeric);
            report.coords_checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst_input = which;
                report.worst_coord = c;
                report.analytic = analytic[c];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
