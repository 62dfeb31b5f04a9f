//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates the forward pass, so it stays
//! independent of every backward rule it is used to check.

use crate::error::Result;
use crate::params::{Bound, ParamSet};
use crate::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps exact zeros from
/// turning rounding noise into huge ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of the scalar built by `loss` against central
/// differences with step `h`, over every coordinate of every parameter.
pub fn check<F>(params: &ParamSet, h: f64, loss: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape, |_| true);
    let out = loss(&tape, &bound)?;
    let analytic = bound.grads(&tape.backward(out)?);

    let eval = |p: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let bound = p.bind(&tape, |_| false);
        loss(&tape, &bound)?.item()
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.to_string(), i));
            }
        }
    }
    Ok(report)
}
