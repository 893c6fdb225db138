//! Central finite-difference checks of analytic loss gradients.

use crate::error::Result;
use crate::matrix::Matrix;
use crate::net::LossOutput;

/// Step used for the central differences.
pub const STEP: f64 = 1e-5;
/// Components whose magnitude is below this are compared on an absolute
/// scale instead of a relative one.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares `loss(logits).grad` against central differences of
/// `loss(logits).value` in every logit.
pub fn check_logit_gradient<F>(loss: F, logits: &Matrix) -> Result<GradCheck>
where
    F: Fn(&Matrix) -> Result<LossOutput>,
{
    let analytic = loss(logits)?.grad;
    let mut probe = logits.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for k in 0..probe.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + STEP;
        let up = loss(&probe)?.value;
        probe.as_mut_slice()[k] = orig - STEP;
        let down = loss(&probe)?.value;
        probe.as_mut_slice()[k] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic.as_slice()[k];
        out.max_rel_error = out.max_rel_error.max(rel_error(a, numeric));
        out.max_abs_error = out.max_abs_error.max((a - numeric).abs());
    }
    Ok(out)
}
