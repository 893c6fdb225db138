//! Batch losses with analytic gradients with respect to the logits.
//!
//! Every function returns the batch loss and a `B x C` gradient matrix.
//! Soft cross-entropy is the alpha-weighted loss with all weights equal to
//! one; both share one code path so they agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::matrix::Matrix;

use super::softmax_in_place;

/// Probability vector used as a training target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(invalid_arg("empty soft label"));
        }
        if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid_arg("soft label entries must lie in [0, 1]"));
        }
        let s: f64 = q.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(invalid_arg(format!("soft label sums to {s}")));
        }
        Ok(Self(q))
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Self {
        let mut q = vec![0.0; num_classes];
        q[class] = 1.0;
        Self(q)
    }

    /// Caller guarantees a valid simplex vector.
    pub(crate) fn from_simplex(q: Vec<f64>) -> Self {
        debug_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        Self(q)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Matrix,
}

fn check_targets(logits: &Matrix, targets: &[SoftLabel]) -> Result<()> {
    if logits.rows() != targets.len() {
        return Err(invalid_arg(format!(
            "{} logit rows but {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if targets.iter().any(|t| t.len() != logits.cols()) {
        return Err(invalid_arg("target width does not match number of classes"));
    }
    Ok(())
}

/// Mean soft-target cross-entropy.
pub fn ce_loss_soft(logits: &Matrix, targets: &[SoftLabel]) -> Result<LossOutput> {
    check_targets(logits, targets)?;
    Ok(weighted_ce(logits, targets, |_, _| 1.0))
}

/// Cross-entropy with competing logits reweighted:
/// `-sum_i q_i log( e^{f_i} / sum_j alpha_ij e^{f_j} )`, averaged over rows.
pub fn balanced_loss(logits: &Matrix, targets: &[SoftLabel], alpha: &Matrix) -> Result<LossOutput> {
    check_targets(logits, targets)?;
    let c = logits.cols();
    if alpha.rows() != c || alpha.cols() != c {
        return Err(invalid_arg("alpha must be C x C"));
    }
    if alpha.as_slice().iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(invalid_arg("alpha entries must be positive and finite"));
    }
    Ok(weighted_ce(logits, targets, |i, j| alpha[(i, j)]))
}

fn weighted_ce(logits: &Matrix, targets: &[SoftLabel], alpha: impl Fn(usize, usize) -> f64) -> LossOutput {
    let (b, c) = (logits.rows(), logits.cols());
    let mut grad = Matrix::zeros(b, c);
    let mut total = 0.0;
    let mut exps = vec![0.0; c];
    let scale = 1.0 / b.max(1) as f64;
    for r in 0..b {
        let f = logits.row(r);
        let q = targets[r].as_slice();
        let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (e, &fv) in exps.iter_mut().zip(f) {
            *e = (fv - m).exp();
        }
        let g = grad.row_mut(r);
        let mut row_loss = 0.0;
        for i in 0..c {
            if q[i] == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for (j, &e) in exps.iter().enumerate() {
                s += alpha(i, j) * e;
            }
            row_loss += q[i] * (s.ln() + m - f[i]);
            g[i] -= q[i];
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += q[i] * alpha(i, k) * exps[k] / s;
            }
        }
        total += row_loss.max(0.0);
        g.iter_mut().for_each(|v| *v *= scale);
    }
    LossOutput {
        value: total * scale,
        grad,
    }
}

/// Mean squared distance between targets and predicted probabilities.
pub fn mse_loss(logits: &Matrix, targets: &[SoftLabel]) -> Result<LossOutput> {
    check_targets(logits, targets)?;
    let (b, c) = (logits.rows(), logits.cols());
    let mut grad = Matrix::zeros(b, c);
    let mut total = 0.0;
    let scale = 1.0 / b.max(1) as f64;
    let mut p = vec![0.0; c];
    for r in 0..b {
        p.copy_from_slice(logits.row(r));
        softmax_in_place(&mut p);
        let q = targets[r].as_slice();
        let mut dot = 0.0;
        for i in 0..c {
            let diff = p[i] - q[i];
            total += diff * diff;
            dot += diff * p[i];
        }
        let g = grad.row_mut(r);
        for k in 0..c {
            g[k] = 2.0 * scale * p[k] * ((p[k] - q[k]) - dot);
        }
    }
    Ok(LossOutput {
        value: total * scale,
        grad,
    })
}

/// Floor applied to the class-balanced mean prediction before the log.
pub const REG_FLOOR: f64 = 1e-12;

/// Per-class regularization strengths `n_min / n_i`, with `n_min` the
/// smallest positive count. Classes with no samples get full strength.
pub fn reg_strength_weights(counts: &[usize]) -> Vec<f64> {
    let n_min = counts.iter().copied().filter(|&n| n > 0).min().unwrap_or(1) as f64;
    counts
        .iter()
        .map(|&n| if n == 0 { 1.0 } else { n_min / n as f64 })
        .collect()
}

/// Pulls the class-balanced average prediction of the batch towards the
/// uniform distribution, weighting tail classes more strongly.
///
/// The mean prediction averages per-class means over the classes present in
/// the batch; `full_train_counts` supplies the strength weights.
pub fn reg_loss(logits: &Matrix, hard_labels: &[usize], full_train_counts: &[usize]) -> Result<LossOutput> {
    let (b, c) = (logits.rows(), logits.cols());
    if b == 0 {
        return Err(invalid_arg("reg_loss needs a nonempty batch"));
    }
    if hard_labels.len() != b {
        return Err(invalid_arg("one hard label per row required"));
    }
    if full_train_counts.len() != c {
        return Err(invalid_arg("full_train_counts must have one entry per class"));
    }
    if let Some(&bad) = hard_labels.iter().find(|&&l| l >= c) {
        return Err(invalid_arg(format!("hard label {bad} out of range")));
    }
    let weights = reg_strength_weights(full_train_counts);
    let mut batch_counts = vec![0usize; c];
    for &l in hard_labels {
        batch_counts[l] += 1;
    }
    let present = batch_counts.iter().filter(|&&n| n > 0).count() as f64;

    let mut probs = logits.clone();
    for r in 0..b {
        softmax_in_place(probs.row_mut(r));
    }
    let mut mean = vec![0.0; c];
    for r in 0..b {
        let w = 1.0 / (present * batch_counts[hard_labels[r]] as f64);
        for (m, &p) in mean.iter_mut().zip(probs.row(r)) {
            *m += w * p;
        }
    }

    let pi = 1.0 / c as f64;
    let mut value = 0.0;
    let mut d_mean = vec![0.0; c];
    for i in 0..c {
        let clamped = mean[i].max(REG_FLOOR);
        value += weights[i] * pi * (pi / clamped).ln();
        if mean[i] > REG_FLOOR {
            d_mean[i] = -weights[i] * pi / mean[i];
        }
    }

    let mut grad = Matrix::zeros(b, c);
    for r in 0..b {
        let w = 1.0 / (present * batch_counts[hard_labels[r]] as f64);
        let p = probs.row(r);
        let dot: f64 = (0..c).map(|i| d_mean[i] * w * p[i]).sum();
        let g = grad.row_mut(r);
        for k in 0..c {
            g[k] = p[k] * (d_mean[k] * w - dot);
        }
    }
    Ok(LossOutput { value, grad })
}
