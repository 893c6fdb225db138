//! Model-bias estimation.
//!
//! During the estimation epochs every clean labeled sample contributes its
//! softmax output to row `observed label` of an accumulator. At the end of
//! an epoch the rows become mean predictions and are folded into an
//! exponential moving average. The ratio `R_ij = M_ij / M_ji` of that
//! average says whether the model leans towards class `j` on class-`i`
//! samples, and `alpha_ij = R_ij^gamma` turns it into loss weights.

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid_arg, Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasState {
    num_classes: usize,
    epoch_sums: Matrix,
    counters: Vec<usize>,
    ema: Matrix,
    sigma: f64,
    rows_ever_updated: Vec<bool>,
    accumulated: bool,
    warnings: Vec<String>,
}

impl BiasState {
    /// Zero-initialized average; `sigma` is the weight kept from the past.
    pub fn new(num_classes: usize, sigma: f64) -> Result<Self> {
        if num_classes == 0 {
            return Err(invalid_arg("bias state needs at least one class"));
        }
        if !(0.0..1.0).contains(&sigma) {
            return Err(invalid_arg(format!("EMA sigma must be in [0, 1), got {sigma}")));
        }
        Ok(Self {
            num_classes,
            epoch_sums: Matrix::zeros(num_classes, num_classes),
            counters: vec![0; num_classes],
            ema: Matrix::zeros(num_classes, num_classes),
            sigma,
            rows_ever_updated: vec![false; num_classes],
            accumulated: false,
            warnings: Vec::new(),
        })
    }

    pub fn ema(&self) -> &Matrix {
        &self.ema
    }

    pub fn epoch_sums(&self) -> &Matrix {
        &self.epoch_sums
    }

    pub fn counters(&self) -> &[usize] {
        &self.counters
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn rows_ever_updated(&self) -> &[bool] {
        &self.rows_ever_updated
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Adds each softmax row to the accumulator row of its label.
    pub fn accumulate(&mut self, softmax_outputs: &Matrix, labels: &[usize]) -> Result<()> {
        if softmax_outputs.rows() != labels.len() || softmax_outputs.cols() != self.num_classes {
            return Err(invalid_arg("accumulate: shape mismatch"));
        }
        for (r, &label) in labels.iter().enumerate() {
            if label >= self.num_classes {
                return Err(invalid_arg(format!("label {label} out of range")));
            }
            let src = softmax_outputs.row(r);
            for (acc, &p) in self.epoch_sums.row_mut(label).iter_mut().zip(src) {
                *acc += p;
            }
            self.counters[label] += 1;
        }
        self.accumulated = true;
        Ok(())
    }

    /// Normalizes the accumulator into per-class mean predictions, folds
    /// them into the moving average and resets the accumulator. Returns the
    /// normalized epoch matrix (rows without samples left at zero).
    pub fn finalize_epoch(&mut self) -> Option<Matrix> {
        if !self.accumulated {
            let msg = "finalize_epoch called twice without accumulation; ignored".to_string();
            warn!("{msg}");
            self.warnings.push(msg);
            return None;
        }
        let c = self.num_classes;
        let mut normalized = Matrix::zeros(c, c);
        for i in 0..c {
            let count = self.counters[i];
            if count == 0 {
                if !self.rows_ever_updated[i] {
                    self.ema.row_mut(i).iter_mut().for_each(|v| *v = 1.0 / c as f64);
                }
                continue;
            }
            let inv = 1.0 / count as f64;
            for j in 0..c {
                normalized[(i, j)] = self.epoch_sums[(i, j)] * inv;
                self.ema[(i, j)] = self.sigma * self.ema[(i, j)] + (1.0 - self.sigma) * normalized[(i, j)];
            }
            self.rows_ever_updated[i] = true;
        }
        self.epoch_sums = Matrix::zeros(c, c);
        self.counters.iter_mut().for_each(|n| *n = 0);
        self.accumulated = false;
        Some(normalized)
    }
}

/// `R_ij = M_ij / M_ji`, with an exact unit diagonal.
pub fn ratio_matrix(ema: &Matrix) -> Result<Matrix> {
    let c = ema.rows();
    if ema.cols() != c {
        return Err(invalid_arg("bias matrix must be square"));
    }
    let mut r = Matrix::identity(c);
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            let (num, den) = (ema[(i, j)], ema[(j, i)]);
            if !(den > 0.0) || !(num > 0.0) || !num.is_finite() || !den.is_finite() {
                return Err(Error::InvalidState(format!(
                    "bias matrix entries ({i},{j})={num}, ({j},{i})={den} must be positive"
                )));
            }
            r[(i, j)] = num / den;
        }
    }
    Ok(r)
}

/// `alpha_ij = R_ij^gamma_sup` where `R_ij > 1` (suppress the favoured class),
/// `R_ij^gamma_rel` otherwise (relax).
pub fn alpha_matrix(ratio: &Matrix, gamma_sup: f64, gamma_rel: f64) -> Result<Matrix> {
    if !(gamma_sup >= 0.0) || !(gamma_rel >= 0.0) {
        return Err(invalid_arg("gammas must be >= 0"));
    }
    let c = ratio.rows();
    let mut alpha = Matrix::identity(c);
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            let rij = ratio[(i, j)];
            let gamma = if rij > 1.0 { gamma_sup } else { gamma_rel };
            let a = rij.powf(gamma);
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::InvalidState(format!("alpha ({i},{j}) = {a} is not positive and finite")));
            }
            alpha[(i, j)] = a;
        }
    }
    Ok(alpha)
}

/// Label-frequency stand-in for the bias matrix: `R_ij = n_j / n_i`.
pub fn frequency_alpha(observed_counts: &[usize], gamma_sup: f64, gamma_rel: f64) -> Result<Matrix> {
    Ok(RebalanceCoefficients::from_frequencies(observed_counts, gamma_sup, gamma_rel)?.alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RebalanceCoefficients {
    pub ratio: Matrix,
    pub alpha: Matrix,
    pub gamma_sup: f64,
    pub gamma_rel: f64,
}

impl RebalanceCoefficients {
    pub fn from_bias(ema: &Matrix, gamma_sup: f64, gamma_rel: f64) -> Result<Self> {
        let ratio = ratio_matrix(ema)?;
        let alpha = alpha_matrix(&ratio, gamma_sup, gamma_rel)?;
        Ok(Self {
            ratio,
            alpha,
            gamma_sup,
            gamma_rel,
        })
    }

    pub fn from_frequencies(counts: &[usize], gamma_sup: f64, gamma_rel: f64) -> Result<Self> {
        if counts.contains(&0) {
            return Err(invalid_arg("label-frequency rebalancing needs every count >= 1"));
        }
        let c = counts.len();
        let mut ratio = Matrix::identity(c);
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    ratio[(i, j)] = counts[j] as f64 / counts[i] as f64;
                }
            }
        }
        let alpha = alpha_matrix(&ratio, gamma_sup, gamma_rel)?;
        Ok(Self {
            ratio,
            alpha,
            gamma_sup,
            gamma_rel,
        })
    }

    /// No rebalancing: every weight is one.
    pub fn uniform(num_classes: usize, gamma_sup: f64, gamma_rel: f64) -> Self {
        Self {
            ratio: Matrix::filled(num_classes, num_classes, 1.0),
            alpha: Matrix::filled(num_classes, num_classes, 1.0),
            gamma_sup,
            gamma_rel,
        }
    }

    /// SHA-256 over the bit patterns of alpha.
    pub fn alpha_digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.alpha.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
