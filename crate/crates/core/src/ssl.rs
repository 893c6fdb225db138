//! Semi-supervised batch construction in the MixMatch style.
//!
//! Labeled rows get one-hot targets, unlabeled rows get sharpened guesses
//! averaged over several augmented views, and every row is then mixed with
//! a partner drawn from the shuffled pool of both batches.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::matrix::Matrix;
use crate::net::{argmax, Classifier, SoftLabel};
use crate::rng::Rng;

/// Which label a mixed row reports as its hard label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardLabelSource {
    /// Argmax of the dominant component's target (its observed label for
    /// labeled rows).
    #[default]
    DominantComponent,
    /// Argmax of the mixed target.
    MixedArgmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub num_augmentations: usize,
    pub sharpen_temperature: f64,
    pub mix_alpha: f64,
    pub augment_stddev: f64,
    pub lambda_u: f64,
    /// Forces every mixing coefficient to this value instead of sampling
    /// `Beta(mix_alpha, mix_alpha)`.
    pub fixed_lambda: Option<f64>,
    pub hard_label: HardLabelSource,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            num_augmentations: 2,
            sharpen_temperature: 0.5,
            mix_alpha: 4.0,
            augment_stddev: 0.1,
            lambda_u: 25.0,
            fixed_lambda: None,
            hard_label: HardLabelSource::DominantComponent,
        }
    }
}

impl SslConfig {
    /// Settings under which mixing leaves labeled rows untouched.
    pub fn identity() -> Self {
        Self {
            num_augmentations: 1,
            sharpen_temperature: 1.0,
            augment_stddev: 0.0,
            fixed_lambda: Some(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_augmentations == 0 {
            return Err(invalid_arg("ssl.num_augmentations must be >= 1"));
        }
        if !(self.sharpen_temperature > 0.0) {
            return Err(invalid_arg("ssl.sharpen_temperature must be > 0"));
        }
        if !(self.mix_alpha > 0.0) {
            return Err(invalid_arg("ssl.mix_alpha must be > 0"));
        }
        if !(self.augment_stddev >= 0.0) {
            return Err(invalid_arg("ssl.augment_stddev must be >= 0"));
        }
        if !(self.lambda_u >= 0.0) {
            return Err(invalid_arg("ssl.lambda_u must be >= 0"));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(invalid_arg("ssl.fixed_lambda must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedRow {
    pub x: Vec<f64>,
    pub q: SoftLabel,
    pub hard_label: usize,
    pub dominance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub inputs: Matrix,
    pub soft_labels: Vec<SoftLabel>,
    pub hard_labels: Vec<usize>,
    pub dominance: Vec<f64>,
}

impl MixedBatch {
    fn from_rows(rows: Vec<MixedRow>, dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut soft_labels = Vec::with_capacity(rows.len());
        let mut hard_labels = Vec::with_capacity(rows.len());
        let mut dominance = Vec::with_capacity(rows.len());
        let n = rows.len();
        for r in rows {
            data.extend_from_slice(&r.x);
            soft_labels.push(r.q);
            hard_labels.push(r.hard_label);
            dominance.push(r.dominance);
        }
        Ok(Self {
            inputs: Matrix::from_vec(n, dim, data)?,
            soft_labels,
            hard_labels,
            dominance,
        })
    }

    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }
}

/// Adds isotropic Gaussian noise; `stddev == 0` returns the input as is.
pub fn augment(x: &[f64], stddev: f64, rng: &mut Rng) -> Vec<f64> {
    if stddev == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + stddev * z
        })
        .collect()
}

fn augment_rows(m: &Matrix, stddev: f64, rng: &mut Rng) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = augment(m.row(i), stddev, rng);
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}

/// Temperature sharpening `q_i^(1/T) / sum_j q_j^(1/T)`, computed in log
/// space so small temperatures approach a one-hot vector cleanly.
pub fn sharpen(q: &SoftLabel, temperature: f64) -> SoftLabel {
    if temperature == 1.0 {
        return q.clone();
    }
    let logs: Vec<f64> = q
        .as_slice()
        .iter()
        .map(|&p| if p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    SoftLabel::from_simplex(exps.into_iter().map(|e| e / s).collect())
}

/// Sharpened mean prediction over `k` augmented views of each row.
pub fn guess_labels(
    model: &Classifier,
    u_batch: &Matrix,
    k: usize,
    temperature: f64,
    stddev: f64,
    rng: &mut Rng,
) -> Result<Vec<SoftLabel>> {
    Ok(guess_with_views(model, u_batch, k, temperature, stddev, rng)?.0)
}

/// Guesses plus the first augmented view, which is the one later mixed.
fn guess_with_views(
    model: &Classifier,
    u_batch: &Matrix,
    k: usize,
    temperature: f64,
    stddev: f64,
    rng: &mut Rng,
) -> Result<(Vec<SoftLabel>, Matrix)> {
    if k == 0 {
        return Err(invalid_arg("need at least one augmentation"));
    }
    let c = model.num_classes();
    let mut mean = Matrix::zeros(u_batch.rows(), c);
    let mut first = None;
    for _ in 0..k {
        let view = augment_rows(u_batch, stddev, rng);
        let probs = model.predict_proba(&view)?;
        for (m, p) in mean.as_mut_slice().iter_mut().zip(probs.as_slice()) {
            *m += p;
        }
        first.get_or_insert(view);
    }
    let guesses = mean
        .iter_rows()
        .map(|row| {
            let avg = if k == 1 {
                row.to_vec()
            } else {
                row.iter().map(|v| v / k as f64).collect()
            };
            sharpen(&SoftLabel::from_simplex(avg), temperature)
        })
        .collect();
    Ok((guesses, first.expect("k >= 1")))
}

fn draw_lambda(cfg: &SslConfig, rng: &mut Rng) -> Result<f64> {
    match cfg.fixed_lambda {
        Some(l) => Ok(l),
        None => {
            let beta = Beta::new(cfg.mix_alpha, cfg.mix_alpha)
                .map_err(|e| invalid_arg(format!("bad mix_alpha: {e}")))?;
            Ok(beta.sample(rng))
        }
    }
}

/// MixUp of two rows with `lambda' = max(lambda, 1 - lambda)`, so `a`
/// always dominates.
pub fn mixup_pair(
    a: (&[f64], &SoftLabel),
    b: (&[f64], &SoftLabel),
    cfg: &SslConfig,
    rng: &mut Rng,
) -> Result<MixedRow> {
    if a.0.len() != b.0.len() || a.1.len() != b.1.len() {
        return Err(invalid_arg("mixup partners have different shapes"));
    }
    let lambda = draw_lambda(cfg, rng)?;
    let dominance = lambda.max(1.0 - lambda);
    let (x, q) = if dominance == 1.0 {
        (a.0.to_vec(), a.1.clone())
    } else {
        let mix = |u: &[f64], v: &[f64]| -> Vec<f64> {
            u.iter().zip(v).map(|(p, r)| dominance * p + (1.0 - dominance) * r).collect()
        };
        let q = mix(a.1.as_slice(), b.1.as_slice());
        let s: f64 = q.iter().sum();
        (mix(a.0, b.0), SoftLabel::from_simplex(q.into_iter().map(|v| v / s).collect()))
    };
    let hard_label = match cfg.hard_label {
        HardLabelSource::DominantComponent => argmax(a.1.as_slice()),
        HardLabelSource::MixedArgmax => argmax(q.as_slice()),
    };
    Ok(MixedRow {
        x,
        q,
        hard_label,
        dominance,
    })
}

/// Builds the mixed labeled and unlabeled batches. Row `i` of each output
/// originates from row `i` of the corresponding input batch.
pub fn build_mixed_batches(
    labeled_x: &Matrix,
    labeled_y: &[usize],
    unlabeled_x: &Matrix,
    model: &Classifier,
    cfg: &SslConfig,
    rng: &mut Rng,
) -> Result<(MixedBatch, MixedBatch)> {
    if labeled_x.rows() == 0 {
        return Err(invalid_arg("labeled batch is empty"));
    }
    if labeled_x.rows() != labeled_y.len() {
        return Err(invalid_arg("one label per labeled row required"));
    }
    let c = model.num_classes();
    let dim = labeled_x.cols();
    let l_aug = augment_rows(labeled_x, cfg.augment_stddev, rng);
    let l_targets: Vec<SoftLabel> = labeled_y.iter().map(|&y| SoftLabel::one_hot(y, c)).collect();
    let (u_targets, u_aug) = if unlabeled_x.rows() > 0 {
        guess_with_views(
            model,
            unlabeled_x,
            cfg.num_augmentations,
            cfg.sharpen_temperature,
            cfg.augment_stddev,
            rng,
        )?
    } else {
        (Vec::new(), Matrix::zeros(0, dim))
    };

    let pool_x = l_aug.vstack(&u_aug)?;
    let pool_q: Vec<&SoftLabel> = l_targets.iter().chain(&u_targets).collect();
    let mut order: Vec<usize> = (0..pool_x.rows()).collect();
    order.shuffle(rng);
    if order.len() != l_targets.len() + u_targets.len() {
        return Err(Error::InvalidState("mixing pool size mismatch".into()));
    }

    let nl = l_targets.len();
    let mut l_rows = Vec::with_capacity(nl);
    for i in 0..nl {
        let p = order[i];
        l_rows.push(mixup_pair((l_aug.row(i), &l_targets[i]), (pool_x.row(p), pool_q[p]), cfg, rng)?);
    }
    let mut u_rows = Vec::with_capacity(u_targets.len());
    for i in 0..u_targets.len() {
        let p = order[nl + i];
        u_rows.push(mixup_pair((u_aug.row(i), &u_targets[i]), (pool_x.row(p), pool_q[p]), cfg, rng)?);
    }
    Ok((MixedBatch::from_rows(l_rows, dim)?, MixedBatch::from_rows(u_rows, dim)?))
}
