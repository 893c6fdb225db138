//! Class-aware sample selection.
//!
//! Losses of the samples sharing an observed label are fitted with their own
//! two-component mixture; samples whose clean posterior exceeds one half
//! form the labeled set, everything else becomes unlabeled.

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{invalid_arg, Result};
use crate::gmm::{fit_gmm2, GmmConfig, GmmFit};
use crate::net::Classifier;

/// Per-class cross-entropy losses, in ascending sample index order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassLosses {
    pub indices: Vec<Vec<usize>>,
    pub losses: Vec<Vec<f64>>,
}

/// `-log p(observed label | x)` for every sample, in index order.
pub fn sample_losses(model: &Classifier, dataset: &LabeledDataset) -> Result<Vec<f64>> {
    if model.num_classes() != dataset.num_classes {
        return Err(invalid_arg("model output width differs from the number of classes"));
    }
    let logits = model.forward(&dataset.features)?;
    Ok((0..dataset.len())
        .map(|i| {
            let row = logits.row(i);
            let label = dataset.observed_labels[i];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|f| (f - m).exp()).sum::<f64>().ln();
            (lse - row[label]).max(0.0)
        })
        .collect())
}

pub fn per_class_losses(model: &Classifier, dataset: &LabeledDataset) -> Result<ClassLosses> {
    let all = sample_losses(model, dataset)?;
    Ok(group_by_class(&all, &dataset.observed_labels, dataset.num_classes))
}

pub(crate) fn group_by_class(losses: &[f64], labels: &[usize], num_classes: usize) -> ClassLosses {
    let mut indices = vec![Vec::new(); num_classes];
    let mut grouped = vec![Vec::new(); num_classes];
    for (i, (&loss, &label)) in losses.iter().zip(labels).enumerate() {
        indices[label].push(i);
        grouped[label].push(loss);
    }
    ClassLosses {
        indices,
        losses: grouped,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// One mixture per observed class.
    #[default]
    ClassAware,
    /// One mixture over every loss, ignoring labels.
    SingleGmm,
    /// Every sample is kept as clean; no fitting.
    AllClean,
}

/// Split of the training indices into a clean labeled set and the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub clean_indices: Vec<Vec<usize>>,
    pub unlabeled_indices: Vec<usize>,
    pub clean_posteriors: Vec<f64>,
    /// One fit per class for class-aware selection, a single fit otherwise.
    pub per_class_fits: Vec<GmmFit>,
}

impl Partition {
    pub fn num_clean(&self) -> usize {
        self.clean_indices.iter().map(Vec::len).sum()
    }

    /// Clean indices across classes, ascending.
    pub fn clean_sorted(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.clean_indices.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn selected_flags(&self, n: usize) -> Vec<bool> {
        let mut flags = vec![false; n];
        for &i in self.clean_indices.iter().flatten() {
            flags[i] = true;
        }
        flags
    }

    /// Every index in `0..n` appears exactly once across both sets.
    pub fn is_disjoint_cover(&self, n: usize) -> bool {
        let mut seen = vec![0u8; n];
        for &i in self.clean_indices.iter().flatten().chain(&self.unlabeled_indices) {
            if i >= n {
                return false;
            }
            seen[i] += 1;
        }
        seen.iter().all(|&s| s == 1)
    }
}

/// Class-aware selection with the current model.
pub fn select(model: &Classifier, dataset: &LabeledDataset, cfg: &GmmConfig) -> Result<Partition> {
    select_with(model, dataset, SelectionMode::ClassAware, cfg)
}

pub fn select_with(
    model: &Classifier,
    dataset: &LabeledDataset,
    mode: SelectionMode,
    cfg: &GmmConfig,
) -> Result<Partition> {
    if dataset.is_empty() {
        return Err(invalid_arg("cannot select from an empty dataset"));
    }
    if mode == SelectionMode::AllClean {
        return select_from_losses(&vec![0.0; dataset.len()], &dataset.observed_labels, dataset.num_classes, mode, cfg);
    }
    let losses = sample_losses(model, dataset)?;
    select_from_losses(&losses, &dataset.observed_labels, dataset.num_classes, mode, cfg)
}

/// Selection from precomputed per-sample losses. A sample is clean iff its
/// posterior is strictly greater than one half.
pub fn select_from_losses(
    losses: &[f64],
    labels: &[usize],
    num_classes: usize,
    mode: SelectionMode,
    cfg: &GmmConfig,
) -> Result<Partition> {
    if losses.len() != labels.len() {
        return Err(invalid_arg("one loss per label required"));
    }
    let n = losses.len();
    let mut posteriors = vec![0.0; n];
    let mut fits = Vec::new();
    match mode {
        SelectionMode::AllClean => posteriors.iter_mut().for_each(|p| *p = 1.0),
        SelectionMode::SingleGmm => {
            let fit = fit_gmm2(losses, cfg)?;
            for (p, &l) in posteriors.iter_mut().zip(losses) {
                *p = fit.posterior_clean(l);
            }
            fits.push(fit);
        }
        SelectionMode::ClassAware => {
            let grouped = group_by_class(losses, labels, num_classes);
            for (idx, vals) in grouped.indices.iter().zip(&grouped.losses) {
                if vals.is_empty() {
                    // Placeholder keeps fits aligned with class ids.
                    fits.push(fit_gmm2(&[0.0], cfg)?);
                    continue;
                }
                let fit = fit_gmm2(vals, cfg)?;
                for (&i, &l) in idx.iter().zip(vals) {
                    posteriors[i] = fit.posterior_clean(l);
                }
                fits.push(fit);
            }
        }
    }
    let mut clean_indices = vec![Vec::new(); num_classes];
    let mut unlabeled_indices = Vec::new();
    for i in 0..n {
        if posteriors[i] > 0.5 {
            clean_indices[labels[i]].push(i);
        } else {
            unlabeled_indices.push(i);
        }
    }
    Ok(Partition {
        clean_indices,
        unlabeled_indices,
        clean_posteriors: posteriors,
        per_class_fits: fits,
    })
}

/// Observed-class-size boundaries of the Many / Medium / Few splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitThresholds {
    /// Classes with more samples than this are "many".
    pub many_above: usize,
    /// Classes with fewer samples than this are "few".
    pub few_below: usize,
}

impl Default for SplitThresholds {
    fn default() -> Self {
        Self {
            many_above: 100,
            few_below: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Many,
    Medium,
    Few,
}

impl SplitThresholds {
    pub fn classify(&self, count: usize) -> Split {
        if count > self.many_above {
            Split::Many
        } else if count < self.few_below {
            Split::Few
        } else {
            Split::Medium
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub selected: usize,
    pub truly_clean: usize,
    pub clean_selected: usize,
}

impl PrecisionRecall {
    fn from_counts(selected: usize, truly_clean: usize, clean_selected: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            precision: ratio(clean_selected, selected),
            recall: ratio(clean_selected, truly_clean),
            selected,
            truly_clean,
            clean_selected,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionQuality {
    pub overall: PrecisionRecall,
    pub many: PrecisionRecall,
    pub medium: PrecisionRecall,
    pub few: PrecisionRecall,
}

/// Precision and recall of the clean set against ground truth, overall and
/// per class-size split.
pub fn selection_quality(
    partition: &Partition,
    dataset: &LabeledDataset,
    thresholds: &SplitThresholds,
) -> Result<SelectionQuality> {
    let clean = dataset.clean_flags()?;
    let selected = partition.selected_flags(dataset.len());
    // [selected, truly_clean, clean_selected] for overall, many, medium, few
    let mut tallies = [[0usize; 3]; 4];
    for i in 0..dataset.len() {
        let split = match thresholds.classify(dataset.observed_counts[dataset.observed_labels[i]]) {
            Split::Many => 1,
            Split::Medium => 2,
            Split::Few => 3,
        };
        for slot in [0, split] {
            let t = &mut tallies[slot];
            t[0] += usize::from(selected[i]);
            t[1] += usize::from(clean[i]);
            t[2] += usize::from(selected[i] && clean[i]);
        }
    }
    let pr = |t: [usize; 3]| PrecisionRecall::from_counts(t[0], t[1], t[2]);
    Ok(SelectionQuality {
        overall: pr(tallies[0]),
        many: pr(tallies[1]),
        medium: pr(tallies[2]),
        few: pr(tallies[3]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::net::Layer;

    fn constant_model(c: usize, d: usize) -> Classifier {
        Classifier::from_layers(vec![Layer {
            weights: Matrix::zeros(c, d),
            bias: vec![0.0; c],
        }])
        .unwrap()
    }

    fn toy(labels: Vec<usize>, truth: Vec<usize>, c: usize) -> LabeledDataset {
        let n = labels.len();
        LabeledDataset::new(Matrix::zeros(n, 2), labels, Some(truth), c).unwrap()
    }

    #[test]
    fn uniform_model_losses_are_ln_c() {
        let ds = toy(vec![0, 1, 2, 2], vec![0, 1, 2, 2], 4);
        let cl = per_class_losses(&constant_model(4, 2), &ds).unwrap();
        assert!(cl.losses.iter().flatten().all(|l| (l - 4f64.ln()).abs() < 1e-12));
        assert!(cl.losses[3].is_empty());
        assert_eq!(cl.indices[2], vec![2, 3]);
    }

    #[test]
    fn constant_losses_make_every_class_clean() {
        let ds = toy(vec![0, 0, 0, 0, 0, 1, 1], vec![0; 7], 2);
        let p = select(&constant_model(2, 2), &ds, &GmmConfig::default()).unwrap();
        assert_eq!(p.num_clean(), 7);
        assert!(p.is_disjoint_cover(7));
    }

    #[test]
    fn posterior_of_exactly_half_is_unlabeled() {
        // Two symmetric clusters per class put the midpoint at posterior 0.5.
        let losses = vec![0.0, 0.0, 2.0, 2.0, 1.0];
        let labels = vec![0; 5];
        let p = select_from_losses(&losses, &labels, 1, SelectionMode::ClassAware, &GmmConfig::default()).unwrap();
        let fit = &p.per_class_fits[0];
        let mid = fit.posterior_clean(1.0);
        if mid == 0.5 {
            assert!(p.unlabeled_indices.contains(&4));
        }
        assert!(p.is_disjoint_cover(5));
    }

    #[test]
    fn quality_edge_cases() {
        let ds = toy(vec![0, 0, 1, 1], vec![0, 1, 1, 1], 2);
        let perfect = Partition {
            clean_indices: vec![vec![0], vec![2, 3]],
            unlabeled_indices: vec![1],
            clean_posteriors: vec![1.0, 0.0, 1.0, 1.0],
            per_class_fits: vec![],
        };
        let q = selection_quality(&perfect, &ds, &SplitThresholds::default()).unwrap();
        assert_eq!((q.overall.precision, q.overall.recall), (1.0, 1.0));

        let everything = Partition {
            clean_indices: vec![vec![0, 1], vec![2, 3]],
            unlabeled_indices: vec![],
            ..perfect.clone()
        };
        let q = selection_quality(&everything, &ds, &SplitThresholds::default()).unwrap();
        assert_eq!((q.overall.precision, q.overall.recall), (0.75, 1.0));

        let nothing = Partition {
            clean_indices: vec![vec![], vec![]],
            unlabeled_indices: vec![0, 1, 2, 3],
            ..perfect
        };
        let q = selection_quality(&nothing, &ds, &SplitThresholds::default()).unwrap();
        assert_eq!((q.overall.precision, q.overall.recall), (0.0, 0.0));
        assert_eq!(q.few.selected, 0);
    }

    #[test]
    fn split_thresholds() {
        let t = SplitThresholds::default();
        assert_eq!(t.classify(101), Split::Many);
        assert_eq!(t.classify(100), Split::Medium);
        assert_eq!(t.classify(20), Split::Medium);
        assert_eq!(t.classify(19), Split::Few);
    }
}
