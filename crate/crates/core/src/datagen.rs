//! Synthetic long-tailed, label-noisy datasets.
//!
//! Class sizes follow an exponential profile, labels are corrupted either
//! through a size-proportional symmetric transition matrix or by exchanging
//! labels between class pairs (with the corrupted classes then thinned out).
//! Features are isotropic Gaussian blobs, one per class.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, parse_err, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{seeded, stream};

/// Features plus observed (possibly corrupted) labels. True labels are kept
/// only for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub observed_labels: Vec<usize>,
    pub true_labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub observed_counts: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        features: Matrix,
        observed_labels: Vec<usize>,
        true_labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.rows() != observed_labels.len() {
            return Err(invalid_arg(format!(
                "{} feature rows but {} labels",
                features.rows(),
                observed_labels.len()
            )));
        }
        if let Some(t) = &true_labels {
            if t.len() != observed_labels.len() {
                return Err(invalid_arg("true_labels length differs from observed_labels"));
            }
            if let Some(&bad) = t.iter().find(|&&l| l >= num_classes) {
                return Err(invalid_arg(format!("true label {bad} out of range for {num_classes} classes")));
            }
        }
        if let Some(&bad) = observed_labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid_arg(format!("label {bad} out of range for {num_classes} classes")));
        }
        let observed_counts = count_labels(&observed_labels, num_classes);
        Ok(Self {
            features,
            observed_labels,
            true_labels,
            num_classes,
            observed_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.observed_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Dataset restricted to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let observed: Vec<usize> = indices.iter().map(|&i| self.observed_labels[i]).collect();
        let truth = self
            .true_labels
            .as_ref()
            .map(|t| indices.iter().map(|&i| t[i]).collect());
        Self {
            features: self.features.select_rows(indices),
            observed_counts: count_labels(&observed, self.num_classes),
            observed_labels: observed,
            true_labels: truth,
            num_classes: self.num_classes,
        }
    }

    /// Ground-truth cleanliness of each observed label.
    pub fn clean_flags(&self) -> Result<Vec<bool>> {
        let truth = self
            .true_labels
            .as_ref()
            .ok_or_else(|| Error::InvalidState("dataset has no true labels".into()))?;
        Ok(self
            .observed_labels
            .iter()
            .zip(truth)
            .map(|(o, t)| o == t)
            .collect())
    }

    /// Fraction of observed labels that differ from the true labels.
    pub fn noise_rate(&self) -> Result<f64> {
        let flags = self.clean_flags()?;
        if flags.is_empty() {
            return Ok(0.0);
        }
        Ok(flags.iter().filter(|c| !**c).count() as f64 / flags.len() as f64)
    }

    fn recount(&mut self) {
        self.observed_counts = count_labels(&self.observed_labels, self.num_classes);
    }
}

pub(crate) fn count_labels(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceProfile {
    pub base_counts: Vec<usize>,
    pub imbalance_ratio: f64,
    pub resulting_counts: Vec<usize>,
}

impl ImbalanceProfile {
    pub fn new(base_counts: Vec<usize>, imbalance_ratio: f64) -> Result<Self> {
        let resulting_counts = make_long_tail_counts(&base_counts, imbalance_ratio)?;
        Ok(Self {
            base_counts,
            imbalance_ratio,
            resulting_counts,
        })
    }
}

/// Exponential class-size profile `n_i = O_i * rho^(-(i-1)/(C-1))`, floored
/// and clamped to at least one sample.
pub fn make_long_tail_counts(base_counts: &[usize], rho: f64) -> Result<Vec<usize>> {
    let c = base_counts.len();
    if c < 2 {
        return Err(invalid_arg("need at least two classes"));
    }
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(invalid_arg(format!("imbalance ratio must be >= 1, got {rho}")));
    }
    if base_counts.contains(&0) {
        return Err(invalid_arg("base counts must be >= 1"));
    }
    Ok(base_counts
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            let exact = o as f64 * rho.powf(-(i as f64) / (c - 1) as f64);
            // Endpoints such as 500 / 100 must land on the integer exactly.
            let n = (exact * (1.0 + 1e-12)).floor() as usize;
            n.max(1)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric {
        rate: f64,
    },
    Asymmetric {
        pairs: Vec<(usize, usize)>,
        flip_rate: f64,
        step_ratio: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Row-stochastic `P(observed = j | true = i)`; present for symmetric noise.
    pub transition: Option<Matrix>,
}

impl NoiseSpec {
    pub fn symmetric(counts: &[usize], rate: f64) -> Result<Self> {
        Ok(Self {
            kind: NoiseKind::Symmetric { rate },
            transition: Some(build_symmetric_transition(counts, rate)?),
        })
    }
}

/// Transition matrix with `1 - r` on the diagonal and the remaining mass
/// spread over the other classes in proportion to their sizes.
pub fn build_symmetric_transition(counts: &[usize], r: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&r) {
        return Err(invalid_arg(format!("noise rate must be in [0, 1], got {r}")));
    }
    if counts.contains(&0) {
        return Err(invalid_arg("class counts must be >= 1"));
    }
    let c = counts.len();
    if c == 0 {
        return Err(invalid_arg("no classes"));
    }
    if c == 1 && r > 0.0 {
        return Err(invalid_arg("a single class cannot be corrupted"));
    }
    let total: usize = counts.iter().sum();
    let mut m = Matrix::zeros(c, c);
    for i in 0..c {
        let others = (total - counts[i]) as f64;
        for j in 0..c {
            m[(i, j)] = if i == j {
                1.0 - r
            } else {
                r * counts[j] as f64 / others
            };
        }
    }
    Ok(m)
}

fn check_transition(transition: &Matrix, num_classes: usize) -> Result<()> {
    if transition.rows() != num_classes || transition.cols() != num_classes {
        return Err(invalid_arg("transition matrix must be C x C"));
    }
    for (i, row) in transition.iter_rows().enumerate() {
        if row.iter().any(|&v| !(v >= 0.0)) {
            return Err(invalid_arg(format!("transition row {i} has a negative entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(invalid_arg(format!("transition row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Resamples every observed label independently from the transition row of
/// its true label.
pub fn corrupt_labels(dataset: &LabeledDataset, transition: &Matrix, seed: u64) -> Result<LabeledDataset> {
    let truth = dataset
        .true_labels
        .as_ref()
        .ok_or_else(|| Error::InvalidState("corrupt_labels needs true labels".into()))?;
    check_transition(transition, dataset.num_classes)?;
    let mut rng = seeded(seed, stream::NOISE);
    let mut out = dataset.clone();
    for (obs, &y) in out.observed_labels.iter_mut().zip(truth) {
        let u: f64 = rng.gen();
        let row = transition.row(y);
        let mut acc = 0.0;
        let mut pick = row.len() - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        // Rounding in the cumulative sum must never land on a zero-probability class.
        while row[pick] == 0.0 && pick > 0 {
            pick -= 1;
        }
        *obs = pick;
    }
    out.recount();
    Ok(out)
}

/// Exchanges a fixed fraction of labels inside each class pair, then thins
/// the corrupted classes so that clean classes outnumber them by
/// `step_ratio`.
pub fn make_step_asymmetric(
    dataset: &LabeledDataset,
    pairs: &[(usize, usize)],
    flip_rate: f64,
    step_ratio: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(invalid_arg(format!("flip rate must be in [0, 1], got {flip_rate}")));
    }
    if !(step_ratio >= 1.0) || !step_ratio.is_finite() {
        return Err(invalid_arg(format!("step ratio must be >= 1, got {step_ratio}")));
    }
    let c = dataset.num_classes;
    let mut seen = vec![false; c];
    for &(a, b) in pairs {
        if a >= c || b >= c || a == b {
            return Err(invalid_arg(format!("invalid class pair ({a}, {b})")));
        }
        for k in [a, b] {
            if seen[k] {
                return Err(invalid_arg(format!("class {k} appears in more than one pair")));
            }
            seen[k] = true;
        }
    }

    let mut rng = seeded(seed, stream::NOISE);
    let mut out = dataset.clone();
    let truth = out
        .true_labels
        .get_or_insert_with(|| dataset.observed_labels.clone())
        .clone();

    for &(a, b) in pairs {
        let members = |k: usize| -> Vec<usize> { (0..truth.len()).filter(|&i| truth[i] == k).collect() };
        let (mut in_a, mut in_b) = (members(a), members(b));
        in_a.shuffle(&mut rng);
        in_b.shuffle(&mut rng);
        let flips_a = (flip_rate * in_a.len() as f64).round() as usize;
        let flips_b = (flip_rate * in_b.len() as f64).round() as usize;
        for &i in &in_a[..flips_a] {
            out.observed_labels[i] = b;
        }
        for &i in &in_b[..flips_b] {
            out.observed_labels[i] = a;
        }
    }

    let mut keep = vec![true; truth.len()];
    for k in (0..c).filter(|&k| seen[k]) {
        let mut members: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == k).collect();
        members.shuffle(&mut rng);
        let retain = (members.len() as f64 / step_ratio).ceil() as usize;
        for &i in &members[retain..] {
            keep[i] = false;
        }
    }
    let kept: Vec<usize> = (0..truth.len()).filter(|&i| keep[i]).collect();
    let mut out = out.subset(&kept);
    out.recount();
    Ok(out)
}

/// Geometry of the Gaussian-blob feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub dim: usize,
    pub class_centers: Matrix,
    pub center_scale: f64,
    pub cluster_stddev: f64,
    pub seed: u64,
}

impl BlobSpec {
    /// Draws `num_classes` centers uniformly in a ball of radius
    /// `center_scale`, redrawing any center closer than `cluster_stddev` to
    /// an earlier one.
    pub fn sample(num_classes: usize, dim: usize, center_scale: f64, cluster_stddev: f64, seed: u64) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(invalid_arg("blob spec needs dim >= 1 and at least one class"));
        }
        if !(cluster_stddev > 0.0) || !(center_scale > 0.0) {
            return Err(invalid_arg("center_scale and cluster_stddev must be > 0"));
        }
        let mut rng = seeded(seed, stream::CENTERS);
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        let mut attempts = 0usize;
        while centers.len() < num_classes {
            attempts += 1;
            if attempts > 10_000 * num_classes {
                return Err(invalid_arg(
                    "could not place well-separated centers; increase center_scale",
                ));
            }
            let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let radius = center_scale * rng.gen::<f64>().powf(1.0 / dim as f64);
            let candidate: Vec<f64> = dir.iter().map(|v| v / norm * radius).collect();
            let far_enough = centers.iter().all(|c| euclidean(c, &candidate) >= cluster_stddev);
            if far_enough {
                centers.push(candidate);
            }
        }
        Ok(Self {
            dim,
            class_centers: Matrix::from_rows(&centers)?,
            center_scale,
            cluster_stddev,
            seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_centers.rows()
    }

    fn validate(&self) -> Result<()> {
        if self.class_centers.cols() != self.dim {
            return Err(invalid_arg("class centers do not match dim"));
        }
        if !(self.cluster_stddev > 0.0) {
            return Err(invalid_arg("cluster_stddev must be > 0"));
        }
        Ok(())
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Draws `counts[i]` points around center `i`, using the spec's own seed.
pub fn generate_blobs(spec: &BlobSpec, counts: &[usize]) -> Result<LabeledDataset> {
    generate_blobs_with_stream(spec, counts, stream::SAMPLES)
}

/// Like [`generate_blobs`] but on a separate random stream, for held-out
/// splits sharing the same centers.
pub fn generate_test_blobs(spec: &BlobSpec, counts: &[usize]) -> Result<LabeledDataset> {
    generate_blobs_with_stream(spec, counts, stream::TEST_SAMPLES)
}

fn generate_blobs_with_stream(spec: &BlobSpec, counts: &[usize], stream_id: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let c = spec.num_classes();
    if counts.len() != c {
        return Err(invalid_arg(format!("{} counts for {c} classes", counts.len())));
    }
    let mut rng = seeded(spec.seed, stream_id);
    let n: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        let center = spec.class_centers.row(class);
        for _ in 0..count {
            for &mu in center {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + spec.cluster_stddev * z);
            }
            labels.push(class);
        }
    }
    let features = Matrix::from_vec(n, spec.dim, data)?;
    LabeledDataset::new(features, labels.clone(), Some(labels), c)
}

/// Everything needed to rebuild a noisy long-tailed training split and its
/// clean balanced test split from one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Per-class size before the long-tail profile is applied.
    pub base_count: usize,
    pub imbalance_ratio: f64,
    pub center_scale: f64,
    pub cluster_stddev: f64,
    pub noise: NoiseKind,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 16,
            base_count: 500,
            imbalance_ratio: 100.0,
            center_scale: 8.0,
            cluster_stddev: 1.0,
            noise: NoiseKind::Symmetric { rate: 0.5 },
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn train_counts(&self) -> Result<Vec<usize>> {
        make_long_tail_counts(&vec![self.base_count; self.num_classes], self.imbalance_ratio)
    }

    /// Returns `(noisy train, clean balanced test)`.
    pub fn build(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        if self.test_per_class == 0 {
            return Err(invalid_arg("test_per_class must be >= 1"));
        }
        let blobs = BlobSpec::sample(self.num_classes, self.dim, self.center_scale, self.cluster_stddev, self.seed)?;
        let clean = generate_blobs(&blobs, &self.train_counts()?)?;
        let train = match &self.noise {
            NoiseKind::Symmetric { rate } => {
                let t = build_symmetric_transition(&clean.observed_counts, *rate)?;
                corrupt_labels(&clean, &t, self.seed)?
            }
            NoiseKind::Asymmetric {
                pairs,
                flip_rate,
                step_ratio,
            } => make_step_asymmetric(&clean, pairs, *flip_rate, *step_ratio, self.seed)?,
        };
        let test = generate_test_blobs(&blobs, &vec![self.test_per_class; self.num_classes])?;
        Ok((train, test))
    }
}

pub fn save_dataset(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(dataset: &LabeledDataset, w: &mut W) -> Result<()> {
    let has_truth = dataset.true_labels.is_some();
    writeln!(
        w,
        "{} {} {} {}",
        dataset.num_classes,
        dataset.dim(),
        dataset.len(),
        u8::from(has_truth)
    )?;
    for i in 0..dataset.len() {
        write!(w, "{}", dataset.observed_labels[i])?;
        if let Some(t) = &dataset.true_labels {
            write!(w, ",{}", t[i])?;
        }
        for v in dataset.features.row(i) {
            write!(w, ",{}", fmt_f64(*v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Decimal with 17 significant digits; parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    read_dataset(BufReader::new(fs::File::open(path)?))
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<LabeledDataset> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(parse_err(1, "missing header")),
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(parse_err(1, "missing header: expected `C d N has_true_labels`"));
    }
    let parse_usize = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| parse_err(1, format!("malformed header field {what}: {s:?}")))
    };
    let c = parse_usize(fields[0], "C")?;
    let d = parse_usize(fields[1], "d")?;
    let n = parse_usize(fields[2], "N")?;
    let has_truth = match fields[3] {
        "0" => false,
        "1" => true,
        other => return Err(parse_err(1, format!("malformed has_true_labels: {other:?}"))),
    };
    let width = d + 1 + usize::from(has_truth);
    let mut observed = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(if has_truth { n } else { 0 });
    let mut data = Vec::with_capacity(n * d);
    for row in 0..n {
        let line_no = row + 2;
        let line = match lines.next() {
            Some(l) => l?,
            None => return Err(parse_err(line_no, format!("expected {n} rows, found {row}"))),
        };
        let cells: Vec<&str> = line.trim_end().split(',').collect();
        if cells.len() != width {
            return Err(parse_err(line_no, format!("expected {width} fields, found {}", cells.len())));
        }
        let label = |s: &str| -> Result<usize> {
            let l: usize = s
                .parse()
                .map_err(|_| parse_err(line_no, format!("malformed label {s:?}")))?;
            if l >= c {
                return Err(parse_err(line_no, format!("label {l} out of range for {c} classes")));
            }
            Ok(l)
        };
        observed.push(label(cells[0])?);
        let feat_start = if has_truth {
            truth.push(label(cells[1])?);
            2
        } else {
            1
        };
        for s in &cells[feat_start..] {
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(line_no, format!("malformed feature {s:?}")))?;
            data.push(v);
        }
    }
    if let Some(extra) = lines.next() {
        if !extra?.trim().is_empty() {
            return Err(parse_err(n + 2, "trailing rows beyond N"));
        }
    }
    LabeledDataset::new(
        Matrix::from_vec(n, d, data)?,
        observed,
        has_truth.then_some(truth),
        c,
    )
}
