//! Three-phase training loop: warm-up, bias estimation on the selected
//! clean set, then rebalanced semi-supervised training.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bias::{BiasState, RebalanceCoefficients};
use crate::cass::{select_with, selection_quality, Partition, SelectionMode, SelectionQuality, SplitThresholds};
use crate::datagen::LabeledDataset;
use crate::error::{invalid_arg, Error, Result};
use crate::gmm::GmmConfig;
use crate::harness::{evaluate, EvalReport};
use crate::matrix::Matrix;
use crate::net::{
    balanced_loss, ce_loss_soft, init_model, mse_loss, reg_loss, sgd_step, Classifier, LossOutput, LrSchedule,
    OptimizerState, SoftLabel,
};
use crate::rng::{seeded, stream, Rng};
use crate::ssl::{build_mixed_batches, SslConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Ssbl,
    Erm,
    NoRebalance,
    FreqRebalance,
    NoRegWarmup,
    NoRegAll,
    SingleGmm,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Ssbl,
        Variant::Erm,
        Variant::NoRebalance,
        Variant::FreqRebalance,
        Variant::NoRegWarmup,
        Variant::NoRegAll,
        Variant::SingleGmm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ssbl => "ssbl",
            Variant::Erm => "erm",
            Variant::NoRebalance => "no_rebalance",
            Variant::FreqRebalance => "freq_rebalance",
            Variant::NoRegWarmup => "no_reg_warmup",
            Variant::NoRegAll => "no_reg_all",
            Variant::SingleGmm => "single_gmm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                invalid_arg(format!("unknown variant `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Defaults to three quarters of the total epochs.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_epoch: None,
            lr_drop_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_total: usize,
    /// Last epoch (exclusive) of bias estimation. Defaults to `3 T / 4`.
    pub bias_epochs: Option<usize>,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lambda_warm: f64,
    pub lambda_reg: f64,
    pub ema_sigma: f64,
    pub gamma_sup: f64,
    pub gamma_rel: f64,
    pub hidden_layers: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub ssl: SslConfig,
    pub gmm: GmmConfig,
    pub selection: SelectionMode,
    pub split_thresholds: SplitThresholds,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_total: 200,
            bias_epochs: None,
            warmup_epochs: 10,
            batch_size: 64,
            lambda_warm: 0.2,
            lambda_reg: 0.2,
            ema_sigma: 0.9,
            gamma_sup: 3.0,
            gamma_rel: 1.0,
            hidden_layers: vec![64, 64],
            optimizer: OptimizerConfig::default(),
            ssl: SslConfig::default(),
            gmm: GmmConfig::default(),
            selection: SelectionMode::ClassAware,
            split_thresholds: SplitThresholds::default(),
            variant: Variant::Ssbl,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn bias_end(&self) -> usize {
        self.bias_epochs.unwrap_or(3 * self.epochs_total / 4)
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            initial_lr: self.optimizer.initial_lr,
            drop_epoch: self.optimizer.lr_drop_epoch.unwrap_or(3 * self.epochs_total / 4),
            drop_factor: self.optimizer.lr_drop_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.bias_end();
        if self.warmup_epochs > e || e > self.epochs_total {
            return Err(invalid_arg(format!(
                "need warmup_epochs <= bias_epochs <= epochs_total, got {} / {} / {}",
                self.warmup_epochs, e, self.epochs_total
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid_arg("batch_size must be >= 1"));
        }
        for (name, v) in [("lambda_warm", self.lambda_warm), ("lambda_reg", self.lambda_reg)] {
            if !(v >= 0.0) {
                return Err(invalid_arg(format!("{name} must be >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_sigma) {
            return Err(invalid_arg("ema_sigma must lie in [0, 1)"));
        }
        if !(self.gamma_sup >= 0.0 && self.gamma_rel >= 0.0) {
            return Err(invalid_arg("gamma exponents must be >= 0"));
        }
        let o = &self.optimizer;
        if !(o.initial_lr >= 0.0 && o.momentum >= 0.0 && o.weight_decay >= 0.0 && o.lr_drop_factor > 0.0) {
            return Err(invalid_arg("optimizer settings must be non-negative with a positive drop factor"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(invalid_arg("hidden layer widths must be >= 1"));
        }
        self.ssl.validate()
    }

    /// The configuration with the variant's overrides applied.
    pub fn effective(&self) -> TrainConfig {
        let mut c = self.clone();
        match self.variant {
            Variant::NoRegWarmup => c.lambda_warm = 0.0,
            Variant::NoRegAll => {
                c.lambda_warm = 0.0;
                c.lambda_reg = 0.0;
            }
            Variant::SingleGmm => c.selection = SelectionMode::SingleGmm,
            _ => {}
        }
        c
    }

    /// This configuration with every selection, mixing, regularization and
    /// rebalancing feature switched off. Training under it follows the plain
    /// cross-entropy loop step for step.
    pub fn reduced_to_erm(&self) -> TrainConfig {
        TrainConfig {
            lambda_warm: 0.0,
            lambda_reg: 0.0,
            ssl: SslConfig {
                lambda_u: 0.0,
                ..SslConfig::identity()
            },
            selection: SelectionMode::AllClean,
            variant: Variant::NoRebalance,
            ..self.clone()
        }
    }

    pub fn layer_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_layers);
        dims.push(num_classes);
        dims
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    BiasEstimation,
    Main,
    Erm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub epoch: usize,
    pub phase: Phase,
    pub learning_rate: f64,
    pub loss_labeled: f64,
    pub loss_unlabeled: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
    pub num_clean: Option<usize>,
    pub num_unlabeled: Option<usize>,
    pub test_accuracy: Option<f64>,
    pub test_balanced_accuracy: Option<f64>,
    pub selection: Option<SelectionQuality>,
}

/// Class-aware against single-GMM selection on the same model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionComparison {
    pub epoch: usize,
    pub class_aware: SelectionQuality,
    pub single_gmm: SelectionQuality,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub num_classes: usize,
    pub epochs: Vec<EpochEntry>,
    pub bias_ema: Option<Matrix>,
    pub coefficients: Option<RebalanceCoefficients>,
    pub alpha_digest_first_main: Option<String>,
    pub alpha_digest_last_main: Option<String>,
    pub selection_comparison: Option<SelectionComparison>,
    pub final_eval: Option<EvalReport>,
    pub best_accuracy: Option<f64>,
    pub last_accuracy: Option<f64>,
    pub best_balanced_accuracy: Option<f64>,
    pub last_balanced_accuracy: Option<f64>,
    pub warnings: Vec<String>,
}

impl RunRecord {
    fn summarize(&mut self) {
        let acc: Vec<f64> = self.epochs.iter().filter_map(|e| e.test_accuracy).collect();
        let bal: Vec<f64> = self.epochs.iter().filter_map(|e| e.test_balanced_accuracy).collect();
        self.best_accuracy = acc.iter().copied().reduce(f64::max);
        self.last_accuracy = acc.last().copied();
        self.best_balanced_accuracy = bal.iter().copied().reduce(f64::max);
        self.last_balanced_accuracy = bal.last().copied();
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub struct RunOutput {
    pub record: RunRecord,
    pub model: Classifier,
}

#[derive(Default)]
struct LossTally {
    labeled: f64,
    unlabeled: f64,
    reg: f64,
    total: f64,
    steps: usize,
}

impl LossTally {
    fn add(&mut self, labeled: f64, unlabeled: f64, reg: f64, total: f64) {
        self.labeled += labeled;
        self.unlabeled += unlabeled;
        self.reg += reg;
        self.total += total;
        self.steps += 1;
    }

    fn mean(&self) -> [f64; 4] {
        let n = self.steps.max(1) as f64;
        [self.labeled / n, self.unlabeled / n, self.reg / n, self.total / n]
    }
}

/// Draws unlabeled indices cyclically, reshuffling at every wrap.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(mut order: Vec<usize>, rng: &mut Rng) -> Self {
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn add_scaled(dst: &mut Matrix, row_offset: usize, src: &Matrix, factor: f64) {
    for r in 0..src.rows() {
        let d = dst.row_mut(row_offset + r);
        for (a, b) in d.iter_mut().zip(src.row(r)) {
            *a += factor * b;
        }
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: &'a LabeledDataset,
    test: Option<&'a LabeledDataset>,
    model: Classifier,
    optimizer: OptimizerState,
    batch_rng: Rng,
    mix_rng: Rng,
    unlabeled_rng: Rng,
    bias: BiasState,
    epoch: usize,
    record: RunRecord,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, train: &'a LabeledDataset, test: Option<&'a LabeledDataset>) -> Result<Self> {
        let dims = cfg.layer_dims(train.dim(), train.num_classes);
        let model = init_model(&dims, cfg.seed)?;
        Self::with_model(cfg, train, test, model)
    }

    pub fn with_model(
        cfg: &TrainConfig,
        train: &'a LabeledDataset,
        test: Option<&'a LabeledDataset>,
        model: Classifier,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(invalid_arg("training set is empty"));
        }
        if model.input_dim() != train.dim() || model.num_classes() != train.num_classes {
            return Err(invalid_arg("model shape does not match the training set"));
        }
        if let Some(t) = test {
            if t.dim() != train.dim() || t.num_classes != train.num_classes {
                return Err(invalid_arg("test set shape does not match the training set"));
            }
        }
        let cfg = cfg.effective();
        let optimizer = OptimizerState::new(&model, cfg.optimizer.momentum, cfg.optimizer.weight_decay, cfg.lr_schedule());
        let record = RunRecord {
            variant: cfg.variant,
            seed: cfg.seed,
            num_classes: train.num_classes,
            ..RunRecord::default()
        };
        Ok(Self {
            batch_rng: seeded(cfg.seed, stream::BATCHES),
            mix_rng: seeded(cfg.seed, stream::MIXMATCH),
            unlabeled_rng: seeded(cfg.seed, stream::UNLABELED),
            bias: BiasState::new(train.num_classes, cfg.ema_sigma)?,
            cfg,
            train,
            test,
            model,
            optimizer,
            epoch: 0,
            record,
        })
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn bias_state(&self) -> &BiasState {
        &self.bias
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    fn eval(&self) -> Result<Option<EvalReport>> {
        self.test.map(|t| evaluate(&self.model, t)).transpose()
    }

    fn check_finite(&self) -> Result<()> {
        if self.model.is_finite() {
            Ok(())
        } else {
            Err(Error::Training(format!("non-finite parameters after epoch {}", self.epoch)))
        }
    }

    fn push_entry(
        &mut self,
        phase: Phase,
        tally: &LossTally,
        partition: Option<&Partition>,
        selection: Option<SelectionQuality>,
    ) -> Result<()> {
        self.check_finite()?;
        let report = self.eval()?;
        let [labeled, unlabeled, reg, total] = tally.mean();
        self.record.epochs.push(EpochEntry {
            epoch: self.epoch,
            phase,
            learning_rate: self.optimizer.schedule.lr(self.epoch),
            loss_labeled: labeled,
            loss_unlabeled: unlabeled,
            loss_reg: reg,
            loss_total: total,
            num_clean: partition.map(|p| p.num_clean()),
            num_unlabeled: partition.map(|p| p.unlabeled_indices.len()),
            test_accuracy: report.as_ref().map(|r| r.overall_accuracy),
            test_balanced_accuracy: report.as_ref().map(|r| r.balanced_accuracy),
            selection,
        });
        self.epoch += 1;
        Ok(())
    }

    /// One epoch of plain cross-entropy (plus optional regularizer) on every
    /// observed label.
    fn supervised_epoch(&mut self, lambda_reg: f64, phase: Phase) -> Result<()> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.batch_rng);
        let c = self.train.num_classes;
        let mut tally = LossTally::default();
        for chunk in order.chunks(self.cfg.batch_size) {
            let x = self.train.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| self.train.observed_labels[i]).collect();
            let targets: Vec<SoftLabel> = y.iter().map(|&l| SoftLabel::one_hot(l, c)).collect();
            let cache = self.model.forward_cached(&x)?;
            let ce = ce_loss_soft(cache.logits(), &targets)?;
            let mut grad = ce.grad;
            let mut reg_value = 0.0;
            if lambda_reg > 0.0 {
                let reg = reg_loss(cache.logits(), &y, &self.train.observed_counts)?;
                add_scaled(&mut grad, 0, &reg.grad, lambda_reg);
                reg_value = reg.value;
            }
            let grads = self.model.backward(&cache, &grad)?;
            sgd_step(&mut self.model, &mut self.optimizer, &grads, self.epoch)?;
            tally.add(ce.value, 0.0, reg_value, ce.value + lambda_reg * reg_value);
        }
        self.push_entry(phase, &tally, None, None)
    }

    /// Warm-up epochs `[0, W)`.
    pub fn warmup(&mut self) -> Result<()> {
        while self.epoch < self.cfg.warmup_epochs {
            self.supervised_epoch(self.cfg.lambda_warm, Phase::Warmup)?;
        }
        Ok(())
    }

    /// Plain empirical risk minimisation for every epoch.
    pub fn run_erm(&mut self) -> Result<()> {
        while self.epoch < self.cfg.epochs_total {
            self.supervised_epoch(0.0, Phase::Erm)?;
        }
        Ok(())
    }

    fn partition(&self, mode: SelectionMode) -> Result<Partition> {
        let p = select_with(&self.model, self.train, mode, &self.cfg.gmm)?;
        if !p.is_disjoint_cover(self.train.len()) {
            return Err(Error::InvalidState("selection is not a partition of the training set".into()));
        }
        Ok(p)
    }

    fn quality(&self, p: &Partition) -> Result<Option<SelectionQuality>> {
        if self.train.true_labels.is_none() {
            return Ok(None);
        }
        selection_quality(p, self.train, &self.cfg.split_thresholds).map(Some)
    }

    /// One semi-supervised step on a labeled and an unlabeled index batch.
    fn ssl_step(
        &mut self,
        labeled: &[usize],
        unlabeled: &[usize],
        alpha: Option<&Matrix>,
        accumulate_bias: bool,
        tally: &mut LossTally,
    ) -> Result<()> {
        let lx = self.train.features.select_rows(labeled);
        let ly: Vec<usize> = labeled.iter().map(|&i| self.train.observed_labels[i]).collect();
        if accumulate_bias {
            let probs = self.model.predict_proba(&lx)?;
            self.bias.accumulate(&probs, &ly)?;
        }
        let ux = self.train.features.select_rows(unlabeled);
        let (lmix, umix) = build_mixed_batches(&lx, &ly, &ux, &self.model, &self.cfg.ssl, &mut self.mix_rng)?;
        let nl = lmix.len();
        let inputs = if umix.is_empty() { lmix.inputs } else { lmix.inputs.vstack(&umix.inputs)? };
        let cache = self.model.forward_cached(&inputs)?;
        let logits = cache.logits();
        let (l_logits, u_logits) = if umix.is_empty() {
            (logits.clone(), None)
        } else {
            let li: Vec<usize> = (0..nl).collect();
            let ui: Vec<usize> = (nl..logits.rows()).collect();
            (logits.select_rows(&li), Some(logits.select_rows(&ui)))
        };

        let sup: LossOutput = match alpha {
            Some(a) => balanced_loss(&l_logits, &lmix.soft_labels, a)?,
            None => ce_loss_soft(&l_logits, &lmix.soft_labels)?,
        };
        let mut grad = if umix.is_empty() {
            sup.grad
        } else {
            let mut g = Matrix::zeros(logits.rows(), logits.cols());
            add_scaled(&mut g, 0, &sup.grad, 1.0);
            g
        };
        let (lambda_u, lambda_reg) = (self.cfg.ssl.lambda_u, self.cfg.lambda_reg);
        let mut u_value = 0.0;
        if let Some(ul) = &u_logits {
            if lambda_u > 0.0 {
                let mse = mse_loss(ul, &umix.soft_labels)?;
                add_scaled(&mut grad, nl, &mse.grad, lambda_u);
                u_value = mse.value;
            }
        }
        let mut reg_value = 0.0;
        if lambda_reg > 0.0 {
            let reg = reg_loss(&l_logits, &lmix.hard_labels, &self.train.observed_counts)?;
            add_scaled(&mut grad, 0, &reg.grad, lambda_reg);
            reg_value = reg.value;
        }
        let grads = self.model.backward(&cache, &grad)?;
        sgd_step(&mut self.model, &mut self.optimizer, &grads, self.epoch)?;
        tally.add(sup.value, u_value, reg_value, sup.value + lambda_u * u_value + lambda_reg * reg_value);
        Ok(())
    }

    fn ssl_epoch(&mut self, phase: Phase, alpha: Option<&Matrix>) -> Result<()> {
        let partition = self.partition(self.cfg.selection)?;
        let quality = self.quality(&partition)?;
        let mut clean = partition.clean_sorted();
        if clean.is_empty() {
            return Err(Error::Training(format!("selection produced an empty clean set at epoch {}", self.epoch)));
        }
        clean.shuffle(&mut self.batch_rng);
        let mut cycler = Cycler::new(partition.unlabeled_indices.clone(), &mut self.unlabeled_rng);
        let accumulate = phase == Phase::BiasEstimation;
        let mut tally = LossTally::default();
        for chunk in clean.chunks(self.cfg.batch_size) {
            let u = cycler.take(self.cfg.batch_size, &mut self.unlabeled_rng);
            self.ssl_step(chunk, &u, alpha, accumulate, &mut tally)?;
        }
        if accumulate {
            // An epoch without accumulation is logged inside the bias state.
            let _ = self.bias.finalize_epoch();
        }
        self.push_entry(phase, &tally, Some(&partition), quality)
    }

    /// Epochs `[W, E)`: selection, semi-supervised training and the bias
    /// moving average. Returns the coefficients for the main phase.
    pub fn bias_estimation_phase(&mut self) -> Result<RebalanceCoefficients> {
        while self.epoch < self.cfg.bias_end() {
            self.ssl_epoch(Phase::BiasEstimation, None)?;
        }
        let c = self.train.num_classes;
        let (gs, gr) = (self.cfg.gamma_sup, self.cfg.gamma_rel);
        let estimated = self.bias.rows_ever_updated().iter().any(|&u| u);
        if estimated {
            self.record.bias_ema = Some(self.bias.ema().clone());
        }
        let coeffs = match self.cfg.variant {
            Variant::NoRebalance | Variant::Erm => RebalanceCoefficients::uniform(c, gs, gr),
            Variant::FreqRebalance => RebalanceCoefficients::from_frequencies(&self.train.observed_counts, gs, gr)?,
            _ if !estimated => {
                self.record
                    .warnings
                    .push("no bias estimation epochs ran; using uniform rebalancing".into());
                RebalanceCoefficients::uniform(c, gs, gr)
            }
            _ => RebalanceCoefficients::from_bias(self.bias.ema(), gs, gr)?,
        };
        if !coeffs.alpha.is_finite() || !coeffs.ratio.is_finite() {
            return Err(Error::Training("rebalancing coefficients are not finite".into()));
        }
        self.record.coefficients = Some(coeffs.clone());
        Ok(coeffs)
    }

    /// Epochs `[E, T)` with the frozen rebalancing weights.
    pub fn main_phase(&mut self, coeffs: &RebalanceCoefficients) -> Result<()> {
        let c = self.train.num_classes;
        if coeffs.alpha.rows() != c || coeffs.alpha.cols() != c {
            return Err(invalid_arg("alpha must be C x C"));
        }
        let first_main = self.epoch;
        while self.epoch < self.cfg.epochs_total {
            let digest = coeffs.alpha_digest();
            if self.epoch == first_main {
                self.record.alpha_digest_first_main = Some(digest.clone());
                self.compare_selection()?;
            }
            self.ssl_epoch(Phase::Main, Some(&coeffs.alpha))?;
            self.record.alpha_digest_last_main = Some(digest);
        }
        Ok(())
    }

    fn compare_selection(&mut self) -> Result<()> {
        if self.train.true_labels.is_none() || self.cfg.selection == SelectionMode::AllClean {
            return Ok(());
        }
        let aware = self.partition(SelectionMode::ClassAware)?;
        let single = self.partition(SelectionMode::SingleGmm)?;
        let (Some(class_aware), Some(single_gmm)) = (self.quality(&aware)?, self.quality(&single)?) else {
            return Ok(());
        };
        self.record.selection_comparison = Some(SelectionComparison {
            epoch: self.epoch,
            class_aware,
            single_gmm,
        });
        Ok(())
    }

    /// Runs every phase the variant calls for.
    pub fn run(&mut self) -> Result<()> {
        if self.cfg.variant == Variant::Erm {
            return self.run_erm();
        }
        self.warmup()?;
        let coeffs = self.bias_estimation_phase()?;
        self.main_phase(&coeffs)
    }

    pub fn finish(mut self) -> Result<RunOutput> {
        self.record.final_eval = self.eval()?;
        self.record.warnings.extend(self.bias.warnings().iter().cloned());
        self.record.summarize();
        Ok(RunOutput {
            record: self.record,
            model: self.model,
        })
    }
}

/// Trains one model from scratch and returns its record and final weights.
pub fn run_experiment(cfg: &TrainConfig, train: &LabeledDataset, test: &LabeledDataset) -> Result<RunOutput> {
    let mut trainer = Trainer::new(cfg, train, Some(test))?;
    trainer.run()?;
    trainer.finish()
}

/// Argmax of the mean softmax output of several models.
pub fn ensemble_predict(models: &[Classifier], x: &Matrix) -> Result<Vec<usize>> {
    let first = models.first().ok_or_else(|| invalid_arg("ensemble needs at least one model"))?;
    let mut sum = first.predict_proba(x)?;
    for m in &models[1..] {
        let p = m.predict_proba(x)?;
        if p.cols() != sum.cols() {
            return Err(invalid_arg("ensemble members disagree on the class count"));
        }
        for (a, b) in sum.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *a += b;
        }
    }
    Ok(sum.iter_rows().map(crate::net::argmax).collect())
}
