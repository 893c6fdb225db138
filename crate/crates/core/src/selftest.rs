//! Built-in verification suite run by `taillab selftest`.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::bias::{alpha_matrix, ratio_matrix};
use crate::datagen::{build_symmetric_transition, corrupt_labels, generate_blobs, generate_test_blobs, make_long_tail_counts, BlobSpec};
use crate::error::Result;
use crate::gmm::{fit_gmm2, GmmConfig};
use crate::gradcheck::check_logit_gradient;
use crate::matrix::Matrix;
use crate::net::{balanced_loss, ce_loss_soft, mse_loss, reg_loss, LossOutput, SoftLabel};
use crate::rng::{seeded, Rng};
use crate::trainer::{TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    /// Negates the analytic balanced-loss gradient before it is checked.
    /// Exists only to confirm the gradient check can fail.
    pub flip_balanced_gradient_sign: bool,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<width$}  {}  {:>7.3}s  {}\n",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.seconds,
                c.detail
            ));
        }
        out
    }
}

const GRAD_TOL: f64 = 1e-5;

fn random_logits(rng: &mut Rng, b: usize, c: usize) -> Matrix {
    let n = Normal::new(0.0, 2.0).expect("valid normal");
    Matrix::from_vec(b, c, (0..b * c).map(|_| n.sample(rng)).collect()).expect("shape")
}

fn random_soft(rng: &mut Rng, c: usize) -> SoftLabel {
    let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    SoftLabel::new(raw.into_iter().map(|v| v / s).collect()).expect("simplex")
}

fn grad_probe<F>(probes: usize, seed: u64, mut make: F) -> Result<(bool, String)>
where
    F: FnMut(&mut Rng, usize, usize) -> Result<(Matrix, Box<dyn Fn(&Matrix) -> Result<LossOutput>>)>,
{
    let mut rng = seeded(seed, 0);
    let mut worst = 0.0f64;
    for k in 0..probes {
        let c = if k % 2 == 0 { 3 } else { 10 };
        let b = if (k / 2) % 2 == 0 { 1 } else { 8 };
        let (logits, f) = make(&mut rng, b, c)?;
        worst = worst.max(check_logit_gradient(f, &logits)?.max_rel_error);
    }
    Ok((worst <= GRAD_TOL, format!("max relative error {worst:.2e} over {probes} probes")))
}

fn check_ce() -> Result<(bool, String)> {
    grad_probe(25, 11, |rng, b, c| {
        let logits = random_logits(rng, b, c);
        let t: Vec<SoftLabel> = (0..b).map(|_| random_soft(rng, c)).collect();
        Ok((logits, Box::new(move |z: &Matrix| ce_loss_soft(z, &t))))
    })
}

fn check_mse() -> Result<(bool, String)> {
    grad_probe(25, 12, |rng, b, c| {
        let logits = random_logits(rng, b, c);
        let t: Vec<SoftLabel> = (0..b).map(|_| random_soft(rng, c)).collect();
        Ok((logits, Box::new(move |z: &Matrix| mse_loss(z, &t))))
    })
}

fn check_balanced(flip: bool) -> Result<(bool, String)> {
    grad_probe(25, 13, |rng, b, c| {
        let logits = random_logits(rng, b, c);
        let t: Vec<SoftLabel> = (0..b).map(|_| random_soft(rng, c)).collect();
        let alpha = Matrix::from_vec(c, c, (0..c * c).map(|_| 0.1 + 4.0 * rng.gen::<f64>()).collect())?;
        Ok((
            logits,
            Box::new(move |z: &Matrix| {
                let mut out = balanced_loss(z, &t, &alpha)?;
                if flip {
                    out.grad.scale(-1.0);
                }
                Ok(out)
            }),
        ))
    })
}

fn check_reg() -> Result<(bool, String)> {
    grad_probe(25, 14, |rng, b, c| {
        let logits = random_logits(rng, b, c);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let counts: Vec<usize> = (0..c).map(|_| rng.gen_range(1..500)).collect();
        Ok((logits, Box::new(move |z: &Matrix| reg_loss(z, &labels, &counts))))
    })
}

fn check_gmm_recovery() -> Result<(bool, String)> {
    let mut rng = seeded(21, 0);
    let clean = Normal::new(0.1, 0.05).expect("normal");
    let noisy = Normal::new(3.0, 0.3).expect("normal");
    let mut values = Vec::with_capacity(500);
    let mut truth = Vec::with_capacity(500);
    for i in 0..500 {
        let is_clean = i < 350;
        values.push(if is_clean { clean.sample(&mut rng) } else { noisy.sample(&mut rng) });
        truth.push(is_clean);
    }
    let fit = fit_gmm2(&values, &GmmConfig::default())?;
    let post = fit.posteriors(&values);
    let hits = post.iter().zip(&truth).filter(|(p, t)| (**p > 0.5) == **t).count();
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    let ok = rel(fit.mean_clean, 0.1) <= 0.1 && rel(fit.mean_noisy, 3.0) <= 0.1 && hits >= 495;
    Ok((ok, format!("means {:.4}/{:.4}, membership {}/500", fit.mean_clean, fit.mean_noisy, hits)))
}

fn check_gmm_monotone() -> Result<(bool, String)> {
    let mut rng = seeded(22, 0);
    let mut worst_drop = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(10..200);
        let values: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < 0.5 { rng.gen::<f64>() } else { 2.0 + 3.0 * rng.gen::<f64>() })
            .collect();
        let fit = fit_gmm2(&values, &GmmConfig::default())?;
        for w in fit.log_likelihood_trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    Ok((worst_drop <= 1e-9, format!("largest log-likelihood decrease {worst_drop:.2e}")))
}

fn check_datagen() -> Result<(bool, String)> {
    let counts = make_long_tail_counts(&[500; 10], 100.0)?;
    let expected = [500, 299, 179, 107, 64, 38, 23, 13, 8, 5];
    let spec = BlobSpec::sample(10, 4, 10.0, 1.0, 3)?;
    let ds = generate_blobs(&spec, &[1000; 10])?;
    let t = build_symmetric_transition(&ds.observed_counts, 0.2)?;
    let rate = corrupt_labels(&ds, &t, 5)?.noise_rate()?;
    let ok = counts == expected && (rate - 0.2).abs() <= 0.02;
    Ok((ok, format!("counts {counts:?}, empirical noise {rate:.4}")))
}

fn check_rebalance() -> Result<(bool, String)> {
    let mut rng = seeded(31, 0);
    let c = 6;
    let m = Matrix::from_vec(c, c, (0..c * c).map(|_| 0.01 + rng.gen::<f64>()).collect())?;
    let r = ratio_matrix(&m)?;
    let mut worst = 0.0f64;
    for i in 0..c {
        worst = worst.max((r[(i, i)] - 1.0).abs());
        for j in 0..c {
            worst = worst.max((r[(i, j)] * r[(j, i)] - 1.0).abs());
        }
    }
    let mut scaled = m.clone();
    scaled.scale(4.0);
    let invariant = ratio_matrix(&scaled)? == r;
    let hand = alpha_matrix(&Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, 1.0]])?, 3.0, 1.0)?;
    let hand_ok = hand[(0, 1)] == 8.0 && hand[(1, 0)] == 0.5 && hand[(0, 0)] == 1.0;
    Ok((
        worst <= 1e-9 && invariant && hand_ok,
        format!("reciprocity error {worst:.2e}, scale invariant {invariant}, alpha(2; 3) = {}", hand[(0, 1)]),
    ))
}

fn check_erm_equivalence() -> Result<(bool, String)> {
    let spec = BlobSpec::sample(3, 4, 4.0, 1.0, 9)?;
    let train = generate_blobs(&spec, &[40, 20, 10])?;
    let test = generate_test_blobs(&spec, &[10, 10, 10])?;
    let base = TrainConfig {
        epochs_total: 10,
        warmup_epochs: 2,
        bias_epochs: Some(6),
        batch_size: 16,
        hidden_layers: vec![8],
        seed: 4,
        ..TrainConfig::default()
    };
    let mut erm = Trainer::new(&base, &train, Some(&test))?;
    erm.run_erm()?;
    let mut reduced = Trainer::new(&base.reduced_to_erm(), &train, Some(&test))?;
    reduced.run()?;
    let same = erm.model() == reduced.model();
    Ok((same, format!("parameters identical after {} epochs: {same}", base.epochs_total)))
}

/// Runs every check; failures are reported, never short-circuited.
pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    let flip = opts.flip_balanced_gradient_sign;
    let checks: Vec<(&'static str, Box<dyn Fn() -> Result<(bool, String)>>)> = vec![
        ("gradient/ce_loss_soft", Box::new(check_ce)),
        ("gradient/mse_loss", Box::new(check_mse)),
        ("gradient/balanced_loss", Box::new(move || check_balanced(flip))),
        ("gradient/reg_loss", Box::new(check_reg)),
        ("gmm/planted_recovery", Box::new(check_gmm_recovery)),
        ("gmm/monotone_likelihood", Box::new(check_gmm_monotone)),
        ("datagen/profile_and_noise", Box::new(check_datagen)),
        ("bias/ratio_and_alpha", Box::new(check_rebalance)),
        ("trainer/erm_equivalence", Box::new(check_erm_equivalence)),
    ];
    let results = checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    SelftestReport { checks: results }
}
