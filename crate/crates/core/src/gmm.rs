//! Two-component one-dimensional Gaussian mixtures fitted by EM.
//!
//! The lower-mean component models clean samples (small losses), the other
//! one noisy samples. Values are min-max normalized before fitting; the
//! returned parameters are mapped back to raw units.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub max_iter: usize,
    /// Convergence threshold on the mean per-point log-likelihood.
    pub tol: f64,
    /// Variance floor, in normalized units.
    pub var_floor: f64,
    pub normalize: bool,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            var_floor: 1e-6,
            normalize: true,
        }
    }
}

/// Fitted mixture, in raw value units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub mean_clean: f64,
    pub mean_noisy: f64,
    pub var_clean: f64,
    pub var_noisy: f64,
    pub weight_clean: f64,
    pub weight_noisy: f64,
    /// Mean per-point log-likelihood of the final parameters, normalized units.
    pub log_likelihood: f64,
    pub iterations_used: usize,
    pub degenerate: bool,
    /// Affine map `raw = offset + span * normalized` used during fitting.
    pub offset: f64,
    pub span: f64,
    /// Log-likelihood before the first and after every EM update.
    #[serde(skip)]
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Params {
    mean: [f64; 2],
    var: [f64; 2],
    weight: [f64; 2],
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - (x - mean) * (x - mean) / (2.0 * var)
}

/// Component-0 responsibilities and the mean log-likelihood.
fn e_step(xs: &[f64], p: &Params, resp: &mut [f64]) -> f64 {
    let lw = [p.weight[0].ln(), p.weight[1].ln()];
    let mut ll = 0.0;
    for (r, &x) in resp.iter_mut().zip(xs) {
        let a = lw[0] + log_normal(x, p.mean[0], p.var[0]);
        let b = lw[1] + log_normal(x, p.mean[1], p.var[1]);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        *r = (a - lse).exp();
        ll += lse;
    }
    ll / xs.len() as f64
}

fn m_step(xs: &[f64], resp: &[f64], prev: &Params, var_floor: f64) -> Params {
    let n = xs.len() as f64;
    let mut next = *prev;
    for k in 0..2 {
        let w = |r: f64| if k == 0 { r } else { 1.0 - r };
        let nk: f64 = resp.iter().map(|&r| w(r)).sum();
        next.weight[k] = nk / n;
        if nk <= 1e-12 * n {
            continue;
        }
        let mean = xs.iter().zip(resp).map(|(&x, &r)| w(r) * x).sum::<f64>() / nk;
        let var = xs
            .iter()
            .zip(resp)
            .map(|(&x, &r)| w(r) * (x - mean) * (x - mean))
            .sum::<f64>()
            / nk;
        next.mean[k] = mean;
        next.var[k] = var.max(var_floor);
    }
    next
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    // Shifted by the first value so constant inputs reproduce it exactly.
    let x0 = xs[0];
    let mean = x0 + xs.iter().map(|x| x - x0).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Fits the mixture by EM, starting from a median split.
///
/// Fewer than four values or a spread below `1e-6` yields a degenerate
/// single-component fit, under which every value counts as clean.
pub fn fit_gmm2(values: &[f64], cfg: &GmmConfig) -> Result<GmmFit> {
    if values.is_empty() {
        return Err(invalid_arg("cannot fit a mixture to no values"));
    }
    if cfg.max_iter == 0 || !(cfg.var_floor > 0.0) || !(cfg.tol >= 0.0) {
        return Err(invalid_arg("gmm config needs max_iter >= 1, var_floor > 0, tol >= 0"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid_arg("mixture input contains non-finite values"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (offset, span) = if cfg.normalize { (lo, hi - lo) } else { (0.0, 1.0) };

    if values.len() < 4 || hi - lo < 1e-6 {
        let (mean, var) = mean_var(values);
        let var = var.max(cfg.var_floor * span.max(f64::MIN_POSITIVE).powi(2));
        return Ok(GmmFit {
            mean_clean: mean,
            mean_noisy: mean,
            var_clean: var,
            var_noisy: var,
            weight_clean: 1.0,
            weight_noisy: 0.0,
            log_likelihood: 0.0,
            iterations_used: 0,
            degenerate: true,
            offset,
            span: if span > 0.0 { span } else { 1.0 },
            log_likelihood_trace: Vec::new(),
        });
    }

    let xs: Vec<f64> = values.iter().map(|v| (v - offset) / span).collect();
    let mut sorted = xs.clone();
    sorted.sort_by(f64::total_cmp);
    let half = sorted.len() / 2;
    let (lower, upper) = sorted.split_at(half);
    let (m0, v0) = mean_var(lower);
    let (m1, v1) = mean_var(upper);
    let n = xs.len() as f64;
    let mut params = Params {
        mean: [m0, m1],
        var: [v0.max(cfg.var_floor), v1.max(cfg.var_floor)],
        weight: [lower.len() as f64 / n, upper.len() as f64 / n],
    };

    let mut resp = vec![0.0; xs.len()];
    let mut ll = e_step(&xs, &params, &mut resp);
    let mut trace = vec![ll];
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        params = m_step(&xs, &resp, &params, cfg.var_floor);
        let next = e_step(&xs, &params, &mut resp);
        trace.push(next);
        let converged = (next - ll).abs() < cfg.tol;
        ll = next;
        if converged {
            break;
        }
    }

    let (clean, noisy) = if params.mean[0] <= params.mean[1] { (0, 1) } else { (1, 0) };
    let to_raw_mean = |m: f64| offset + span * m;
    let to_raw_var = |v: f64| v * span * span;
    Ok(GmmFit {
        mean_clean: to_raw_mean(params.mean[clean]),
        mean_noisy: to_raw_mean(params.mean[noisy]),
        var_clean: to_raw_var(params.var[clean]),
        var_noisy: to_raw_var(params.var[noisy]),
        weight_clean: params.weight[clean],
        weight_noisy: params.weight[noisy],
        log_likelihood: ll,
        iterations_used: iterations,
        degenerate: false,
        offset,
        span,
        log_likelihood_trace: trace,
    })
}

impl GmmFit {
    /// Posterior probability that `value` came from the clean component.
    pub fn posterior_clean(&self, value: f64) -> f64 {
        if self.degenerate {
            return 1.0;
        }
        let a = self.weight_clean.ln() + log_normal(value, self.mean_clean, self.var_clean);
        let b = self.weight_noisy.ln() + log_normal(value, self.mean_noisy, self.var_noisy);
        if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
            return 0.0;
        }
        1.0 / (1.0 + (b - a).exp())
    }

    pub fn posteriors(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.posterior_clean(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn planted(seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = Normal::new(0.1, 0.05).unwrap();
        let noisy = Normal::new(3.0, 0.3).unwrap();
        let mut values = Vec::new();
        let mut member = Vec::new();
        for _ in 0..300 {
            values.push(clean.sample(&mut rng));
            member.push(true);
        }
        for _ in 0..200 {
            values.push(noisy.sample(&mut rng));
            member.push(false);
        }
        (values, member)
    }

    #[test]
    fn recovers_planted_means() {
        let (values, _) = planted(1);
        let fit = fit_gmm2(&values, &GmmConfig::default()).unwrap();
        assert!(!fit.degenerate);
        assert!((fit.mean_clean - 0.1).abs() / 0.1 < 0.1, "{fit:?}");
        assert!((fit.mean_noisy - 3.0).abs() / 3.0 < 0.1, "{fit:?}");
        assert!((fit.weight_clean + fit.weight_noisy - 1.0).abs() < 1e-9);
        assert!(fit.posterior_clean(0.1) > 0.99);
    }

    #[test]
    fn identical_values_are_degenerate() {
        let fit = fit_gmm2(&[0.7; 12], &GmmConfig::default()).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.mean_clean, 0.7);
        assert_eq!(fit.mean_noisy, 0.7);
        assert_eq!(fit.posterior_clean(100.0), 1.0);
        assert!(fit_gmm2(&[1.0, 2.0, 3.0], &GmmConfig::default()).unwrap().degenerate);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(fit_gmm2(&[], &GmmConfig::default()).is_err());
    }

    #[test]
    fn log_likelihood_never_decreases() {
        let (values, _) = planted(5);
        let fit = fit_gmm2(&values, &GmmConfig { tol: 0.0, max_iter: 60, ..Default::default() }).unwrap();
        for w in fit.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn symmetric_fit_midpoint_is_half() {
        let fit = GmmFit {
            mean_clean: 1.0,
            mean_noisy: 3.0,
            var_clean: 0.5,
            var_noisy: 0.5,
            weight_clean: 0.5,
            weight_noisy: 0.5,
            log_likelihood: 0.0,
            iterations_used: 1,
            degenerate: false,
            offset: 0.0,
            span: 1.0,
            log_likelihood_trace: vec![],
        };
        assert!((fit.posterior_clean(2.0) - 0.5).abs() < 1e-15);
        assert!(fit.posterior_clean(1e6) < 1e-300);
    }

    #[test]
    fn fit_is_deterministic() {
        let (values, _) = planted(9);
        let a = fit_gmm2(&values, &GmmConfig::default()).unwrap();
        let b = fit_gmm2(&values, &GmmConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
