//! Bridge-sampling estimates of log marginal likelihoods.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::mcmc::{ess, PosteriorDraws};
use crate::numeric::{log_add_exp, LogSumExp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeResult {
    pub log_ml: f64,
    pub n_iterations: usize,
    pub rel_change: f64,
    pub proposal_mean: Vec<f64>,
    /// Row-major.
    pub proposal_cov: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub bf10: f64,
    pub log_bf10: f64,
    pub prior_p1: f64,
    pub post_p1: f64,
}

/// Multivariate normal proposal.
struct Mvn {
    mean: Vec<f64>,
    chol: Cholesky,
    log_norm: f64,
}

impl Mvn {
    fn fit(rows: &[&[f64]], d: usize) -> Result<Self> {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                mean[j] += r[j] / n;
            }
        }
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..=i {
                    cov[i * d + j] += di * (r[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                cov[j * d + i] = cov[i * d + j];
            }
        }
        let chol = Cholesky::new(cov.clone(), d)
            .or_else(|_| {
                let mut c = cov.clone();
                for i in 0..d {
                    c[i * d + i] += 1e-8 * (1.0 + cov[i * d + i]);
                }
                Cholesky::new(c, d)
            })
            .map_err(|_| Error::Numerical("posterior draws have a singular covariance".into()))?;
        let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * chol.logdet();
        Ok(Self { mean, chol, log_norm })
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let w = self.chol.whiten(&diff);
        self.log_norm - 0.5 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.mean.len()).map(|_| rng.sample(StandardNormal)).collect();
        let s = self.chol.mul_lower(&z);
        self.mean.iter().zip(s).map(|(m, v)| m + v).collect()
    }

    fn cov(&self) -> Vec<f64> {
        let d = self.mean.len();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..=i.min(j)).map(|k| self.chol.l(i, k) * self.chol.l(j, k)).sum();
            }
        }
        out
    }
}

/// Iterates the optimal bridge equation given log ratios
/// `l1 = log q(θ) − log g(θ)` at posterior draws and `l2` at proposal draws.
fn iterate(l1: &[f64], l2: &[f64], n1_eff: f64, cfg: &BridgeConfig) -> (f64, usize, f64) {
    let n2 = l2.len() as f64;
    let log_s1 = (n1_eff / (n1_eff + n2)).ln();
    let log_s2 = (n2 / (n1_eff + n2)).ln();
    let lstar = crate::stats::median(l1);
    let l1: Vec<f64> = l1.iter().map(|v| v - lstar).collect();
    let l2: Vec<f64> = l2.iter().map(|v| v - lstar).collect();
    let mut log_r = 0.0;
    let mut rel = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let mut num = LogSumExp::default();
        for &v in &l2 {
            num.push(v - log_add_exp(log_s1 + v, log_s2 + log_r));
        }
        let mut den = LogSumExp::default();
        for &v in &l1 {
            den.push(-log_add_exp(log_s1 + v, log_s2 + log_r));
        }
        let new = (num.value() - n2.ln()) - (den.value() - (l1.len() as f64).ln());
        rel = (new - log_r).exp_m1().abs();
        log_r = new;
        if rel < cfg.tol {
            return (log_r + lstar, it, rel);
        }
    }
    (log_r + lstar, cfg.max_iter, rel)
}

/// Warp-I bridge sampling with a moment-matched normal proposal fitted on
/// the first half of every chain; the second halves enter the estimator.
pub fn bridge_logml<F: Fn(&[f64]) -> f64>(
    draws: &PosteriorDraws,
    log_post: &F,
    cfg: &BridgeConfig,
    seed: u64,
) -> Result<BridgeResult> {
    let d = draws.dim;
    let half = draws.n_per_chain / 2;
    if half < 2 || draws.len() < 4 {
        return Err(Error::InvalidArgument("too few draws for bridge sampling".into()));
    }
    let mut fit_rows = Vec::new();
    let mut est_idx = Vec::new();
    for c in 0..draws.n_chains {
        for t in 0..draws.n_per_chain {
            let i = c * draws.n_per_chain + t;
            if t < half {
                fit_rows.push(draws.row(i));
            } else {
                est_idx.push(i);
            }
        }
    }
    let prop = Mvn::fit(&fit_rows, d)?;

    let n1 = est_idx.len();
    let per_chain = draws.n_per_chain - half;
    let n1_eff = {
        let mut es: Vec<f64> = (0..d)
            .map(|j| {
                let chains: Vec<Vec<f64>> = (0..draws.n_chains)
                    .map(|c| (half..draws.n_per_chain).map(|t| draws.row(c * draws.n_per_chain + t)[j]).collect())
                    .collect();
                ess(&chains)
            })
            .collect();
        es.retain(|v| v.is_finite());
        let m = if es.is_empty() { n1 as f64 } else { crate::stats::median(&es) };
        m.clamp(1.0, (draws.n_chains * per_chain) as f64)
    };

    let l1: Vec<f64> = est_idx.iter().map(|&i| draws.lp[i] - prop.log_pdf(draws.row(i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l2 = Vec::with_capacity(n1);
    for _ in 0..n1 {
        let x = prop.sample(&mut rng);
        l2.push(log_post(&x) - prop.log_pdf(&x));
    }
    if l2.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::Numerical("every proposal draw has zero posterior density".into()));
    }
    if l1.iter().any(|v| !v.is_finite()) || l2.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numerical("non-finite log density in bridge sampling".into()));
    }
    let (log_ml, n_iterations, rel_change) = iterate(&l1, &l2, n1_eff, cfg);
    let mut warnings = Vec::new();
    if rel_change >= cfg.tol {
        warnings.push(format!("bridge sampling did not converge in {n_iterations} iterations"));
    }
    Ok(BridgeResult {
        log_ml,
        n_iterations,
        rel_change,
        proposal_mean: prop.mean.clone(),
        proposal_cov: prop.cov(),
        warnings,
    })
}

/// Posterior probability of H1 from a Bayes factor and prior probability.
pub fn posterior_model_prob(bf10: f64, prior_p1: f64) -> f64 {
    let log_bf = bf10.ln();
    post_from_log_bf(log_bf, prior_p1)
}

fn post_from_log_bf(log_bf: f64, prior_p1: f64) -> f64 {
    let log_odds = log_bf + prior_p1.ln() - (1.0 - prior_p1).ln();
    if log_odds >= 0.0 {
        1.0 / (1.0 + (-log_odds).exp())
    } else {
        let e = log_odds.exp();
        e / (1.0 + e)
    }
}

/// Bayes factor of model 1 over model 0 with posterior probability of model 1.
pub fn bayes_factor(log_ml1: f64, log_ml0: f64, prior_p1: f64) -> Result<ModelComparison> {
    if !(log_ml1.is_finite() && log_ml0.is_finite()) {
        return Err(Error::InvalidArgument("log marginal likelihoods must be finite".into()));
    }
    if !(prior_p1 > 0.0 && prior_p1 < 1.0) {
        return Err(Error::InvalidArgument("prior probability must lie in (0, 1)".into()));
    }
    Ok(comparison_from_log_bf(log_ml1 - log_ml0, prior_p1))
}

pub fn comparison_from_log_bf(log_bf10: f64, prior_p1: f64) -> ModelComparison {
    ModelComparison {
        bf10: log_bf10.exp(),
        log_bf10,
        prior_p1,
        post_p1: post_from_log_bf(log_bf10, prior_p1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::{sample, McmcConfig};
    use approx::assert_relative_eq;

    fn exact_draws(d: usize, n_chains: usize, n: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> PosteriorDraws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draws = Vec::new();
        let mut lp = Vec::new();
        for _ in 0..n_chains * n {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            lp.push(f(&x));
            draws.extend(x);
        }
        PosteriorDraws {
            dim: d,
            n_chains,
            n_per_chain: n,
            draws,
            lp,
            rhat: vec![1.0; d],
            ess: vec![(n_chains * n) as f64; d],
            accept_rate: vec![1.0; n_chains],
            converged: true,
            restarts: 0,
        }
    }

    #[test]
    fn recovers_known_normaliser() {
        let c = 3.7;
        let q = |x: &[f64]| c - 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let draws = exact_draws(4, 4, 1000, 11, q);
        let r = bridge_logml(&draws, &q, &BridgeConfig::default(), 5).unwrap();
        let expect = c + 2.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((r.log_ml - expect).abs() < 0.02, "{} vs {}", r.log_ml, expect);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn posterior_probabilities() {
        assert_relative_eq!(posterior_model_prob(1.0, 0.5), 0.5);
        assert_relative_eq!(posterior_model_prob(3.0, 0.5), 0.75, epsilon = 1e-15);
        assert_relative_eq!(posterior_model_prob(4.0, 0.2), 0.5, epsilon = 1e-15);
        let c = bayes_factor(1.0 + 10f64.ln(), 1.0, 0.5).unwrap();
        assert_relative_eq!(c.bf10, 10.0, epsilon = 1e-12);
        assert_eq!(bayes_factor(2.0, 2.0, 0.5).unwrap().bf10, 1.0);
        assert!(comparison_from_log_bf(800.0, 0.5).post_p1 == 1.0);
        assert!(comparison_from_log_bf(-800.0, 0.5).post_p1 >= 0.0);
    }

    /// y_i ~ N(0, σ²), σ ~ HalfNormal(1), sampled in log σ; evidence by quadrature.
    #[test]
    fn one_dimensional_evidence_matches_quadrature() {
        let y = [0.3, -1.2, 0.8, 2.1, -0.4, 0.9, -1.5];
        let ss: f64 = y.iter().map(|v| v * v).sum();
        let n = y.len() as f64;
        let q = move |u: &[f64]| {
            let s = u[0].exp();
            let ll = -0.5 * n * (2.0 * std::f64::consts::PI).ln() - n * u[0] - 0.5 * ss / (s * s);
            let lp = (2.0 / std::f64::consts::PI).sqrt().ln() - 0.5 * s * s;
            ll + lp + u[0]
        };
        let truth = crate::numeric::log_integrate_real_line(|u| q(&[u]), 0.0).unwrap();
        let draws = sample(&q, &[0.0], &McmcConfig::default(), 21).unwrap();
        let r = bridge_logml(&draws, &q, &BridgeConfig::default(), 3).unwrap();
        assert!((r.log_ml - truth).abs() < 0.01, "{} vs {}", r.log_ml, truth);
    }
}
