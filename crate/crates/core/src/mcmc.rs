//! Adaptive random-walk Metropolis with convergence diagnostics.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::numeric::{hessian, nelder_mead};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    /// Post-warmup draws per chain.
    pub n_draws: usize,
    pub target_accept: f64,
    pub rhat_threshold: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 1500,
            n_draws: 2000,
            target_accept: 0.30,
            rhat_threshold: 1.05,
        }
    }
}

/// Post-warmup draws on the unconstrained scale.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub dim: usize,
    pub n_chains: usize,
    pub n_per_chain: usize,
    /// Row-major, chain-major: draw `t` of chain `c` is row `c·n_per_chain + t`.
    pub draws: Vec<f64>,
    pub lp: Vec<f64>,
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub accept_rate: Vec<f64>,
    /// All `R̂` at or below the configured threshold.
    pub converged: bool,
    pub restarts: usize,
}

impl PosteriorDraws {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.draws[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.lp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lp.is_empty()
    }

    pub fn chain_of(&self, i: usize) -> usize {
        i / self.n_per_chain
    }

    pub fn rhat_max(&self) -> f64 {
        self.rhat.iter().copied().fold(f64::NAN, f64::max)
    }

    /// Writes `chain,iter,u0..,lp`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["chain".to_string(), "iter".to_string()];
        header.extend((0..self.dim).map(|j| format!("u{j}")));
        header.push("lp".into());
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.chain_of(i).to_string(), (i % self.n_per_chain).to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            rec.push(self.lp[i].to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Posterior mode by Nelder–Mead, restarted from the best point found.
pub fn find_mode<F: Fn(&[f64]) -> f64>(log_density: &F, start: &[f64]) -> (Vec<f64>, f64) {
    let mut x = start.to_vec();
    let mut best = f64::NEG_INFINITY;
    for round in 0..4 {
        let step = if round == 0 { 0.5 } else { 0.1 };
        let m = nelder_mead(|u| -log_density(u), &x, step, 1e-10, 400 * (x.len() + 1));
        let v = -m.value;
        let improved = v > best + 1e-8;
        if v >= best {
            best = v;
            x = m.x;
        }
        if !improved && round > 0 {
            break;
        }
    }
    (x, best)
}

/// Laplace covariance at `mode`; falls back to a diagonal guess when the
/// finite-difference Hessian is not negative definite.
pub fn laplace_covariance<F: Fn(&[f64]) -> f64>(log_density: &F, mode: &[f64]) -> Vec<f64> {
    let d = mode.len();
    let h = hessian(|u| -log_density(u), mode, 1e-4);
    let finite = h.iter().all(|v| v.is_finite());
    if finite {
        if let Ok(ch) = Cholesky::new(h.clone(), d) {
            let inv = ch.inverse();
            let mut out = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] = inv[(i, j)];
                }
            }
            if out.iter().all(|v| v.is_finite()) {
                return out;
            }
        }
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        let hi = h[i * d + i];
        out[i * d + i] = if finite && hi > 1e-8 { (1.0 / hi).min(1.0) } else { 0.1 };
    }
    out
}

fn cov_factor(cov: &[f64], d: usize) -> Cholesky {
    let mut c = cov.to_vec();
    for attempt in 0..20 {
        if let Ok(ch) = Cholesky::new(c.clone(), d) {
            return ch;
        }
        let bump = 1e-10 * 10f64.powi(attempt);
        for i in 0..d {
            c[i * d + i] += bump.max(1e-10 * cov[i * d + i].abs());
        }
    }
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 0.01;
    }
    Cholesky::new(eye, d).expect("diagonal is positive definite")
}

struct ChainOutput {
    draws: Vec<f64>,
    lp: Vec<f64>,
    accepted: usize,
}

fn run_chain<F: Fn(&[f64]) -> f64>(
    log_density: &F,
    start: Vec<f64>,
    init_cov: &[f64],
    cfg: &McmcConfig,
    rng: &mut ChaCha8Rng,
) -> ChainOutput {
    let d = start.len();
    let base = 2.38 * 2.38 / d as f64;
    let mut x = start;
    let mut lp = log_density(&x);
    let mut prop_cov: Vec<f64> = init_cov.iter().map(|v| v * base).collect();
    let mut chol = cov_factor(&prop_cov, d);
    let mut log_scale = 0.0_f64;
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d * d];
    let mut n_seen = 0usize;
    let adapt_start = (cfg.n_warmup / 5).max(50);
    let mut z = vec![0.0; d];
    let mut propose = |x: &[f64], chol: &Cholesky, scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let step = chol.mul_lower(&z);
        x.iter().zip(step).map(|(a, b)| a + scale * b).collect()
    };

    for t in 0..cfg.n_warmup {
        let scale = log_scale.exp();
        let cand = propose(&x, &chol, scale, rng);
        let lc = log_density(&cand);
        let log_a = if lc.is_finite() { (lc - lp).min(0.0) } else { f64::NEG_INFINITY };
        let u: f64 = rng.random();
        if u.ln() < log_a {
            x = cand;
            lp = lc;
        }
        let acc = log_a.exp();
        log_scale += (acc - cfg.target_accept) / ((t + 1) as f64).powf(0.6);
        log_scale = log_scale.clamp(-10.0, 5.0);
        if t >= adapt_start {
            n_seen += 1;
            let nf = n_seen as f64;
            let delta: Vec<f64> = x.iter().zip(&mean).map(|(a, m)| a - m).collect();
            for i in 0..d {
                mean[i] += delta[i] / nf;
            }
            for i in 0..d {
                for j in 0..d {
                    m2[i * d + j] += delta[i] * (x[j] - mean[j]);
                }
            }
            if n_seen >= 2 * d + 20 && n_seen.is_multiple_of(25) {
                let w = nf / (nf + 50.0);
                prop_cov = (0..d * d)
                    .map(|k| base * (w * m2[k] / (nf - 1.0) + (1.0 - w) * init_cov[k]))
                    .collect();
                for i in 0..d {
                    prop_cov[i * d + i] += 1e-10;
                }
                chol = cov_factor(&prop_cov, d);
            }
        }
    }

    let scale = log_scale.exp();
    let mut draws = Vec::with_capacity(cfg.n_draws * d);
    let mut lps = Vec::with_capacity(cfg.n_draws);
    let mut accepted = 0;
    for _ in 0..cfg.n_draws {
        let cand = propose(&x, &chol, scale, rng);
        let lc = log_density(&cand);
        let log_a = if lc.is_finite() { (lc - lp).min(0.0) } else { f64::NEG_INFINITY };
        let u: f64 = rng.random();
        if u.ln() < log_a {
            x = cand;
            lp = lc;
            accepted += 1;
        }
        draws.extend_from_slice(&x);
        lps.push(lp);
    }
    ChainOutput {
        draws,
        lp: lps,
        accepted,
    }
}

/// Runs `cfg.n_chains` chains started near the posterior mode.
pub fn sample<F: Fn(&[f64]) -> f64>(log_density: &F, start: &[f64], cfg: &McmcConfig, seed: u64) -> Result<PosteriorDraws> {
    let d = start.len();
    if d == 0 {
        return Err(Error::InvalidArgument("nothing to sample".into()));
    }
    if cfg.n_chains == 0 || cfg.n_draws < 4 {
        return Err(Error::InvalidArgument("need at least one chain and four draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut restarts = 0;
    let mut init = start.to_vec();
    let (mode, lp_mode) = loop {
        let (m, v) = find_mode(log_density, &init);
        if v.is_finite() {
            break (m, v);
        }
        restarts += 1;
        if restarts > 10 {
            return Err(Error::Sampler("no finite log-posterior after 10 restarts".into()));
        }
        init = start.iter().map(|s| s + rng.sample::<f64, _>(StandardNormal)).collect();
    };
    let _ = lp_mode;
    let cov = laplace_covariance(log_density, &mode);
    let chol = cov_factor(&cov, d);

    let mut all = Vec::with_capacity(cfg.n_chains * cfg.n_draws * d);
    let mut lps = Vec::with_capacity(cfg.n_chains * cfg.n_draws);
    let mut accept_rate = Vec::with_capacity(cfg.n_chains);
    for c in 0..cfg.n_chains {
        let mut crng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(c as u64 + 1)));
        let mut tries = 0;
        let start = loop {
            let z: Vec<f64> = (0..d).map(|_| crng.sample(StandardNormal)).collect();
            let jitter = chol.mul_lower(&z);
            let s: Vec<f64> = mode.iter().zip(jitter).map(|(m, j)| m + j).collect();
            if log_density(&s).is_finite() {
                break s;
            }
            tries += 1;
            restarts += 1;
            if tries >= 10 {
                break mode.clone();
            }
        };
        let out = run_chain(log_density, start, &cov, cfg, &mut crng);
        accept_rate.push(out.accepted as f64 / cfg.n_draws as f64);
        all.extend(out.draws);
        lps.extend(out.lp);
    }
    let mut draws = PosteriorDraws {
        dim: d,
        n_chains: cfg.n_chains,
        n_per_chain: cfg.n_draws,
        draws: all,
        lp: lps,
        rhat: vec![],
        ess: vec![],
        accept_rate,
        converged: false,
        restarts,
    };
    let (rhat, ess) = diagnostics(&draws);
    draws.converged = rhat.iter().all(|&r| r <= cfg.rhat_threshold);
    draws.rhat = rhat;
    draws.ess = ess;
    Ok(draws)
}

fn coordinate_chains(d: &PosteriorDraws, j: usize, split: bool) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for c in 0..d.n_chains {
        let v: Vec<f64> = (0..d.n_per_chain)
            .map(|t| d.draws[(c * d.n_per_chain + t) * d.dim + j])
            .collect();
        if split {
            let h = v.len() / 2;
            out.push(v[..h].to_vec());
            out.push(v[v.len() - h..].to_vec());
        } else {
            out.push(v);
        }
    }
    out
}

/// Split-`R̂` of a set of equally long chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let mut halves = Vec::new();
    for c in chains {
        let h = c.len() / 2;
        halves.push(c[..h].to_vec());
        halves.push(c[c.len() - h..].to_vec());
    }
    rhat(&halves)
}

fn rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| crate::stats::mean(c)).collect();
    let grand = crate::stats::mean(&means);
    let b = n / (m - 1.0) * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let w = chains.iter().map(|c| crate::stats::variance(c)).sum::<f64>() / m;
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

fn autocov(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = crate::stats::mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let max_lag = n.min(1000);
    (0..max_lag)
        .map(|lag| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len();
    let nf = n as f64;
    let acs: Vec<Vec<f64>> = chains.iter().map(|c| autocov(c)).collect();
    let means: Vec<f64> = chains.iter().map(|c| crate::stats::mean(c)).collect();
    let w = acs.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m;
    let b = if chains.len() > 1 { crate::stats::variance(&means) } else { 0.0 };
    let var_plus = w * (nf - 1.0) / nf + b;
    if var_plus <= 0.0 {
        return m * nf;
    }
    let lags = acs[0].len();
    let rho = |t: usize| 1.0 - (w - acs.iter().map(|a| a[t]).sum::<f64>() / m) / var_plus;
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < lags {
        let pair = rho(t) + rho(t + 1);
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum).max(1.0 / (m * nf).log10().max(1.0));
    m * nf / tau
}

/// Split-`R̂` and ESS per coordinate.
pub fn diagnostics(d: &PosteriorDraws) -> (Vec<f64>, Vec<f64>) {
    let mut rh = Vec::with_capacity(d.dim);
    let mut es = Vec::with_capacity(d.dim);
    for j in 0..d.dim {
        let chains = coordinate_chains(d, j, false);
        rh.push(split_rhat(&chains));
        let split = coordinate_chains(d, j, true);
        es.push(ess(&split));
    }
    (rh, es)
}
