//! Bayesian LMM with every Gaussian coefficient integrated out.
//!
//! The sampler only sees `Phi`: log random-effect SDs, tanh-mapped canonical
//! partial correlations per grouping, and the log residual SD.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::design::GroupBlock;
use crate::error::{invalid, Error, Result};
use crate::lmm::{Lambda, MixedSystem};
use crate::mcmc::{self, McmcConfig, PosteriorDraws};
use crate::priors::{Dist, PriorSpec};
use crate::simulate::{Dataset, Family};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Subject,
    Item,
}

/// Random effects for one grouping factor: columns of the full design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomTerms {
    pub grouping: Grouping,
    pub columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Columns of the full design matrix kept as fixed effects; must contain 0.
    pub fixed_columns: Vec<usize>,
    pub random: Vec<RandomTerms>,
    pub priors: PriorSpec,
    pub family: Family,
}

impl ModelSpec {
    pub fn validate(&self, p_full: usize) -> Result<()> {
        if !self.fixed_columns.contains(&0) {
            return invalid("the intercept must be a fixed effect");
        }
        if self.fixed_columns.iter().any(|&c| c >= p_full) {
            return invalid("fixed column out of range");
        }
        for r in &self.random {
            if r.columns.is_empty() || r.columns.iter().any(|&c| c >= p_full) {
                return invalid("random columns empty or out of range");
            }
        }
        for (i, a) in self.random.iter().enumerate() {
            if self.random[..i].iter().any(|b| b.grouping == a.grouping) {
                return invalid("grouping listed twice");
            }
        }
        self.priors.validate()?;
        for &c in &self.fixed_columns {
            let d = if c == 0 { &self.priors.intercept } else { &self.priors.contrasts };
            if !matches!(d, Dist::Normal { .. }) {
                return invalid("collapsed models need Normal priors on fixed effects");
            }
        }
        Ok(())
    }

    /// Same model without some fixed columns (the null of a nested pair).
    pub fn without(&self, drop: &[usize]) -> Self {
        let mut m = self.clone();
        m.fixed_columns.retain(|c| !drop.contains(c));
        m
    }

    pub fn n_sds(&self) -> usize {
        self.random.iter().map(|r| r.columns.len()).sum()
    }

    pub fn n_corr(&self) -> usize {
        self.random.iter().map(|r| r.columns.len() * (r.columns.len() - 1) / 2).sum()
    }

    /// Dimension of the unconstrained parameter vector.
    pub fn dim(&self) -> usize {
        self.n_sds() + self.n_corr() + 1
    }
}

/// Variance and correlation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Phi {
    pub sds: Vec<f64>,
    /// `atanh` of the canonical partial correlations, grouping by grouping,
    /// row-major over the strict lower triangle.
    pub corr_params: Vec<f64>,
    pub log_sigma: f64,
}

impl Phi {
    pub fn from_unconstrained(spec: &ModelSpec, u: &[f64]) -> Self {
        let ns = spec.n_sds();
        let nc = spec.n_corr();
        Self {
            sds: u[..ns].iter().map(|v| v.exp()).collect(),
            corr_params: u[ns..ns + nc].to_vec(),
            log_sigma: u[ns + nc],
        }
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut u: Vec<f64> = self.sds.iter().map(|v| v.ln()).collect();
        u.extend_from_slice(&self.corr_params);
        u.push(self.log_sigma);
        u
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }
}

/// Cholesky factor (lower, row-major) of the correlation matrix whose
/// canonical partial correlations are `tanh(w)`.
pub fn cpc_cholesky(k: usize, w: &[f64]) -> Vec<f64> {
    let mut l = vec![0.0; k * k];
    l[0] = 1.0;
    let mut idx = 0;
    for i in 1..k {
        let mut rem = 1.0_f64;
        for j in 0..i {
            let z = w[idx].tanh();
            idx += 1;
            let v = z * rem.sqrt();
            l[i * k + j] = v;
            rem -= v * v;
        }
        l[i * k + i] = rem.max(0.0).sqrt();
    }
    l
}

/// Correlation matrix from unconstrained CPC coordinates.
pub fn cpc_correlation(k: usize, w: &[f64]) -> DMatrix<f64> {
    let l = cpc_cholesky(k, w);
    DMatrix::from_fn(k, k, |i, j| (0..k).map(|m| l[i * k + m] * l[j * k + m]).sum())
}

/// Inverse of [`cpc_correlation`].
pub fn cpc_unconstrain(r: &DMatrix<f64>) -> Result<Vec<f64>> {
    let k = r.nrows();
    let ch = crate::linalg::Cholesky::from_dmatrix(r)?;
    let mut w = Vec::with_capacity(k * (k - 1) / 2);
    for i in 1..k {
        let mut rem = 1.0_f64;
        for j in 0..i {
            let v = ch.l(i, j);
            let z = (v / rem.sqrt()).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
            w.push(z.atanh());
            rem -= v * v;
        }
    }
    Ok(w)
}

/// Log density, in the unconstrained coordinates, of an LKJ(`eta`) matrix.
///
/// Column `j` of the CPC array is Beta(a, a) on (−1, 1) with
/// `a = eta + (k − 2 − j)/2`; the `tanh` Jacobian adds `log(1 − z²)`.
pub fn lkj_cpc_log_density(k: usize, eta: f64, w: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut idx = 0;
    for i in 1..k {
        for j in 0..i {
            let a = eta + (k as f64 - 2.0 - j as f64) / 2.0;
            let x = w[idx];
            idx += 1;
            // log(1 − tanh²x) = 2·(log 2 − |x| − log1p(e^{−2|x|}))
            let log1mz2 = 2.0 * (std::f64::consts::LN_2 - x.abs() - (-2.0 * x.abs()).exp().ln_1p());
            let log_norm = (2.0 * a - 1.0) * std::f64::consts::LN_2 + 2.0 * ln_gamma(a) - ln_gamma(2.0 * a);
            total += a * log1mz2 - log_norm;
        }
    }
    total
}

/// A model bound to one dataset, with the cross-products precomputed.
#[derive(Debug, Clone)]
pub struct CollapsedModel {
    pub spec: ModelSpec,
    sys: MixedSystem,
    ks: Vec<usize>,
    fixed_sd: Vec<f64>,
    wtr: Vec<f64>,
    rtr: f64,
    log_jacobian: f64,
    y_sd: f64,
}

impl CollapsedModel {
    /// `x` is the full design matrix for the rows of `data`.
    pub fn new(data: &Dataset, x: &DMatrix<f64>, spec: &ModelSpec) -> Result<Self> {
        spec.validate(x.ncols())?;
        if x.nrows() != data.len() {
            return invalid("design rows do not match the data");
        }
        if spec.family != data.family {
            return invalid("model family differs from the data family");
        }
        let y = data.latent();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite response (lognormal data must be positive)".into()));
        }
        let log_jacobian = match spec.family {
            Family::Normal => 0.0,
            Family::Lognormal => -y.iter().sum::<f64>(),
        };
        let mut blocks = Vec::new();
        for r in &spec.random {
            let (ids, n_levels, name) = match r.grouping {
                Grouping::Subject => (&data.trials.subj, data.trials.n_subj, "subj"),
                Grouping::Item => (&data.trials.item, data.trials.n_item, "item"),
            };
            let index: Option<Vec<usize>> = ids.iter().copied().collect();
            let Some(index) = index else {
                return invalid(format!("{name} random effects requested but the data has no {name} ids"));
            };
            blocks.push(GroupBlock::new(name, index, n_levels, x, &r.columns)?);
        }
        let xf = DMatrix::from_fn(x.nrows(), spec.fixed_columns.len(), |i, j| x[(i, spec.fixed_columns[j])]);
        let refs: Vec<&GroupBlock> = blocks.iter().collect();
        let sys = MixedSystem::new(&xf, &refs, &y)?;

        let (mut mean, mut fixed_sd) = (Vec::new(), Vec::new());
        for &c in &spec.fixed_columns {
            let d = if c == 0 { &spec.priors.intercept } else { &spec.priors.contrasts };
            let Dist::Normal { mean: m, sd } = *d else { unreachable!("validated") };
            mean.push(m);
            fixed_sd.push(sd);
        }
        let wty = sys.wty();
        let mut wtr = wty.clone();
        let mut rtr = sys.yty();
        for (j, &mj) in mean.iter().enumerate() {
            if mj == 0.0 {
                continue;
            }
            let col = sys.gram_fixed_column(j);
            for (a, c) in wtr.iter_mut().zip(&col) {
                *a -= mj * c;
            }
            rtr -= 2.0 * mj * wty[sys.fixed_index(j)];
            for (k, &mk) in mean.iter().enumerate() {
                rtr += mj * mk * col[sys.fixed_index(k)];
            }
        }
        Ok(Self {
            ks: spec.random.iter().map(|r| r.columns.len()).collect(),
            spec: spec.clone(),
            sys,
            fixed_sd,
            wtr,
            rtr,
            log_jacobian,
            y_sd: crate::stats::sd(&y),
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn n(&self) -> usize {
        self.sys.n
    }

    fn lambda_blocks(&self, phi: &Phi) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.ks.len());
        let (mut so, mut co) = (0, 0);
        for &k in &self.ks {
            let nc = k * (k - 1) / 2;
            let mut t = cpc_cholesky(k, &phi.corr_params[co..co + nc]);
            for i in 0..k {
                for j in 0..=i {
                    t[i * k + j] *= phi.sds[so + i];
                }
            }
            out.push(t);
            so += k;
            co += nc;
        }
        out
    }

    /// Log marginal density of the data given `phi`.
    pub fn loglik(&self, phi: &Phi) -> Result<f64> {
        let n = self.sys.n as f64;
        let sigma2 = (2.0 * phi.log_sigma).exp();
        let s = 1.0 / sigma2;
        if !(s.is_finite() && s > 0.0) || phi.sds.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NotPositiveDefinite(format!("phi out of support: {phi:?}")));
        }
        let groups = self.lambda_blocks(phi);
        let lambda = Lambda {
            groups: &groups,
            fixed: &self.fixed_sd,
        };
        let f = self
            .sys
            .factor(&lambda, s, true)
            .map_err(|e| Error::NotPositiveDefinite(format!("{e} at phi = {phi:?}")))?;
        let mut v = self.sys.lambda_t(&lambda, &self.wtr);
        for a in v.iter_mut() {
            *a *= s;
        }
        let z = f.forward(&self.sys, &v);
        let quad: f64 = z.iter().map(|a| a * a).sum();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        Ok(-0.5 * (n * ln2pi + n * sigma2.ln() + f.logdet + s * self.rtr - quad) + self.log_jacobian)
    }

    /// Log prior of `u` including the transformation Jacobians.
    pub fn log_prior_unconstrained(&self, u: &[f64]) -> f64 {
        let pr = &self.spec.priors;
        let ns = self.spec.n_sds();
        let mut lp = 0.0;
        for &v in &u[..ns] {
            lp += pr.sd_random.log_pdf(v.exp()) + v;
        }
        let mut co = ns;
        for &k in &self.ks {
            let nc = k * (k - 1) / 2;
            lp += lkj_cpc_log_density(k, pr.lkj_eta, &u[co..co + nc]);
            co += nc;
        }
        let ls = u[co];
        lp + pr.sigma.log_pdf(ls.exp()) + ls
    }

    /// Log posterior (up to the evidence) on the unconstrained scale; −∞
    /// outside the support or on numerical failure.
    pub fn log_posterior(&self, u: &[f64]) -> f64 {
        if u.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let lp = self.log_prior_unconstrained(u);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        match self.loglik(&Phi::from_unconstrained(&self.spec, u)) {
            Ok(ll) if ll.is_finite() => ll + lp,
            _ => f64::NEG_INFINITY,
        }
    }

    /// Starting point: moderate SDs, no correlation.
    pub fn default_start(&self) -> Vec<f64> {
        let scale = if self.y_sd > 0.0 { self.y_sd } else { 1.0 };
        let mut u = vec![(0.3 * scale).ln(); self.spec.n_sds()];
        u.extend(std::iter::repeat_n(0.0, self.spec.n_corr()));
        u.push((0.8 * scale).ln());
        u
    }
}

/// Log marginal likelihood of `data` at `phi`.
pub fn collapsed_loglik(data: &Dataset, x: &DMatrix<f64>, spec: &ModelSpec, phi: &Phi) -> Result<f64> {
    CollapsedModel::new(data, x, spec)?.loglik(phi)
}

/// Adaptive random-walk Metropolis over `Phi`. A non-converged run is
/// repeated once with a fresh seed and doubled warmup; the better of the
/// two (by worst `R̂`) is returned.
pub fn run_mcmc(model: &CollapsedModel, cfg: &McmcConfig, seed: u64) -> Result<PosteriorDraws> {
    let target = |u: &[f64]| model.log_posterior(u);
    let start = model.default_start();
    let first = mcmc::sample(&target, &start, cfg, seed)?;
    if first.converged {
        return Ok(first);
    }
    let retry_cfg = McmcConfig {
        n_warmup: cfg.n_warmup * 2,
        ..*cfg
    };
    let second = mcmc::sample(&target, &start, &retry_cfg, seed.wrapping_add(0x5DEE_CE66D))?;
    let mut best = if second.rhat_max() < first.rhat_max() { second } else { first };
    best.restarts += 1;
    Ok(best)
}
