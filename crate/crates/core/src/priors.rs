//! Prior families: sampling and log-densities.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{config, Result};
use crate::simulate::{Family, LmmParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Univariate prior family. `scale` for the scaled inverse-χ² is the square
/// root of its χ²-scale parameter, so draws have median `scale²/qχ²₁(0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Normal { mean: f64, sd: f64 },
    #[serde(rename = "halfnormal")]
    HalfNormal { sd: f64 },
    Cauchy { location: f64, scale: f64 },
    ScaledInvChisq { df: f64, scale: f64 },
}

impl Dist {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Dist::Normal { sd, .. } | Dist::HalfNormal { sd } => sd > 0.0 && sd.is_finite(),
            Dist::Cauchy { scale, .. } => scale > 0.0 && scale.is_finite(),
            Dist::ScaledInvChisq { df, scale } => df > 0.0 && scale > 0.0 && scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            config(format!("non-positive scale in {self:?}"))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            Dist::HalfNormal { sd } => (sd * rng.sample::<f64, _>(StandardNormal)).abs(),
            Dist::Cauchy { location, scale } => {
                let u: f64 = rng.random();
                location + scale * (std::f64::consts::PI * (u - 0.5)).tan()
            }
            Dist::ScaledInvChisq { df, scale } => sample_scaled_inv_chisq(df, scale, rng),
        }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        match *self {
            Dist::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * (LN_2PI + z * z) - sd.ln()
            }
            Dist::HalfNormal { sd } => {
                if x < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let z = x / sd;
                    std::f64::consts::LN_2 - 0.5 * (LN_2PI + z * z) - sd.ln()
                }
            }
            Dist::Cauchy { location, scale } => {
                let z = (x - location) / scale;
                -(std::f64::consts::PI * scale * (1.0 + z * z)).ln()
            }
            Dist::ScaledInvChisq { df, scale } => scaled_inv_chisq_log_pdf(df, scale, x),
        }
    }

    /// True when the support is `[0, ∞)`.
    pub fn is_positive(&self) -> bool {
        matches!(self, Dist::HalfNormal { .. } | Dist::ScaledInvChisq { .. })
    }
}

/// Draws `df·scale² / χ²_df`.
pub fn sample_scaled_inv_chisq<R: Rng + ?Sized>(df: f64, scale: f64, rng: &mut R) -> f64 {
    let c: f64 = ChiSquared::new(df).expect("df > 0").sample(rng);
    df * scale * scale / c
}

pub fn scaled_inv_chisq_log_pdf(df: f64, scale: f64, x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    let h = 0.5 * df;
    let s2 = scale * scale;
    h * (h * s2).ln() - ln_gamma(h) - (h + 1.0) * x.ln() - h * s2 / x
}

/// LKJ correlation matrix by the onion method.
pub fn sample_lkj<R: Rng + ?Sized>(dim: usize, eta: f64, rng: &mut R) -> DMatrix<f64> {
    let mut r = DMatrix::identity(dim, dim);
    if dim < 2 {
        return r;
    }
    let mut beta = eta + (dim as f64 - 2.0) / 2.0;
    let u: f64 = Beta::new(beta, beta).expect("positive shape").sample(rng);
    r[(0, 1)] = 2.0 * u - 1.0;
    r[(1, 0)] = r[(0, 1)];
    for k in 2..dim {
        beta -= 0.5;
        let y: f64 = Beta::new(k as f64 / 2.0, beta).expect("positive shape").sample(rng);
        let mut w: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let len = y.sqrt() / norm;
        w.iter_mut().for_each(|v| *v *= len);
        let sub = r.view((0, 0), (k, k)).into_owned();
        let l = sub.cholesky().expect("onion iterate stays positive definite").l();
        let z = &l * nalgebra::DVector::from_vec(w);
        for i in 0..k {
            r[(i, k)] = z[i];
            r[(k, i)] = z[i];
        }
    }
    r
}

/// Normalised LKJ log-density.
pub fn lkj_log_pdf(r: &DMatrix<f64>, eta: f64) -> f64 {
    let d = r.nrows();
    if d < 2 {
        return 0.0;
    }
    let chol = match r.clone().cholesky() {
        Some(c) => c,
        None => return f64::NEG_INFINITY,
    };
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    (eta - 1.0) * logdet - lkj_log_normalizer(d, eta)
}

pub fn lkj_log_normalizer(d: usize, eta: f64) -> f64 {
    let df = d as f64;
    (1..d)
        .map(|i| {
            let m = df - i as f64;
            let b = eta + (m - 1.0) / 2.0;
            (2.0 * eta - 2.0 + m) * m * std::f64::consts::LN_2 + m * (2.0 * ln_gamma(b) - ln_gamma(2.0 * b))
        })
        .sum()
}

/// Priors for a Bayesian LMM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub intercept: Dist,
    pub contrasts: Dist,
    /// Shared by every random-effect SD, intercepts included.
    pub sd_random: Dist,
    pub sigma: Dist,
    pub lkj_eta: f64,
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        self.intercept.validate()?;
        self.contrasts.validate()?;
        self.sd_random.validate()?;
        self.sigma.validate()?;
        if !self.sd_random.is_positive() || !self.sigma.is_positive() {
            return config("scale priors must have positive support");
        }
        if !(self.lkj_eta > 0.0) {
            return config("LKJ shape must be positive");
        }
        Ok(())
    }

    /// Log prior density of the coefficient at column `j`.
    pub fn beta_log_pdf(&self, j: usize, b: f64) -> f64 {
        if j == 0 {
            self.intercept.log_pdf(b)
        } else {
            self.contrasts.log_pdf(b)
        }
    }
}

/// Scales of the scaled inverse-χ² priors on JZS `g` parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GPriorScales {
    pub fixed_scale: f64,
    pub random_scale: f64,
}

impl Default for GPriorScales {
    fn default() -> Self {
        Self {
            fixed_scale: 0.5,
            random_scale: 1.0,
        }
    }
}

/// Random-effect layout: number of random columns per grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EffectLayout {
    pub p: usize,
    pub k_subj: usize,
    pub k_item: usize,
}

/// Constants that bypass sampling. Empty vectors or `None` entries draw.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamPins {
    #[serde(default)]
    pub beta: Vec<Option<f64>>,
    #[serde(default)]
    pub sd_subj: Vec<Option<f64>>,
    #[serde(default)]
    pub sd_item: Vec<Option<f64>>,
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Fix every random-effect correlation at zero.
    #[serde(default)]
    pub zero_correlations: bool,
}

fn pinned(v: &[Option<f64>], i: usize) -> Option<f64> {
    v.get(i).copied().flatten()
}

pub fn draw_lmm_params<R: Rng + ?Sized>(
    prior: &PriorSpec,
    layout: EffectLayout,
    pins: &ParamPins,
    family: Family,
    rng: &mut R,
) -> LmmParams {
    let beta = (0..layout.p)
        .map(|j| {
            pinned(&pins.beta, j).unwrap_or_else(|| {
                if j == 0 {
                    prior.intercept.sample(rng)
                } else {
                    prior.contrasts.sample(rng)
                }
            })
        })
        .collect();
    let sds = |k: usize, pv: &[Option<f64>], rng: &mut R| -> Vec<f64> {
        (0..k)
            .map(|j| pinned(pv, j).unwrap_or_else(|| prior.sd_random.sample(rng)))
            .collect()
    };
    let sd_subj = sds(layout.k_subj, &pins.sd_subj, rng);
    let sd_item = sds(layout.k_item, &pins.sd_item, rng);
    let corr = |k: usize, rng: &mut R| {
        if pins.zero_correlations {
            DMatrix::identity(k, k)
        } else {
            sample_lkj(k, prior.lkj_eta, rng)
        }
    };
    let rho_subj = corr(layout.k_subj, rng);
    let rho_item = corr(layout.k_item, rng);
    let sigma = pins.sigma.unwrap_or_else(|| prior.sigma.sample(rng));
    LmmParams {
        beta,
        sd_subj,
        sd_item,
        rho_subj,
        rho_item,
        sigma,
        family,
    }
}

/// Joint prior log-density of a parameter draw (correlations included).
pub fn lmm_params_log_prior(prior: &PriorSpec, p: &LmmParams) -> f64 {
    let b: f64 = p.beta.iter().enumerate().map(|(j, &v)| prior.beta_log_pdf(j, v)).sum();
    let s: f64 = p.sd_subj.iter().chain(&p.sd_item).map(|&v| prior.sd_random.log_pdf(v)).sum();
    b + s
        + prior.sigma.log_pdf(p.sigma)
        + lkj_log_pdf(&p.rho_subj, prior.lkj_eta)
        + lkj_log_pdf(&p.rho_item, prior.lkj_eta)
}
