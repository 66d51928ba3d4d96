//! Frequentist baselines: GLS, maximum-likelihood mixed models with diagonal
//! random effects, repeated-measures F tests, min-F′, and error-rate loops.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::collapsed::{Grouping, RandomTerms};
use crate::design::{
    build_trial_table, expand_design, Assignment, ContrastKind, ContrastScheme, DesignSpec, FactorSpec, GroupBlock,
    RandomRequest,
};
use crate::error::{invalid, Error, Result};
use crate::lmm::{Lambda, MixedSystem};
use crate::numeric::{derive_seed, nelder_mead};
use crate::simulate::{aggregate, simulate, Aggregation, Dataset, Family, LmmParams};
use crate::stats::binomial_ci;

/// Generalised least squares: `β̂ = (XᵀV⁻¹X)⁻¹XᵀV⁻¹y` and its covariance.
pub fn gls(x: &DMatrix<f64>, y: &[f64], v: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let chol = v
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("GLS covariance".into()))?;
    let vx = chol.solve(x);
    let vy = chol.solve(&DVector::from_column_slice(y));
    let xtvx = x.transpose() * &vx;
    let cov = xtvx
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("XᵀV⁻¹X is singular".into()))?
        .inverse();
    let beta = &cov * (x.transpose() * vy);
    Ok((beta.iter().copied().collect(), cov))
}

/// Fixed columns plus uncorrelated random effects per grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreqModel {
    pub fixed_columns: Vec<usize>,
    #[serde(default)]
    pub random: Vec<RandomTerms>,
}

/// Denominator degrees of freedom for the coefficient t tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfMethod {
    /// Number of subjects minus one (items when there are no subjects).
    #[default]
    GroupsMinusOne,
    /// Slopes with a random term get the smallest `levels − 1` among their
    /// groupings; everything else gets `n − rank([X | Z])`.
    Containment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponent {
    pub grouping: Grouping,
    pub column: usize,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqFit {
    /// Full-design column of each coefficient.
    pub columns: Vec<usize>,
    pub beta_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub t: Vec<f64>,
    pub df: Vec<f64>,
    pub p: Vec<f64>,
    pub vc_hat: Vec<VarianceComponent>,
    pub sigma_hat: f64,
    /// Gaussian log-likelihood of the (log-scale, for lognormal data) response.
    pub loglik: f64,
    pub converged: bool,
}

impl FreqFit {
    pub fn position(&self, column: usize) -> Option<usize> {
        self.columns.iter().position(|&c| c == column)
    }
}

fn group_blocks(data: &Dataset, x: &DMatrix<f64>, random: &[RandomTerms]) -> Result<Vec<GroupBlock>> {
    let mut blocks = Vec::with_capacity(random.len());
    for r in random {
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
    Ok(blocks)
}

struct Profiled {
    sys: MixedSystem,
    ks: Vec<usize>,
    wty: Vec<f64>,
    n: f64,
}

struct Solved {
    deviance: f64,
    r2: f64,
    coef: Vec<f64>,
    fixed_inverse: DMatrix<f64>,
}

impl Profiled {
    fn lambda(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.ks.len());
        let mut at = 0;
        for &k in &self.ks {
            let mut t = vec![0.0; k * k];
            for j in 0..k {
                t[j * k + j] = theta[at + j].abs();
            }
            at += k;
            out.push(t);
        }
        out
    }

    fn deviance(&self, theta: &[f64]) -> f64 {
        self.solve(theta, false).map(|s| s.deviance).unwrap_or(f64::INFINITY)
    }

    fn solve(&self, theta: &[f64], full: bool) -> Result<Solved> {
        let groups = self.lambda(theta);
        let fixed = vec![1.0; self.sys.p];
        let lambda = Lambda { groups: &groups, fixed: &fixed };
        let factor = self.sys.factor(&lambda, 1.0, false)?;
        let c = self.sys.lambda_t(&lambda, &self.wty);
        let z = factor.forward(&self.sys, &c);
        let r2 = self.sys.yty() - z.iter().map(|v| v * v).sum::<f64>();
        if !(r2 > 0.0) {
            return Err(Error::Numerical("non-positive penalised residual".into()));
        }
        let deviance = factor.logdet_random + self.n * (1.0 + (2.0 * std::f64::consts::PI * r2 / self.n).ln());
        let (coef, fixed_inverse) = if full {
            let b = factor.backward(&self.sys, z);
            let coef = (0..self.sys.p).map(|j| b[self.sys.fixed_index(j)]).collect();
            (coef, factor.fixed_inverse(&self.sys))
        } else {
            (Vec::new(), DMatrix::zeros(0, 0))
        };
        Ok(Solved {
            deviance,
            r2,
            coef,
            fixed_inverse,
        })
    }
}

fn numeric_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > max * 1e-9 * m.nrows().max(m.ncols()) as f64).count()
}

fn degrees_of_freedom(data: &Dataset, x: &DMatrix<f64>, model: &FreqModel, blocks: &[GroupBlock], method: DfMethod) -> Vec<f64> {
    let n = data.len();
    match method {
        DfMethod::GroupsMinusOne => {
            let g = if data.trials.subj.iter().all(Option::is_some) && data.trials.n_subj > 0 {
                data.trials.n_subj
            } else {
                data.trials.n_item
            };
            let df = if g > 1 { (g - 1) as f64 } else { (n - model.fixed_columns.len()) as f64 };
            vec![df; model.fixed_columns.len()]
        }
        DfMethod::Containment => {
            let cols: usize = model.fixed_columns.len() + blocks.iter().map(|b| b.n_levels * b.k()).sum::<usize>();
            let mut xz = DMatrix::zeros(n, cols);
            for (j, &c) in model.fixed_columns.iter().enumerate() {
                xz.set_column(j, &x.column(c));
            }
            let mut at = model.fixed_columns.len();
            for b in blocks {
                let k = b.k();
                for (i, &lvl) in b.index.iter().enumerate() {
                    for j in 0..k {
                        xz[(i, at + lvl * k + j)] = b.z[(i, j)];
                    }
                }
                at += b.n_levels * k;
            }
            let resid = n.saturating_sub(numeric_rank(&xz)).max(1) as f64;
            model
                .fixed_columns
                .iter()
                .map(|&c| {
                    let mut df = f64::INFINITY;
                    for (r, b) in model.random.iter().zip(blocks) {
                        if c != 0 && r.columns.contains(&c) {
                            df = df.min((b.n_levels - 1) as f64);
                        }
                    }
                    if df.is_finite() {
                        df
                    } else {
                        resid
                    }
                })
                .collect()
        }
    }
}

/// Maximum-likelihood fit with the coefficients profiled out. Relative SDs
/// `θ = sd/σ` are optimised directly with `|θ|`, so a component can sit at
/// exactly zero.
pub fn lmm_ml_fit(data: &Dataset, x: &DMatrix<f64>, model: &FreqModel, df_method: DfMethod) -> Result<FreqFit> {
    if x.nrows() != data.len() {
        return invalid("design rows do not match the data");
    }
    if model.fixed_columns.is_empty() || model.fixed_columns.iter().any(|&c| c >= x.ncols()) {
        return invalid("fixed columns empty or out of range");
    }
    for (i, a) in model.random.iter().enumerate() {
        if a.columns.is_empty() || a.columns.iter().any(|&c| c >= x.ncols()) {
            return invalid("random columns empty or out of range");
        }
        if model.random[..i].iter().any(|b| b.grouping == a.grouping) {
            return invalid("grouping listed twice");
        }
    }
    let y = data.latent();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite response".into()));
    }
    let blocks = group_blocks(data, x, &model.random)?;
    let xf = DMatrix::from_fn(x.nrows(), model.fixed_columns.len(), |i, j| x[(i, model.fixed_columns[j])]);
    let refs: Vec<&GroupBlock> = blocks.iter().collect();
    let sys = MixedSystem::new(&xf, &refs, &y)?;
    let prob = Profiled {
        wty: sys.wty(),
        ks: model.random.iter().map(|r| r.columns.len()).collect(),
        n: y.len() as f64,
        sys,
    };
    let d: usize = prob.ks.iter().sum();

    let max_iter = 400 * d + 200;
    let mut best = nelder_mead(|t| prob.deviance(t), &vec![1.0; d], 0.5, 1e-10, max_iter);
    if d > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0F17_5EED);
        for _ in 0..4 {
            let start: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
            let m = nelder_mead(|t| prob.deviance(t), &start, 0.5, 1e-10, max_iter);
            if m.value < best.value - 1e-9 || (!best.converged && m.converged && m.value <= best.value + 1e-9) {
                best = m;
            }
        }
    }
    if !best.value.is_finite() {
        return Err(Error::Numerical("ML deviance is not finite anywhere".into()));
    }
    let sol = prob.solve(&best.x, true)?;
    let sigma2 = sol.r2 / prob.n;
    let dfs = degrees_of_freedom(data, x, model, &blocks, df_method);
    let mut se = Vec::new();
    let mut t = Vec::new();
    let mut p = Vec::new();
    for (j, &b) in sol.coef.iter().enumerate() {
        let s = (sigma2 * sol.fixed_inverse[(j, j)]).sqrt();
        let tj = b / s;
        let pj = match StudentsT::new(0.0, 1.0, dfs[j]) {
            Ok(dist) => (2.0 * dist.cdf(-tj.abs())).clamp(0.0, 1.0),
            Err(_) => f64::NAN,
        };
        se.push(s);
        t.push(tj);
        p.push(pj);
    }
    let sigma = sigma2.sqrt();
    let mut vc_hat = Vec::new();
    let mut at = 0;
    for r in &model.random {
        for &c in &r.columns {
            vc_hat.push(VarianceComponent {
                grouping: r.grouping,
                column: c,
                sd: best.x[at].abs() * sigma,
            });
            at += 1;
        }
    }
    Ok(FreqFit {
        columns: model.fixed_columns.clone(),
        beta_hat: sol.coef,
        se,
        t,
        df: dfs,
        p,
        vc_hat,
        sigma_hat: sigma,
        loglik: -0.5 * sol.deviance,
        converged: best.converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FTest {
    pub f: f64,
    pub df_num: f64,
    pub df_den: f64,
    pub p: f64,
}

fn f_p_value(f: f64, df_num: f64, df_den: f64) -> f64 {
    match FisherSnedecor::new(df_num, df_den) {
        Ok(d) if f.is_finite() => (1.0 - d.cdf(f.max(0.0))).clamp(0.0, 1.0),
        _ => f64::NAN,
    }
}

/// Within-group F test of one factor on data aggregated by subject (F1) or by
/// item (F2). Other factors are averaged out first.
pub fn rm_anova_f(data: &Dataset, factor: usize) -> Result<FTest> {
    let t = &data.trials;
    if factor >= t.factors.len() {
        return invalid("factor index out of range");
    }
    let (ids, n_groups) = match data.aggregation {
        Aggregation::BySubject => (&t.subj, t.n_subj),
        Aggregation::ByItem => (&t.item, t.n_item),
        Aggregation::None => return invalid("repeated-measures F needs aggregated data"),
    };
    let alpha = t.factors[factor].n_levels();
    let y = data.latent();
    let mut sums = vec![0.0; n_groups * alpha];
    let mut counts = vec![0usize; n_groups * alpha];
    for (i, id) in ids.iter().enumerate() {
        let g = id.ok_or_else(|| Error::InvalidArgument("row without a grouping level".into()))?;
        let k = g * alpha + t.level(i, factor);
        sums[k] += y[i];
        counts[k] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return invalid(format!("group {} has no observations at level {}", k / alpha, k % alpha));
    }
    let m: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let grand = m.iter().sum::<f64>() / m.len() as f64;
    let level_mean: Vec<f64> = (0..alpha)
        .map(|j| (0..n_groups).map(|g| m[g * alpha + j]).sum::<f64>() / n_groups as f64)
        .collect();
    let group_mean: Vec<f64> = (0..n_groups)
        .map(|g| m[g * alpha..(g + 1) * alpha].iter().sum::<f64>() / alpha as f64)
        .collect();
    let ss_effect = n_groups as f64 * level_mean.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let mut ss_error = 0.0;
    for g in 0..n_groups {
        for j in 0..alpha {
            ss_error += (m[g * alpha + j] - group_mean[g] - level_mean[j] + grand).powi(2);
        }
    }
    let df_num = (alpha - 1) as f64;
    let df_den = ((alpha - 1) * (n_groups.saturating_sub(1))) as f64;
    if df_den == 0.0 {
        return invalid("need at least two groups");
    }
    let ss_total: f64 = m.iter().map(|v| (v - grand).powi(2)).sum();
    let f = if ss_effect <= 1e-14 * ss_total {
        0.0
    } else {
        (ss_effect / df_num) / (ss_error / df_den)
    };
    Ok(FTest {
        f,
        df_num,
        df_den,
        p: f_p_value(f, df_num, df_den),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinF {
    pub f: f64,
    /// `None` when `F1 + F2 = 0`.
    pub df_den: Option<f64>,
}

/// `minF′ = F1·F2/(F1+F2)` with `df = (F1+F2)²/(F1²/df2 + F2²/df1)`.
pub fn min_f(f1: f64, df1: f64, f2: f64, df2: f64) -> Result<MinF> {
    if f1 < 0.0 || f2 < 0.0 || f1.is_nan() || f2.is_nan() {
        return invalid("F statistics must be non-negative");
    }
    if f1 + f2 == 0.0 {
        return Ok(MinF { f: 0.0, df_den: None });
    }
    if f2.is_infinite() {
        return Ok(MinF { f: f1, df_den: Some(df1) });
    }
    if f1.is_infinite() {
        return Ok(MinF { f: f2, df_den: Some(df2) });
    }
    Ok(MinF {
        f: f1 * f2 / (f1 + f2),
        df_den: Some((f1 + f2).powi(2) / (f1 * f1 / df2 + f2 * f2 / df1)),
    })
}

/// Combines by-subject and by-item tests of the same effect.
pub fn min_f_test(f1: &FTest, f2: &FTest) -> Result<FTest> {
    let m = min_f(f1.f, f1.df_den, f2.f, f2.df_den)?;
    let df_den = m.df_den.unwrap_or(f64::NAN);
    Ok(FTest {
        f: m.f,
        df_num: f1.df_num,
        df_den,
        p: if m.df_den.is_some() { f_p_value(m.f, f1.df_num, df_den) } else { 1.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub sd_true: f64,
    pub n_reject: usize,
    pub n_sims: usize,
    pub n_failed: usize,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl RatePoint {
    pub fn rate(&self) -> f64 {
        if self.n_sims == 0 {
            0.0
        } else {
            self.n_reject as f64 / self.n_sims as f64
        }
    }
}

/// Rejection proportions of one coefficient test under one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRateCurve {
    pub analysis: String,
    pub effect: String,
    pub points: Vec<RatePoint>,
}

pub fn write_curves_csv<W: Write>(curves: &[ErrorRateCurve], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["analysis", "effect", "sd_true", "n_reject", "n_sims", "rate", "ci_lo", "ci_hi", "n_failed"])?;
    for c in curves {
        for p in &c.points {
            out.write_record([
                c.analysis.clone(),
                c.effect.clone(),
                format!("{}", p.sd_true),
                p.n_reject.to_string(),
                p.n_sims.to_string(),
                format!("{:.6}", p.rate()),
                format!("{:.6}", p.ci_lo),
                format!("{:.6}", p.ci_hi),
                p.n_failed.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreqAnalysis {
    pub id: String,
    pub aggregation: Aggregation,
    pub model: FreqModel,
}

/// Replaces one true random SD by each value of `grid` in turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdSweep {
    pub grouping: Grouping,
    /// Position within that grouping's SD vector.
    pub position: usize,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreqScenario {
    pub design: DesignSpec,
    pub contrasts: Vec<(String, ContrastScheme)>,
    #[serde(default)]
    pub family: Family,
    pub beta: Vec<f64>,
    #[serde(default)]
    pub subj_columns: Vec<usize>,
    #[serde(default)]
    pub sd_subj: Vec<f64>,
    #[serde(default)]
    pub item_columns: Vec<usize>,
    #[serde(default)]
    pub sd_item: Vec<f64>,
    pub sigma: f64,
    /// Full-design columns whose t tests are counted.
    pub tested: Vec<usize>,
    pub analyses: Vec<FreqAnalysis>,
    #[serde(default)]
    pub sweep: Option<SdSweep>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub df_method: DfMethod,
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Tested coefficients are set to zero.
    Alpha,
    /// Tested coefficients keep their scenario values.
    Power,
}

impl FreqScenario {
    /// Three-level within-subject factor, no items, uncorrelated subject
    /// intercepts and slopes with very unequal slope SDs.
    pub fn sphericity() -> Self {
        let scheme = ContrastScheme::new(ContrastKind::TreatmentGrandMean).with_labels(&["c2vs1", "c3vs1"]);
        Self {
            design: DesignSpec {
                factors: vec![FactorSpec::numbered("F", 3)],
                n_subj: 20,
                n_item: 0,
                n_rep: 10,
                assignment: Assignment::FullCrossing,
            },
            contrasts: vec![("F".into(), scheme)],
            family: Family::Normal,
            beta: vec![200.0, 20.0, 20.0],
            subj_columns: vec![0, 1, 2],
            sd_subj: vec![20.0, 90.0, 10.0],
            item_columns: vec![],
            sd_item: vec![],
            sigma: 50.0,
            tested: vec![1, 2],
            analyses: vec![
                FreqAnalysis {
                    id: "aggregated".into(),
                    aggregation: Aggregation::BySubject,
                    model: FreqModel {
                        fixed_columns: vec![0, 1, 2],
                        random: vec![RandomTerms { grouping: Grouping::Subject, columns: vec![0] }],
                    },
                },
                FreqAnalysis {
                    id: "non_aggregated".into(),
                    aggregation: Aggregation::None,
                    model: FreqModel {
                        fixed_columns: vec![0, 1, 2],
                        random: vec![RandomTerms { grouping: Grouping::Subject, columns: vec![0, 1, 2] }],
                    },
                },
            ],
            sweep: None,
            alpha: 0.05,
            df_method: DfMethod::GroupsMinusOne,
        }
    }

    /// Two-level latin-square reading design with crossed subjects and items,
    /// lognormal responses, and a sweep over the item slope SD.
    pub fn item_variance() -> Self {
        Self {
            design: DesignSpec {
                factors: vec![FactorSpec::numbered("X", 2)],
                n_subj: 42,
                n_item: 16,
                n_rep: 1,
                assignment: Assignment::LatinSquare,
            },
            contrasts: vec![("X".into(), ContrastScheme::new(ContrastKind::Sum))],
            family: Family::Lognormal,
            beta: vec![6.0, -0.10],
            subj_columns: vec![0, 1],
            sd_subj: vec![0.24, 0.11],
            item_columns: vec![0, 1],
            sd_item: vec![0.18, 0.25],
            sigma: 0.51,
            tested: vec![1],
            analyses: vec![
                FreqAnalysis {
                    id: "aggregated".into(),
                    aggregation: Aggregation::BySubject,
                    model: FreqModel {
                        fixed_columns: vec![0, 1],
                        random: vec![RandomTerms { grouping: Grouping::Subject, columns: vec![0] }],
                    },
                },
                FreqAnalysis {
                    id: "non_aggregated".into(),
                    aggregation: Aggregation::None,
                    model: FreqModel {
                        fixed_columns: vec![0, 1],
                        random: vec![
                            RandomTerms { grouping: Grouping::Subject, columns: vec![0, 1] },
                            RandomTerms { grouping: Grouping::Item, columns: vec![0, 1] },
                        ],
                    },
                },
            ],
            sweep: Some(SdSweep {
                grouping: Grouping::Item,
                position: 1,
                grid: (0..=10).map(|i| i as f64 * 0.05).collect(),
            }),
            alpha: 0.05,
            df_method: DfMethod::GroupsMinusOne,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.design.validate()?;
        if self.subj_columns.len() != self.sd_subj.len() || self.item_columns.len() != self.sd_item.len() {
            return invalid("random columns and SD vectors differ in length");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid("alpha must lie in (0, 1)");
        }
        if self.analyses.is_empty() {
            return invalid("no analyses configured");
        }
        for a in &self.analyses {
            for &c in &self.tested {
                if !a.model.fixed_columns.contains(&c) {
                    return invalid(format!("analysis {} does not estimate tested column {c}", a.id));
                }
            }
        }
        if let Some(s) = &self.sweep {
            let len = match s.grouping {
                Grouping::Subject => self.sd_subj.len(),
                Grouping::Item => self.sd_item.len(),
            };
            if s.position >= len {
                return invalid("sweep position out of range");
            }
        }
        Ok(())
    }

    fn grid(&self) -> Vec<Option<f64>> {
        match &self.sweep {
            Some(s) => s.grid.iter().map(|&v| Some(v)).collect(),
            None => vec![None],
        }
    }
}

impl FreqScenario {
    fn params(&self, beta: Vec<f64>) -> LmmParams {
        LmmParams {
            beta,
            sd_subj: self.sd_subj.clone(),
            sd_item: self.sd_item.clone(),
            rho_subj: DMatrix::identity(self.sd_subj.len(), self.sd_subj.len()),
            rho_item: DMatrix::identity(self.sd_item.len(), self.sd_item.len()),
            sigma: self.sigma,
            family: self.family,
        }
    }

    /// One dataset from the scenario's generating values (the first sweep
    /// value, if any).
    pub fn simulate_one(&self, mode: ErrorMode, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let trials = build_trial_table(&self.design)?;
        let request = RandomRequest {
            subj: self.subj_columns.clone(),
            item: self.item_columns.clone(),
        };
        let bundle = expand_design(&trials, &self.contrasts, &request)?;
        let mut beta = self.beta.clone();
        if mode == ErrorMode::Alpha {
            for &c in &self.tested {
                beta[c] = 0.0;
            }
        }
        let mut params = self.params(beta);
        if let Some(v) = self.grid().first().copied().flatten() {
            let sw = self.sweep.as_ref().unwrap();
            match sw.grouping {
                Grouping::Subject => params.sd_subj[sw.position] = v,
                Grouping::Item => params.sd_item[sw.position] = v,
            }
        }
        simulate(&trials, &bundle, &params, false, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

fn zero_data(trials: &crate::design::TrialTable, family: Family) -> Dataset {
    Dataset {
        trials: trials.clone(),
        y: vec![1.0; trials.len()],
        family,
        aggregation: Aggregation::None,
    }
}

/// Rejection rates at level `alpha` for every (analysis, tested column), with
/// each simulated dataset shared by all analyses. Simulation `s` at grid point
/// `g` draws from a generator seeded by `(seed, g, s)`.
pub fn alpha_power_sim(sc: &FreqScenario, mode: ErrorMode, n_sims: usize, seed: u64) -> Result<Vec<ErrorRateCurve>> {
    sc.validate()?;
    let trials = build_trial_table(&sc.design)?;
    let request = RandomRequest {
        subj: sc.subj_columns.clone(),
        item: sc.item_columns.clone(),
    };
    let bundle = expand_design(&trials, &sc.contrasts, &request)?;
    if sc.beta.len() != bundle.p() {
        return invalid(format!("{} coefficients for {} design columns", sc.beta.len(), bundle.p()));
    }
    let mut views = Vec::new();
    for a in &sc.analyses {
        let view = aggregate(&zero_data(&trials, sc.family), a.aggregation)?;
        let x = expand_design(&view.trials, &sc.contrasts, &RandomRequest::default())?.x;
        views.push(x);
    }
    let mut beta = sc.beta.clone();
    if mode == ErrorMode::Alpha {
        for &c in &sc.tested {
            beta[c] = 0.0;
        }
    }
    let grid = sc.grid();
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..n_sims).map(move |s| (g, s))).collect();
    let outcomes: Vec<Vec<Option<Vec<bool>>>> = jobs
        .par_iter()
        .map(|&(g, s)| {
            let mut params = sc.params(beta.clone());
            if let (Some(sw), Some(v)) = (&sc.sweep, grid[g]) {
                match sw.grouping {
                    Grouping::Subject => params.sd_subj[sw.position] = v,
                    Grouping::Item => params.sd_item[sw.position] = v,
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[g as u64, s as u64]));
            let Ok(data) = simulate(&trials, &bundle, &params, false, &mut rng) else {
                return vec![None; sc.analyses.len()];
            };
            sc.analyses
                .iter()
                .zip(&views)
                .map(|(a, x)| {
                    let view = aggregate(&data, a.aggregation).ok()?;
                    let fit = lmm_ml_fit(&view, x, &a.model, sc.df_method).ok()?;
                    Some(
                        sc.tested
                            .iter()
                            .map(|&c| fit.p[fit.position(c).unwrap()] < sc.alpha)
                            .collect(),
                    )
                })
                .collect()
        })
        .collect();

    let mut curves = Vec::new();
    for (ai, a) in sc.analyses.iter().enumerate() {
        for (ti, &c) in sc.tested.iter().enumerate() {
            let mut points = Vec::new();
            for (g, gv) in grid.iter().enumerate().filter(|_| n_sims > 0) {
                let sd_true = gv.unwrap_or_else(|| {
                    sc.subj_columns
                        .iter()
                        .position(|&sc_col| sc_col == c)
                        .map(|i| sc.sd_subj[i])
                        .unwrap_or(0.0)
                });
                let slice = &outcomes[g * n_sims..(g + 1) * n_sims];
                let n_reject = slice.iter().filter(|o| o[ai].as_ref().is_some_and(|r| r[ti])).count();
                let n_failed = slice.iter().filter(|o| o[ai].is_none()).count();
                let (ci_lo, ci_hi) = binomial_ci(n_reject, n_sims, 0.95);
                points.push(RatePoint {
                    sd_true,
                    n_reject,
                    n_sims,
                    n_failed,
                    ci_lo,
                    ci_hi,
                });
            }
            curves.push(ErrorRateCurve {
                analysis: a.id.clone(),
                effect: bundle.column_names[c].clone(),
                points,
            });
        }
    }
    Ok(curves)
}

/// Simulates spherical aggregated data: group intercepts plus iid noise.
pub fn spherical_aggregated<R: Rng + ?Sized>(n_groups: usize, alpha: usize, rng: &mut R) -> Dataset {
    use rand_distr::StandardNormal;
    let factors = vec![FactorSpec::numbered("a", alpha)];
    let mut trials = crate::design::TrialTable {
        factors,
        subj: Vec::new(),
        item: Vec::new(),
        cell: Vec::new(),
        rep: Vec::new(),
        n_subj: n_groups,
        n_item: 0,
    };
    let mut y = Vec::new();
    for g in 0..n_groups {
        let u: f64 = rng.sample::<f64, _>(StandardNormal);
        for c in 0..alpha {
            trials.subj.push(Some(g));
            trials.item.push(None);
            trials.cell.push(c);
            trials.rep.push(0);
            y.push(u + rng.sample::<f64, _>(StandardNormal));
        }
    }
    Dataset {
        trials,
        y,
        family: Family::Normal,
        aggregation: Aggregation::BySubject,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ols;
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    fn small_nested(n_subj: usize, n_per: usize, seed: u64) -> (Dataset, DMatrix<f64>) {
        let spec = DesignSpec {
            factors: vec![FactorSpec::numbered("a", 2)],
            n_subj,
            n_item: 0,
            n_rep: n_per,
            assignment: Assignment::FullCrossing,
        };
        let trials = build_trial_table(&spec).unwrap();
        let schemes = vec![("a".to_string(), ContrastScheme::new(ContrastKind::Sum))];
        let bundle = expand_design(&trials, &schemes, &RandomRequest { subj: vec![0, 1], item: vec![] }).unwrap();
        let params = LmmParams {
            beta: vec![1.0, 0.3],
            sd_subj: vec![0.8, 0.4],
            sd_item: vec![],
            rho_subj: DMatrix::identity(2, 2),
            rho_item: DMatrix::identity(0, 0),
            sigma: 0.5,
            family: Family::Normal,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = simulate(&trials, &bundle, &params, false, &mut rng).unwrap();
        (data, bundle.x)
    }

    #[test]
    fn gls_with_identity_is_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(30, 3, |i, j| if j == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) + i as f64 * 0.01 });
        let y: Vec<f64> = (0..30).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let (b, _) = gls(&x, &y, &DMatrix::identity(30, 30)).unwrap();
        let o = ols(&x, &y).unwrap();
        for (a, c) in b.iter().zip(&o) {
            assert_relative_eq!(a, c, epsilon = 1e-12);
        }
    }

    #[test]
    fn no_random_effects_gives_ols_and_ml_sigma() {
        let (data, x) = small_nested(6, 3, 2);
        let fit = lmm_ml_fit(&data, &x, &FreqModel { fixed_columns: vec![0, 1], random: vec![] }, DfMethod::GroupsMinusOne).unwrap();
        let o = ols(&x, &data.y).unwrap();
        for (a, c) in fit.beta_hat.iter().zip(&o) {
            assert_relative_eq!(a, c, epsilon = 1e-10);
        }
        let rss: f64 = (0..data.len())
            .map(|i| (data.y[i] - x[(i, 0)] * o[0] - x[(i, 1)] * o[1]).powi(2))
            .sum();
        assert_relative_eq!(fit.sigma_hat, (rss / data.len() as f64).sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn profiled_fit_matches_dense_gls() {
        let (data, x) = small_nested(8, 4, 3);
        let model = FreqModel {
            fixed_columns: vec![0, 1],
            random: vec![RandomTerms { grouping: Grouping::Subject, columns: vec![0, 1] }],
        };
        let fit = lmm_ml_fit(&data, &x, &model, DfMethod::GroupsMinusOne).unwrap();
        let n = data.len();
        let mut v = DMatrix::identity(n, n) * fit.sigma_hat.powi(2);
        for i in 0..n {
            for j in 0..n {
                if data.trials.subj[i] == data.trials.subj[j] {
                    for vc in &fit.vc_hat {
                        v[(i, j)] += vc.sd.powi(2) * x[(i, vc.column)] * x[(j, vc.column)];
                    }
                }
            }
        }
        let (b, cov) = gls(&x, &data.y, &v).unwrap();
        for j in 0..2 {
            assert_relative_eq!(fit.beta_hat[j], b[j], epsilon = 1e-8);
            assert_relative_eq!(fit.se[j], cov[(j, j)].sqrt(), epsilon = 1e-8);
        }
        let chol = v.clone().cholesky().unwrap();
        let r = DVector::from_column_slice(&data.y) - &x * DVector::from_column_slice(&b);
        let quad = r.dot(&chol.solve(&r));
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ll = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        assert_relative_eq!(fit.loglik, ll, epsilon = 1e-8);
        assert!(fit.se.iter().all(|&s| s > 0.0));
        assert!(fit.p.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn optimum_beats_random_search() {
        let (data, x) = small_nested(4, 1, 4);
        let model = FreqModel {
            fixed_columns: vec![0, 1],
            random: vec![RandomTerms { grouping: Grouping::Subject, columns: vec![0] }],
        };
        let fit = lmm_ml_fit(&data, &x, &model, DfMethod::GroupsMinusOne).unwrap();
        let n = data.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let sd_u: f64 = rng.random_range(0.0..3.0);
            let sigma: f64 = rng.random_range(0.01..3.0);
            let mut v = DMatrix::identity(n, n) * sigma * sigma;
            for i in 0..n {
                for j in 0..n {
                    if data.trials.subj[i] == data.trials.subj[j] {
                        v[(i, j)] += sd_u * sd_u;
                    }
                }
            }
            let (b, _) = gls(&x, &data.y, &v).unwrap();
            let chol = v.clone().cholesky().unwrap();
            let r = DVector::from_column_slice(&data.y) - &x * DVector::from_column_slice(&b);
            let ll = -0.5
                * (n as f64 * (2.0 * std::f64::consts::PI).ln()
                    + 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
                    + r.dot(&chol.solve(&r)));
            assert!(fit.loglik >= ll - 1e-9, "{} < {ll}", fit.loglik);
        }
    }

    #[test]
    fn boundary_estimate_is_exactly_zero_capable() {
        let spec = DesignSpec {
            factors: vec![FactorSpec::numbered("a", 2)],
            n_subj: 10,
            n_item: 0,
            n_rep: 3,
            assignment: Assignment::FullCrossing,
        };
        let trials = build_trial_table(&spec).unwrap();
        let schemes = vec![("a".to_string(), ContrastScheme::new(ContrastKind::Sum))];
        let bundle = expand_design(&trials, &schemes, &RandomRequest::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Subject means forced identical: the ML subject SD is on the boundary.
        let mut y: Vec<f64> = (0..trials.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for s in 0..10 {
            let rows: Vec<usize> = (0..trials.len()).filter(|&i| trials.subj[i] == Some(s)).collect();
            let m = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
            rows.iter().for_each(|&i| y[i] -= m);
        }
        let data = Dataset { trials, y, family: Family::Normal, aggregation: Aggregation::None };
        let model = FreqModel {
            fixed_columns: vec![0, 1],
            random: vec![RandomTerms { grouping: Grouping::Subject, columns: vec![0] }],
        };
        let fit = lmm_ml_fit(&data, &bundle.x, &model, DfMethod::GroupsMinusOne).unwrap();
        assert!(fit.vc_hat[0].sd < 1e-3, "{}", fit.vc_hat[0].sd);
    }

    #[test]
    fn containment_df_for_aggregated_intercepts() {
        let sc = FreqScenario::sphericity();
        let trials = build_trial_table(&sc.design).unwrap();
        let agg = aggregate(&zero_data(&trials, Family::Normal), Aggregation::BySubject).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = Dataset { y: (0..agg.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(), ..agg };
        let x = expand_design(&data.trials, &sc.contrasts, &RandomRequest::default()).unwrap().x;
        let fit = lmm_ml_fit(&data, &x, &sc.analyses[0].model, DfMethod::Containment).unwrap();
        assert_eq!(fit.df[1], 38.0);
        let fit = lmm_ml_fit(&data, &x, &sc.analyses[0].model, DfMethod::GroupsMinusOne).unwrap();
        assert_eq!(fit.df[1], 19.0);
    }

    fn paired(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = spherical_aggregated(n, 2, &mut rng);
        for (i, v) in d.y.iter_mut().enumerate() {
            if d.trials.cell[i] == 1 {
                *v += 0.3;
            }
        }
        d
    }

    #[test]
    fn two_level_f_is_squared_paired_t() {
        let d = paired(15, 8);
        let diffs: Vec<f64> = (0..15).map(|g| d.y[2 * g + 1] - d.y[2 * g]).collect();
        let t = crate::stats::mean(&diffs) / (crate::stats::sd(&diffs) / 15f64.sqrt());
        let f = rm_anova_f(&d, 0).unwrap();
        assert_relative_eq!(f.f, t * t, max_relative = 1e-8);
        assert_eq!((f.df_num, f.df_den), (1.0, 14.0));
    }

    #[test]
    fn equal_means_give_zero_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut d = spherical_aggregated(6, 3, &mut rng);
        for g in 0..6 {
            let v = d.y[3 * g];
            d.y[3 * g + 1] = v;
            d.y[3 * g + 2] = v;
        }
        assert_eq!(rm_anova_f(&d, 0).unwrap().f, 0.0);
    }

    #[test]
    fn missing_cell_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut d = spherical_aggregated(4, 3, &mut rng);
        d.trials.cell[5] = 0;
        assert!(rm_anova_f(&d, 0).is_err());
        let raw = Dataset { aggregation: Aggregation::None, ..d };
        assert!(rm_anova_f(&raw, 0).is_err());
    }

    #[test]
    fn spherical_null_rejection_rate() {
        let reps = 10_000;
        let rejected: usize = (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(11, &[r as u64]));
                let d = spherical_aggregated(12, 3, &mut rng);
                usize::from(rm_anova_f(&d, 0).unwrap().p < 0.05)
            })
            .sum();
        let rate = rejected as f64 / reps as f64;
        assert!((0.045..=0.055).contains(&rate), "{rate}");
    }

    #[test]
    fn min_f_formula() {
        let m = min_f(8.0, 19.0, 8.0, 19.0).unwrap();
        assert_relative_eq!(m.f, 4.0);
        assert_relative_eq!(m.df_den.unwrap(), 38.0, epsilon = 1e-12);
        let a = min_f(3.0, 12.0, 7.0, 30.0).unwrap();
        let b = min_f(7.0, 30.0, 3.0, 12.0).unwrap();
        assert_relative_eq!(a.f, b.f);
        assert_relative_eq!(a.df_den.unwrap(), b.df_den.unwrap());
        assert_relative_eq!(a.f, 2.1);
        assert_relative_eq!(a.df_den.unwrap(), 100.0 / (9.0 / 30.0 + 49.0 / 12.0));
        let lim = min_f(5.0, 10.0, 1e12, 10.0).unwrap();
        assert_relative_eq!(lim.f, 5.0, max_relative = 1e-10);
        assert_eq!(min_f(5.0, 10.0, f64::INFINITY, 3.0).unwrap().f, 5.0);
        assert_eq!(min_f(0.0, 4.0, 0.0, 4.0).unwrap().df_den, None);
        assert!(min_f(-1.0, 4.0, 1.0, 4.0).is_err());
    }

    #[test]
    fn sphericity_exemplary_standard_errors() {
        let sc = FreqScenario::sphericity();
        let trials = build_trial_table(&sc.design).unwrap();
        let bundle = expand_design(&trials, &sc.contrasts, &RandomRequest { subj: vec![0, 1, 2], item: vec![] }).unwrap();
        let params = LmmParams {
            beta: sc.beta.clone(),
            sd_subj: sc.sd_subj.clone(),
            sd_item: vec![],
            rho_subj: DMatrix::identity(3, 3),
            rho_item: DMatrix::identity(0, 0),
            sigma: sc.sigma,
            family: Family::Normal,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = simulate(&trials, &bundle, &params, true, &mut rng).unwrap();
        let fit = lmm_ml_fit(&data, &bundle.x, &sc.analyses[1].model, DfMethod::GroupsMinusOne).unwrap();
        assert!(fit.se[1] > 2.5 * fit.se[2], "{:?}", fit.se);
        let agg = aggregate(&data, Aggregation::BySubject).unwrap();
        let xa = expand_design(&agg.trials, &sc.contrasts, &RandomRequest::default()).unwrap().x;
        let fa = lmm_ml_fit(&agg, &xa, &sc.analyses[0].model, DfMethod::GroupsMinusOne).unwrap();
        assert_relative_eq!(fa.se[1], fa.se[2], max_relative = 1e-8);
    }

    #[test]
    fn zero_sims_give_empty_counts() {
        let curves = alpha_power_sim(&FreqScenario::sphericity(), ErrorMode::Alpha, 0, 1).unwrap();
        assert_eq!(curves.len(), 4);
        assert!(curves.iter().all(|c| c.points.is_empty()));
    }
}
