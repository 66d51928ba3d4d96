//! Default JZS Bayes factors for ANOVA-style designs, one-sample t-tests and
//! simple regression.
//!
//! The grand mean has a flat prior and the residual variance a Jeffreys
//! prior; effects are `N(0, σ²g)` with one `g ~ Scaled-Inv-χ²(1, s²)` per term.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bridge::{comparison_from_log_bf, ModelComparison};
use crate::collapsed::Grouping;
use crate::design::{helmert_basis, TrialTable};
use crate::error::{invalid, Error, Result};
use crate::linalg::Cholesky;
use crate::numeric::{hessian, log_integrate_real_line, log_sum_exp, nelder_mead};
use crate::priors::{sample_scaled_inv_chisq, scaled_inv_chisq_log_pdf};
use crate::simulate::{Aggregation, Dataset, Family};

/// Orthonormal sum-to-zero coding: the unit-eigenvalue eigenvectors of `I − J/α`.
pub fn qmatrix(alpha: usize) -> Result<DMatrix<f64>> {
    if alpha < 2 {
        return invalid("a factor needs at least two levels");
    }
    Ok(helmert_basis(alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JzsTermKind {
    /// Fixed effect of the interaction of `factors` (a main effect if one).
    Fixed { factors: Vec<usize> },
    /// Per-level effects of a grouping, crossed with `factors` (empty for
    /// random intercepts).
    Random { grouping: Grouping, factors: Vec<usize> },
}

/// In JSON a term is flat: `{"label", "kind", "factors", "grouping", "scale"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TermRepr", into = "TermRepr")]
pub struct JzsTerm {
    pub label: String,
    pub kind: JzsTermKind,
    pub scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TermTag {
    Fixed,
    Random,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermRepr {
    label: String,
    kind: TermTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grouping: Option<Grouping>,
    #[serde(default)]
    factors: Vec<usize>,
    scale: f64,
}

impl TryFrom<TermRepr> for JzsTerm {
    type Error = String;

    fn try_from(r: TermRepr) -> std::result::Result<Self, String> {
        let kind = match (r.kind, r.grouping) {
            (TermTag::Fixed, None) => JzsTermKind::Fixed { factors: r.factors },
            (TermTag::Fixed, Some(_)) => return Err(format!("fixed term {} takes no grouping", r.label)),
            (TermTag::Random, Some(grouping)) => JzsTermKind::Random { grouping, factors: r.factors },
            (TermTag::Random, None) => return Err(format!("random term {} needs a grouping", r.label)),
        };
        Ok(Self {
            label: r.label,
            kind,
            scale: r.scale,
        })
    }
}

impl From<JzsTerm> for TermRepr {
    fn from(t: JzsTerm) -> Self {
        let (kind, grouping, factors) = match t.kind {
            JzsTermKind::Fixed { factors } => (TermTag::Fixed, None, factors),
            JzsTermKind::Random { grouping, factors } => (TermTag::Random, Some(grouping), factors),
        };
        Self {
            label: t.label,
            kind,
            grouping,
            factors,
            scale: t.scale,
        }
    }
}

impl JzsTerm {
    pub fn fixed(label: &str, factors: &[usize], scale: f64) -> Self {
        Self {
            label: label.into(),
            kind: JzsTermKind::Fixed { factors: factors.to_vec() },
            scale,
        }
    }

    pub fn random(label: &str, grouping: Grouping, factors: &[usize], scale: f64) -> Self {
        Self {
            label: label.into(),
            kind: JzsTermKind::Random {
                grouping,
                factors: factors.to_vec(),
            },
            scale,
        }
    }

    fn factors(&self) -> &[usize] {
        match &self.kind {
            JzsTermKind::Fixed { factors } | JzsTermKind::Random { factors, .. } => factors,
        }
    }
}

/// Row-wise Kronecker product of the Q-coded factors in `factors`.
fn coded_row(trials: &TrialTable, qs: &[DMatrix<f64>], factors: &[usize], row: usize) -> Vec<f64> {
    let mut v = vec![1.0];
    for &f in factors {
        let q = &qs[f];
        let lvl = trials.level(row, f);
        let mut next = Vec::with_capacity(v.len() * q.ncols());
        for a in &v {
            for j in 0..q.ncols() {
                next.push(a * q[(lvl, j)]);
            }
        }
        v = next;
    }
    v
}

/// Design block of a term (not centred) and the number of coded columns per
/// grouping level.
pub fn term_block(trials: &TrialTable, term: &JzsTerm) -> Result<(DMatrix<f64>, usize)> {
    let qs: Vec<DMatrix<f64>> = trials.factors.iter().map(|f| qmatrix(f.n_levels())).collect::<Result<_>>()?;
    if term.factors().iter().any(|&f| f >= trials.factors.len()) {
        return invalid(format!("term {} names an unknown factor", term.label));
    }
    let n = trials.len();
    let c: usize = term.factors().iter().map(|&f| qs[f].ncols()).product();
    match &term.kind {
        JzsTermKind::Fixed { factors } => {
            if factors.is_empty() {
                return invalid("a fixed term needs at least one factor");
            }
            let mut x = DMatrix::zeros(n, c);
            for i in 0..n {
                for (j, v) in coded_row(trials, &qs, factors, i).into_iter().enumerate() {
                    x[(i, j)] = v;
                }
            }
            Ok((x, c))
        }
        JzsTermKind::Random { grouping, factors } => {
            let (ids, levels) = match grouping {
                Grouping::Subject => (&trials.subj, trials.n_subj),
                Grouping::Item => (&trials.item, trials.n_item),
            };
            let mut x = DMatrix::zeros(n, levels * c);
            for i in 0..n {
                let Some(g) = ids[i] else {
                    return invalid(format!("term {} needs grouping ids the data lacks", term.label));
                };
                for (j, v) in coded_row(trials, &qs, factors, i).into_iter().enumerate() {
                    x[(i, g * c + j)] = v;
                }
            }
            Ok((x, c))
        }
    }
}

/// Orthogonal ANOVA strata of a balanced subject × cell × replicate layout.
#[derive(Debug, Clone)]
struct Strata {
    /// (factor subset bitmask, includes subject, dimension, sum of squares)
    cells: Vec<(u32, bool, f64, f64)>,
    resid_ss: f64,
    /// For every term: (stratum index, multiplier) pairs it loads on.
    cover: Vec<Vec<(usize, f64)>>,
}

impl Strata {
    fn build(data: &Dataset, y: &[f64], terms: &[JzsTerm]) -> Option<Self> {
        let t = &data.trials;
        let n = y.len();
        let nf = t.factors.len();
        if nf > 8 || n < 2 {
            return None;
        }
        let subj: Option<Vec<usize>> = t.subj.iter().copied().collect();
        let subj = subj?;
        let ns = t.n_subj;
        let cells = t.n_cells();
        let mut counts = vec![0usize; ns * cells];
        for i in 0..n {
            counts[subj[i] * cells + t.cell[i]] += 1;
        }
        let reps = counts[0];
        if reps == 0 || counts.iter().any(|&c| c != reps) {
            return None;
        }
        for term in terms {
            if let JzsTermKind::Random { grouping: Grouping::Item, .. } = term.kind {
                return None;
            }
        }
        let levels: Vec<usize> = t.factors.iter().map(|f| f.n_levels()).collect();
        // Means over a subset of (factors ∪ subject).
        let group_means = |mask: u32, with_s: bool| -> Vec<f64> {
            let key = |i: usize| {
                let mut k = if with_s { subj[i] } else { 0 };
                for (f, &nl) in levels.iter().enumerate() {
                    if mask & (1 << f) != 0 {
                        k = k * nl + t.level(i, f);
                    }
                }
                k
            };
            let size = (if with_s { ns } else { 1 })
                * (0..nf).filter(|f| mask & (1 << f) != 0).map(|f| levels[f]).product::<usize>();
            let mut sum = vec![0.0; size];
            let mut cnt = vec![0usize; size];
            for (i, &yi) in y.iter().enumerate() {
                let k = key(i);
                sum[k] += yi;
                cnt[k] += 1;
            }
            (0..n).map(|i| sum[key(i)] / cnt[key(i)] as f64).collect()
        };
        let mut out = Vec::new();
        let mut total_dim = 0.0;
        let mut total_ss = 0.0;
        for with_s in [false, true] {
            for mask in 0..(1u32 << nf) {
                if mask == 0 && !with_s {
                    continue;
                }
                // Inclusion–exclusion over sub-subsets.
                let mut proj = vec![0.0; n];
                let bits: Vec<u32> = (0..nf as u32).filter(|f| mask & (1 << f) != 0).collect();
                let s_options: &[bool] = if with_s { &[false, true] } else { &[false] };
                for sub in 0..(1u32 << bits.len()) {
                    let mut m = 0;
                    for (k, b) in bits.iter().enumerate() {
                        if sub & (1 << k) != 0 {
                            m |= 1 << b;
                        }
                    }
                    for &ws in s_options {
                        let removed = (bits.len() - sub.count_ones() as usize) + usize::from(with_s && !ws);
                        let sign = if removed.is_multiple_of(2) { 1.0 } else { -1.0 };
                        let gm = group_means(m, ws);
                        for i in 0..n {
                            proj[i] += sign * gm[i];
                        }
                    }
                }
                let ss: f64 = proj.iter().map(|v| v * v).sum();
                let mut dim: f64 = bits.iter().map(|&f| (levels[f as usize] - 1) as f64).product();
                if with_s {
                    dim *= (ns - 1) as f64;
                }
                if dim == 0.0 {
                    continue;
                }
                total_dim += dim;
                total_ss += ss;
                out.push((mask, with_s, dim, ss));
            }
        }
        let ybar = y.iter().sum::<f64>() / n as f64;
        let yc2: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
        let resid_dim = (n - 1) as f64 - total_dim;
        let resid_ss = (yc2 - total_ss).max(0.0);
        if resid_dim < 0.5 {
            // Saturated: the last stratum is the residual, which no term may cover.
            let last = out.pop()?;
            for term in terms {
                if let JzsTermKind::Random { factors, .. } = &term.kind {
                    if last.1 && mask_of(factors) == last.0 {
                        return None;
                    }
                }
            }
            return Self::finish(out, yc2 - total_ss + last.3, terms, n, ns, &levels);
        }
        Self::finish(out, resid_ss, terms, n, ns, &levels)
    }

    fn finish(cells: Vec<(u32, bool, f64, f64)>, resid_ss: f64, terms: &[JzsTerm], n: usize, ns: usize, levels: &[usize]) -> Option<Self> {
        let find = |mask: u32, s: bool| cells.iter().position(|c| c.0 == mask && c.1 == s);
        let mut cover = Vec::new();
        for term in terms {
            let mask = mask_of(term.factors());
            let prod: usize = term.factors().iter().map(|&f| levels[f]).product();
            let entries = match &term.kind {
                JzsTermKind::Fixed { .. } => vec![(find(mask, false)?, n as f64 / prod as f64)],
                JzsTermKind::Random { .. } => {
                    let m = n as f64 / (ns * prod) as f64;
                    if mask == 0 {
                        vec![(find(0, true)?, m)]
                    } else {
                        vec![(find(mask, false)?, m), (find(mask, true)?, m)]
                    }
                }
            };
            cover.push(entries);
        }
        Some(Self {
            cells,
            resid_ss: resid_ss.max(0.0),
            cover,
        })
    }

    fn quad_logdet(&self, g: &[f64]) -> (f64, f64) {
        let mut lambda = vec![1.0; self.cells.len()];
        for (entries, &gf) in self.cover.iter().zip(g) {
            for &(s, m) in entries {
                lambda[s] += gf * m;
            }
        }
        let mut quad = self.resid_ss;
        let mut logdet = 0.0;
        for (c, l) in self.cells.iter().zip(&lambda) {
            quad += c.3 / l;
            logdet += c.2 * l.ln();
        }
        (quad, logdet)
    }
}

fn mask_of(factors: &[usize]) -> u32 {
    factors.iter().fold(0, |m, &f| m | (1 << f))
}

/// Woodbury form of `I + Σ g_f X_f X_fᵀ` on centred data.
#[derive(Debug, Clone)]
struct Gram {
    xtx: Vec<f64>,
    xty: Vec<f64>,
    /// Column ranges per term.
    ranges: Vec<(usize, usize)>,
    q: usize,
}

impl Gram {
    fn build(blocks: &[DMatrix<f64>], yc: &[f64]) -> Self {
        let n = yc.len();
        let q: usize = blocks.iter().map(|b| b.ncols()).sum();
        let mut xc = DMatrix::zeros(n, q);
        let mut ranges = Vec::new();
        let mut off = 0;
        for b in blocks {
            for j in 0..b.ncols() {
                let mean = b.column(j).sum() / n as f64;
                for i in 0..n {
                    xc[(i, off + j)] = b[(i, j)] - mean;
                }
            }
            ranges.push((off, off + b.ncols()));
            off += b.ncols();
        }
        let xtx = crate::linalg::gram_row_major(&xc);
        let xty = (0..q).map(|j| (0..n).map(|i| xc[(i, j)] * yc[i]).sum()).collect();
        Self { xtx, xty, ranges, q }
    }

    fn quad_logdet(&self, g: &[f64], yty: f64) -> Result<(f64, f64)> {
        let q = self.q;
        let mut d = vec![0.0; q];
        for (&(a, b), &gf) in self.ranges.iter().zip(g) {
            for v in &mut d[a..b] {
                *v = gf.sqrt();
            }
        }
        let mut m = vec![0.0; q * q];
        for i in 0..q {
            for j in 0..=i {
                m[i * q + j] = d[i] * d[j] * self.xtx[i * q + j];
            }
            m[i * q + i] += 1.0;
        }
        let ch = Cholesky::new(m, q)?;
        let b: Vec<f64> = (0..q).map(|i| d[i] * self.xty[i]).collect();
        let w = ch.whiten(&b);
        let quad = yty - w.iter().map(|v| v * v).sum::<f64>();
        Ok((quad, ch.logdet()))
    }
}

/// A JZS model bound to one response vector.
#[derive(Debug, Clone)]
pub struct JzsModel {
    pub terms: Vec<JzsTerm>,
    n: usize,
    yc2: f64,
    gram: Gram,
    strata: Option<Strata>,
}

fn log_ml_from(n: usize, quad: f64, logdet: f64) -> f64 {
    let h = (n as f64 - 1.0) / 2.0;
    ln_gamma(h) - h * std::f64::consts::PI.ln() - 0.5 * (n as f64).ln() - 0.5 * logdet - h * quad.ln()
}

impl JzsModel {
    pub fn new(data: &Dataset, terms: &[JzsTerm]) -> Result<Self> {
        let y = data.latent();
        let n = y.len();
        if n < 3 {
            return invalid("need at least three observations");
        }
        for t in terms {
            if !(t.scale > 0.0 && t.scale.is_finite()) {
                return invalid(format!("term {} has a non-positive scale", t.label));
            }
        }
        let blocks: Vec<DMatrix<f64>> = terms
            .iter()
            .map(|t| term_block(&data.trials, t).map(|b| b.0))
            .collect::<Result<_>>()?;
        let ybar = y.iter().sum::<f64>() / n as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - ybar).collect();
        let yc2 = yc.iter().map(|v| v * v).sum::<f64>();
        if !(yc2 > 0.0) {
            return Err(Error::Numerical("response has zero variance".into()));
        }
        Ok(Self {
            terms: terms.to_vec(),
            n,
            yc2,
            gram: Gram::build(&blocks, &yc),
            strata: Strata::build(data, &y, terms),
        })
    }

    /// True when the balanced-strata closed form is in use.
    pub fn uses_strata(&self) -> bool {
        self.strata.is_some()
    }

    /// Log marginal likelihood at fixed `g` via the `q × q` Woodbury identity.
    pub fn log_ml_generic(&self, g: &[f64]) -> Result<f64> {
        let (quad, logdet) = self.gram.quad_logdet(g, self.yc2)?;
        Ok(log_ml_from(self.n, quad, logdet))
    }

    /// Log marginal likelihood at fixed `g`.
    pub fn log_ml(&self, g: &[f64]) -> Result<f64> {
        if g.len() != self.terms.len() || g.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return invalid("g must be finite, non-negative, one per term");
        }
        match &self.strata {
            Some(s) => {
                let (quad, logdet) = s.quad_logdet(g);
                Ok(log_ml_from(self.n, quad, logdet))
            }
            None => self.log_ml_generic(g),
        }
    }

    /// Integrand over `log g`, prior and Jacobian included.
    fn log_integrand(&self, lg: &[f64]) -> f64 {
        let g: Vec<f64> = lg.iter().map(|v| v.exp()).collect();
        let mut lp = 0.0;
        for (t, (&gi, &li)) in self.terms.iter().zip(g.iter().zip(lg)) {
            lp += scaled_inv_chisq_log_pdf(1.0, t.scale, gi) + li;
        }
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        match self.log_ml(&g) {
            Ok(v) if v.is_finite() => v + lp,
            _ => f64::NEG_INFINITY,
        }
    }

    /// Marginal likelihood with every `g` integrated out.
    pub fn log_evidence(&self, cfg: &JzsConfig, seed: u64) -> Result<Evidence> {
        let k = self.terms.len();
        let start: Vec<f64> = self.terms.iter().map(|t| 2.0 * t.scale.ln()).collect();
        match k {
            0 => Ok(Evidence {
                log_ml: log_ml_from(self.n, self.yc2, 0.0),
                mc_se: 0.0,
            }),
            1 => Ok(Evidence {
                log_ml: log_integrate_real_line(|l| self.log_integrand(&[l]), start[0])?,
                mc_se: 0.0,
            }),
            2 if cfg.max_quadrature_dims >= 2 => {
                let outer = log_integrate_real_line(
                    |a| log_integrate_real_line(|b| self.log_integrand(&[a, b]), start[1]).unwrap_or(f64::NEG_INFINITY),
                    start[0],
                )?;
                Ok(Evidence { log_ml: outer, mc_se: 0.0 })
            }
            _ => self.importance_sample(&start, cfg.n_g_draws, seed),
        }
    }

    fn importance_sample(&self, start: &[f64], n_draws: usize, seed: u64) -> Result<Evidence> {
        let d = start.len();
        let f = |l: &[f64]| self.log_integrand(l);
        let mut best = nelder_mead(|l| -f(l), start, 1.0, 1e-10, 2000 * d);
        for _ in 0..3 {
            let again = nelder_mead(|l| -f(l), &best.x, 0.3, 1e-12, 2000 * d);
            let done = again.value >= best.value - 1e-9;
            if again.value < best.value {
                best = again;
            }
            if done {
                break;
            }
        }
        if !best.value.is_finite() {
            return Err(Error::Numerical("g integrand is nowhere finite".into()));
        }
        let mode = best.x;
        let h = hessian(|l| -f(l), &mode, 1e-4);
        let mut cov = Cholesky::new(h.clone(), d).map(|c| {
            let inv = c.inverse();
            (0..d * d).map(|k| inv[(k / d, k % d)]).collect::<Vec<f64>>()
        });
        if let Ok(c) = &cov {
            if c.iter().any(|v| !v.is_finite()) {
                cov = Err(Error::Numerical("bad Laplace covariance".into()));
            }
        }
        let mut cov = cov.unwrap_or_else(|_| {
            let mut c = vec![0.0; d * d];
            for i in 0..d {
                let hi = h[i * d + i];
                c[i * d + i] = if hi > 1e-6 { 1.0 / hi } else { 4.0 };
            }
            c
        });
        for i in 0..d {
            // Flat directions: keep the proposal within a sane width.
            let v = cov[i * d + i];
            if v > 16.0 {
                let s = (16.0 / v).sqrt();
                for j in 0..d {
                    cov[i * d + j] *= s;
                    cov[j * d + i] *= s;
                }
            }
        }
        let inflate = 1.5;
        let ch = Cholesky::new(cov.iter().map(|v| v * inflate).collect(), d)?;
        let nu = 4.0;
        let chi = ChiSquared::new(nu).expect("positive df");
        let log_t_norm = ln_gamma((nu + d as f64) / 2.0)
            - ln_gamma(nu / 2.0)
            - 0.5 * d as f64 * (nu * std::f64::consts::PI).ln()
            - 0.5 * ch.logdet();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logw = Vec::with_capacity(n_draws);
        let mut z = vec![0.0; d];
        for _ in 0..n_draws {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let w: f64 = chi.sample(&mut rng);
            let scale = (nu / w).sqrt();
            let step = ch.mul_lower(&z);
            let x: Vec<f64> = mode.iter().zip(&step).map(|(m, s)| m + scale * s).collect();
            let zz: f64 = z.iter().map(|v| v * v).sum::<f64>() * scale * scale;
            let log_q = log_t_norm - 0.5 * (nu + d as f64) * (1.0 + zz / nu).ln();
            logw.push(f(&x) - log_q);
        }
        let lse = log_sum_exp(&logw);
        if !lse.is_finite() {
            return Err(Error::Numerical("importance weights vanished".into()));
        }
        let n = n_draws as f64;
        let log_ml = lse - n.ln();
        let w: Vec<f64> = logw.iter().map(|v| (v - log_ml).exp()).collect();
        let var = w.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Evidence {
            log_ml,
            mc_se: (var / n).sqrt(),
        })
    }
}

/// `log ∫ m(y | g) p(g) dg` and its Monte Carlo standard error (0 for quadrature).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evidence {
    pub log_ml: f64,
    pub mc_se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JzsConfig {
    /// Importance-sampling draws when more than `max_quadrature_dims` g's.
    pub n_g_draws: usize,
    pub max_quadrature_dims: usize,
    pub se_warning: f64,
}

impl Default for JzsConfig {
    fn default() -> Self {
        Self {
            n_g_draws: 20_000,
            max_quadrature_dims: 2,
            se_warning: 0.05,
        }
    }
}

/// JZS Bayes factor and its uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct JzsResult {
    pub comparison: ModelComparison,
    pub mc_se: f64,
    pub warnings: Vec<String>,
}

/// Log marginal likelihood of `y` given `g` for arbitrary design blocks.
pub fn jzs_logml(y: &[f64], blocks: &[DMatrix<f64>], g: &[f64]) -> Result<f64> {
    let n = y.len();
    if n < 3 || blocks.iter().any(|b| b.nrows() != n) || g.len() != blocks.len() {
        return invalid("blocks, g and y disagree in size");
    }
    if g.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return invalid("g must be finite and non-negative");
    }
    let ybar = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - ybar).collect();
    let yc2 = yc.iter().map(|v| v * v).sum();
    let gram = Gram::build(blocks, &yc);
    let (quad, logdet) = gram.quad_logdet(g, yc2)?;
    Ok(log_ml_from(n, quad, logdet))
}

/// BF of the model with all `terms` against the model without the terms at
/// positions `tested`.
pub fn jzs_anova_bf(data: &Dataset, terms: &[JzsTerm], tested: &[usize], prior_p1: f64, cfg: &JzsConfig, seed: u64) -> Result<JzsResult> {
    if tested.is_empty() || tested.iter().any(|&t| t >= terms.len()) {
        return invalid("tested terms out of range");
    }
    if tested.iter().any(|&t| !matches!(terms[t].kind, JzsTermKind::Fixed { .. })) {
        return invalid("only fixed terms can be tested");
    }
    let null: Vec<JzsTerm> = terms
        .iter()
        .enumerate()
        .filter(|(i, _)| !tested.contains(i))
        .map(|(_, t)| t.clone())
        .collect();
    let e1 = JzsModel::new(data, terms)?.log_evidence(cfg, seed)?;
    let e0 = JzsModel::new(data, &null)?.log_evidence(cfg, seed ^ 0xA5A5_A5A5)?;
    let mc_se = (e1.mc_se.powi(2) + e0.mc_se.powi(2)).sqrt();
    let mut warnings = Vec::new();
    if mc_se > cfg.se_warning {
        warnings.push(format!("Monte Carlo SE of log BF is {mc_se:.3}"));
    }
    Ok(JzsResult {
        comparison: comparison_from_log_bf(e1.log_ml - e0.log_ml, prior_p1),
        mc_se,
        warnings,
    })
}

/// One-sample JZS t-test of mean zero with Cauchy scale `r`.
pub fn jzs_ttest_bf(x: &[f64], r: f64, prior_p1: f64) -> Result<ModelComparison> {
    let n = x.len();
    if n < 2 {
        return invalid("t-test needs at least two observations");
    }
    if !(r > 0.0) {
        return invalid("scale must be positive");
    }
    let sd = crate::stats::sd(x);
    if !(sd > 0.0) {
        return Err(Error::Numerical("t-test input has zero variance".into()));
    }
    let t = crate::stats::mean(x) / (sd / (n as f64).sqrt());
    Ok(comparison_from_log_bf(ttest_log_bf(t, n, r)?, prior_p1))
}

/// Log BF10 of the one-sample JZS t-test from its t statistic.
pub fn ttest_log_bf(t: f64, n: usize, r: f64) -> Result<f64> {
    let nu = n as f64 - 1.0;
    let nf = n as f64;
    let log_null = -(nu + 1.0) / 2.0 * (1.0 + t * t / nu).ln();
    let log_alt = log_integrate_real_line(
        |l| {
            let g = l.exp();
            let a = 1.0 + nf * g;
            -0.5 * a.ln() - (nu + 1.0) / 2.0 * (1.0 + t * t / (a * nu)).ln() + scaled_inv_chisq_log_pdf(1.0, r, g) + l
        },
        2.0 * r.ln(),
    )?;
    Ok(log_alt - log_null)
}

/// JZS Bayes factor for a single-covariate regression against the intercept-only model.
pub fn jzs_linreg_bf(x: &[f64], y: &[f64], r: f64, prior_p1: f64) -> Result<ModelComparison> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return invalid("regression needs at least three paired observations");
    }
    let (mx, my) = (crate::stats::mean(x), crate::stats::mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Numerical("covariate is constant".into()));
    }
    if !(syy > 0.0) {
        return Err(Error::Numerical("response is constant".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let r2 = (sxy * sxy / (sxx * syy)).min(1.0 - 1e-15);
    let nf = n as f64;
    let p = 1.0;
    let log_bf = log_integrate_real_line(
        |l| {
            let g = l.exp();
            (nf - p - 1.0) / 2.0 * g.ln_1p() - (nf - 1.0) / 2.0 * (g * (1.0 - r2)).ln_1p()
                + scaled_inv_chisq_log_pdf(1.0, r * nf.sqrt(), g)
                + l
        },
        (r * r * nf).ln(),
    )?;
    Ok(comparison_from_log_bf(log_bf, prior_p1))
}

/// A term of the data-generating JZS model. `column_scales` gives each coded
/// column its own `g` scale (breaking sphericity); otherwise the term shares
/// one `g` with scale `term.scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JzsSimTerm {
    pub term: JzsTerm,
    #[serde(default)]
    pub column_scales: Option<Vec<f64>>,
}

/// Draws `y = μ + σ(Xθ + ε)`-style data from the JZS hierarchy with
/// `μ = 0`, `σ = 1`.
pub fn simulate_jzs<R: Rng + ?Sized>(trials: &TrialTable, terms: &[JzsSimTerm], rng: &mut R) -> Result<Dataset> {
    let n = trials.len();
    let mut y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for st in terms {
        let (x, c) = term_block(trials, &st.term)?;
        let scales = match &st.column_scales {
            Some(s) if s.len() != c => return invalid(format!("term {} needs {c} column scales", st.term.label)),
            Some(s) => s.clone(),
            None => vec![st.term.scale; c],
        };
        let gs: Vec<f64> = if st.column_scales.is_some() {
            scales.iter().map(|&s| sample_scaled_inv_chisq(1.0, s, rng)).collect()
        } else {
            vec![sample_scaled_inv_chisq(1.0, scales[0], rng); c]
        };
        let theta: Vec<f64> = (0..x.ncols()).map(|j| gs[j % c].sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        for i in 0..n {
            let mut acc = 0.0;
            for (j, th) in theta.iter().enumerate() {
                let v = x[(i, j)];
                if v != 0.0 {
                    acc += v * th;
                }
            }
            y[i] += acc;
        }
    }
    Ok(Dataset {
        trials: trials.clone(),
        y,
        family: Family::Normal,
        aggregation: Aggregation::None,
    })
}
