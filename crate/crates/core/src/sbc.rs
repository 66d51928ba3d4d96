//! Simulation-based calibration of Bayes factors: draw the true model from
//! its prior, draw parameters, simulate, analyse every configured view of the
//! same dataset, and compare the average posterior model probability with
//! the prior.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{bridge_logml, comparison_from_log_bf, BridgeConfig};
use crate::collapsed::{run_mcmc, CollapsedModel, Grouping, ModelSpec, RandomTerms};
use crate::design::{build_trial_table, expand_design, ContrastScheme, DesignSpec, RandomRequest, TrialTable};
use crate::error::{config, Error, Result};
use crate::jzs::{jzs_linreg_bf, jzs_ttest_bf, simulate_jzs, JzsConfig, JzsModel, JzsSimTerm, JzsTerm, JzsTermKind};
use crate::mcmc::McmcConfig;
use crate::numeric::{derive_seed, integrate};
use crate::priors::{draw_lmm_params, EffectLayout, ParamPins, PriorSpec};
use crate::simulate::{aggregate, simulate, Aggregation, Dataset, Family};
use crate::stats::{logistic_fit, mean_ci, LogisticFit, MeanCi};

/// How data are generated in each run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GenerativePrior {
    /// Parameters from the LMM priors; the same priors are used by every
    /// collapsed analysis.
    Lmm {
        prior: PriorSpec,
        #[serde(default)]
        subj_columns: Vec<usize>,
        #[serde(default)]
        item_columns: Vec<usize>,
    },
    /// Standardised effects from the JZS hierarchy with `μ = 0`, `σ = 1`.
    Jzs { terms: Vec<JzsSimTerm> },
}

/// One null hypothesis. The collapsed pipeline drops `columns` from the fixed
/// effects; the JZS pipeline drops the fixed terms named in `jzs_terms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestedEffect {
    pub id: String,
    #[serde(default)]
    pub columns: Vec<usize>,
    #[serde(default)]
    pub jzs_terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisModel {
    Collapsed { random: Vec<RandomTerms> },
    Jzs { terms: Vec<JzsTerm> },
}

/// In JSON an analysis is flat: `{"id", "aggregation", "pipeline", …}` with
/// `random` for the collapsed pipeline and `terms` for JZS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnalysisRepr", into = "AnalysisRepr")]
pub struct SbcAnalysis {
    pub id: String,
    pub aggregation: Aggregation,
    pub model: AnalysisModel,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum PipelineTag {
    Collapsed,
    Jzs,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalysisRepr {
    id: String,
    aggregation: Aggregation,
    pipeline: PipelineTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    random: Option<Vec<RandomTerms>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terms: Option<Vec<JzsTerm>>,
}

impl TryFrom<AnalysisRepr> for SbcAnalysis {
    type Error = String;

    fn try_from(r: AnalysisRepr) -> std::result::Result<Self, String> {
        let model = match (r.pipeline, r.random, r.terms) {
            (PipelineTag::Collapsed, random, None) => AnalysisModel::Collapsed {
                random: random.unwrap_or_default(),
            },
            (PipelineTag::Jzs, None, Some(terms)) => AnalysisModel::Jzs { terms },
            (PipelineTag::Collapsed, _, Some(_)) => return Err(format!("collapsed analysis {} takes no terms", r.id)),
            (PipelineTag::Jzs, Some(_), _) => return Err(format!("JZS analysis {} takes terms, not random", r.id)),
            (PipelineTag::Jzs, None, None) => return Err(format!("JZS analysis {} needs terms", r.id)),
        };
        Ok(Self {
            id: r.id,
            aggregation: r.aggregation,
            model,
        })
    }
}

impl From<SbcAnalysis> for AnalysisRepr {
    fn from(a: SbcAnalysis) -> Self {
        let (pipeline, random, terms) = match a.model {
            AnalysisModel::Collapsed { random } => (PipelineTag::Collapsed, Some(random), None),
            AnalysisModel::Jzs { terms } => (PipelineTag::Jzs, None, Some(terms)),
        };
        Self {
            id: a.id,
            aggregation: a.aggregation,
            pipeline,
            random,
            terms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepTarget {
    /// True random-effect SDs at these positions of one grouping.
    LmmSd { grouping: Grouping, positions: Vec<usize> },
    /// Prior scale of a generating JZS term (shared `g`).
    JzsScale { term: String },
}

/// Run `r` of `N` sets the target to `lo + (hi − lo)·r/(N − 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbcSweep {
    pub target: SweepTarget,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbcSettings {
    pub n_sims: usize,
    pub prior_p1: f64,
    #[serde(default)]
    pub seed: u64,
    /// `n_sims` is divided by this factor (at least one run remains).
    #[serde(default = "one")]
    pub desk_factor: usize,
    #[serde(default)]
    pub sweep: Option<SbcSweep>,
    /// Force OLS estimates of the simulated data to the drawn coefficients.
    #[serde(default)]
    pub empirical: bool,
}

fn one() -> usize {
    1
}

impl SbcSettings {
    pub fn runs(&self) -> usize {
        (self.n_sims / self.desk_factor.max(1)).max(1)
    }

    pub fn sweep_value(&self, run: usize) -> Option<f64> {
        let s = self.sweep.as_ref()?;
        let n = self.runs();
        Some(if n <= 1 {
            s.lo
        } else {
            s.lo + (s.hi - s.lo) * run as f64 / (n - 1) as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbcScenario {
    pub name: String,
    pub design: DesignSpec,
    pub contrasts: Vec<(String, ContrastScheme)>,
    #[serde(default)]
    pub family: Family,
    pub priors: GenerativePrior,
    #[serde(default)]
    pub pins: ParamPins,
    pub effects: Vec<TestedEffect>,
    pub analyses: Vec<SbcAnalysis>,
    pub sbc: SbcSettings,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub bridge: BridgeConfig,
    #[serde(default)]
    pub jzs: JzsConfig,
}

struct Prepared {
    trials: TrialTable,
    bundle: crate::design::DesignMatrixBundle,
    views: Vec<DMatrix<f64>>,
}

impl SbcScenario {
    pub fn validate(&self) -> Result<()> {
        self.design.validate()?;
        let s = &self.sbc;
        if !(s.prior_p1 > 0.0 && s.prior_p1 < 1.0) {
            return config("prior_p1 must lie strictly between 0 and 1");
        }
        if s.n_sims == 0 {
            return config("n_sims must be at least 1");
        }
        if self.effects.is_empty() || self.analyses.is_empty() {
            return config("at least one tested effect and one analysis are required");
        }
        let mut ids = std::collections::HashSet::new();
        for a in &self.analyses {
            if !ids.insert(&a.id) {
                return config(format!("analysis id {} is repeated", a.id));
            }
            if a.id.contains(',') {
                return config("analysis ids may not contain commas");
            }
        }
        for e in &self.effects {
            if e.id.contains(',') {
                return config("effect ids may not contain commas");
            }
        }
        if let GenerativePrior::Lmm { prior, .. } = &self.priors {
            prior.validate()?;
        }
        for a in &self.analyses {
            match &a.model {
                AnalysisModel::Collapsed { .. } => {
                    if !matches!(self.priors, GenerativePrior::Lmm { .. }) {
                        return config(format!("collapsed analysis {} needs LMM priors", a.id));
                    }
                    for e in &self.effects {
                        if e.columns.is_empty() || e.columns.contains(&0) {
                            return config(format!("effect {} needs non-intercept columns", e.id));
                        }
                    }
                }
                AnalysisModel::Jzs { terms } => {
                    for e in &self.effects {
                        if e.jzs_terms.is_empty() {
                            return config(format!("effect {} names no JZS terms", e.id));
                        }
                        for l in &e.jzs_terms {
                            let ok = terms
                                .iter()
                                .any(|t| &t.label == l && matches!(t.kind, JzsTermKind::Fixed { .. }));
                            if !ok {
                                return config(format!("analysis {} has no fixed term {l}", a.id));
                            }
                        }
                    }
                }
            }
        }
        if let Some(sw) = &s.sweep {
            match (&sw.target, &self.priors) {
                (SweepTarget::LmmSd { grouping, positions }, GenerativePrior::Lmm { subj_columns, item_columns, .. }) => {
                    let k = match grouping {
                        Grouping::Subject => subj_columns.len(),
                        Grouping::Item => item_columns.len(),
                    };
                    if positions.iter().any(|&p| p >= k) {
                        return config("sweep position out of range");
                    }
                }
                (SweepTarget::JzsScale { term }, GenerativePrior::Jzs { terms }) => {
                    if !terms.iter().any(|t| &t.term.label == term) {
                        return config(format!("sweep names unknown term {term}"));
                    }
                }
                _ => return config("sweep target does not match the generating prior"),
            }
            if !(sw.lo >= 0.0 && sw.hi >= sw.lo) {
                return config("sweep needs 0 <= lo <= hi");
            }
        }
        Ok(())
    }

    fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let trials = build_trial_table(&self.design)?;
        let request = match &self.priors {
            GenerativePrior::Lmm { subj_columns, item_columns, .. } => RandomRequest {
                subj: subj_columns.clone(),
                item: item_columns.clone(),
            },
            GenerativePrior::Jzs { .. } => RandomRequest::default(),
        };
        let bundle = expand_design(&trials, &self.contrasts, &request)?;
        for e in &self.effects {
            if e.columns.iter().any(|&c| c >= bundle.p()) {
                return config(format!("effect {} names a column beyond the design", e.id));
            }
        }
        let shell = Dataset {
            trials: trials.clone(),
            y: vec![1.0; trials.len()],
            family: self.family,
            aggregation: Aggregation::None,
        };
        let mut views = Vec::new();
        for a in &self.analyses {
            let v = aggregate(&shell, a.aggregation)?;
            views.push(expand_design(&v.trials, &self.contrasts, &RandomRequest::default())?.x);
        }
        Ok(Prepared { trials, bundle, views })
    }
}

/// Result of one (analysis, effect) comparison within a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectOutcome {
    pub analysis_id: String,
    pub effect_id: String,
    pub true_h1: bool,
    pub log_bf10: f64,
    pub post_p1: f64,
    pub rhat_max: f64,
    pub bridge_iters: usize,
    pub warn_flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcRecord {
    pub run: usize,
    pub sweep_value: Option<f64>,
    pub params_digest: String,
    pub outcomes: Vec<EffectOutcome>,
}

struct Evidence {
    log_ml: f64,
    rhat_max: f64,
    iters: usize,
    warnings: Vec<String>,
}

fn collapsed_evidence(view: &Dataset, x: &DMatrix<f64>, spec: &ModelSpec, sc: &SbcScenario, seed: u64) -> Result<Evidence> {
    let model = CollapsedModel::new(view, x, spec)?;
    let draws = run_mcmc(&model, &sc.mcmc, seed)?;
    let target = |u: &[f64]| model.log_posterior(u);
    let br = bridge_logml(&draws, &target, &sc.bridge, derive_seed(seed, &[0xB1D6E]))?;
    let mut warnings = br.warnings;
    if !draws.converged {
        warnings.push(format!("rhat={:.3}", draws.rhat_max()));
    }
    Ok(Evidence {
        log_ml: br.log_ml,
        rhat_max: draws.rhat_max(),
        iters: br.n_iterations,
        warnings,
    })
}

fn jzs_evidence(view: &Dataset, terms: &[JzsTerm], cfg: &JzsConfig, seed: u64) -> Result<Evidence> {
    let e = JzsModel::new(view, terms)?.log_evidence(cfg, seed)?;
    let mut warnings = Vec::new();
    if e.mc_se > cfg.se_warning {
        warnings.push(format!("mc_se={:.3}", e.mc_se));
    }
    Ok(Evidence {
        log_ml: e.log_ml,
        rhat_max: f64::NAN,
        iters: 0,
        warnings,
    })
}

fn sanitize(msg: &str) -> String {
    msg.chars().map(|c| if c == ',' || c == '\n' || c == ';' { ' ' } else { c }).collect()
}

fn failed(a: &SbcAnalysis, e: &TestedEffect, truth: bool, err: &Error) -> EffectOutcome {
    EffectOutcome {
        analysis_id: a.id.clone(),
        effect_id: e.id.clone(),
        true_h1: truth,
        log_bf10: f64::NAN,
        post_p1: f64::NAN,
        rhat_max: f64::NAN,
        bridge_iters: 0,
        warn_flags: vec![format!("error: {}", sanitize(&err.to_string()))],
    }
}

fn analyse(sc: &SbcScenario, ai: usize, view: &Dataset, x: &DMatrix<f64>, truth: &[bool], seed: u64) -> Vec<EffectOutcome> {
    let a = &sc.analyses[ai];
    let p1 = sc.sbc.prior_p1;
    let full: Result<Evidence> = match &a.model {
        AnalysisModel::Collapsed { random } => {
            let GenerativePrior::Lmm { prior, .. } = &sc.priors else { unreachable!("validated") };
            let spec = ModelSpec {
                fixed_columns: (0..x.ncols()).collect(),
                random: random.clone(),
                priors: prior.clone(),
                family: sc.family,
            };
            collapsed_evidence(view, x, &spec, sc, derive_seed(seed, &[0]))
        }
        AnalysisModel::Jzs { terms } => jzs_evidence(view, terms, &sc.jzs, derive_seed(seed, &[0])),
    };
    let full = match full {
        Ok(f) => f,
        Err(err) => return sc.effects.iter().zip(truth).map(|(e, &t)| failed(a, e, t, &err)).collect(),
    };
    sc.effects
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(ei, (e, &t))| {
            let s = derive_seed(seed, &[1 + ei as u64]);
            let null = match &a.model {
                AnalysisModel::Collapsed { random } => {
                    let GenerativePrior::Lmm { prior, .. } = &sc.priors else { unreachable!("validated") };
                    let spec = ModelSpec {
                        fixed_columns: (0..x.ncols()).filter(|c| !e.columns.contains(c)).collect(),
                        random: random.clone(),
                        priors: prior.clone(),
                        family: sc.family,
                    };
                    collapsed_evidence(view, x, &spec, sc, s)
                }
                AnalysisModel::Jzs { terms } => {
                    let kept: Vec<JzsTerm> = terms.iter().filter(|t| !e.jzs_terms.contains(&t.label)).cloned().collect();
                    jzs_evidence(view, &kept, &sc.jzs, s)
                }
            };
            match null {
                Ok(n) => {
                    let cmp = comparison_from_log_bf(full.log_ml - n.log_ml, p1);
                    let mut warn_flags = full.warnings.clone();
                    warn_flags.extend(n.warnings);
                    EffectOutcome {
                        analysis_id: a.id.clone(),
                        effect_id: e.id.clone(),
                        true_h1: t,
                        log_bf10: cmp.log_bf10,
                        post_p1: cmp.post_p1,
                        rhat_max: full.rhat_max.max(n.rhat_max),
                        bridge_iters: full.iters.max(n.iters),
                        warn_flags: warn_flags.iter().map(|w| sanitize(w)).collect(),
                    }
                }
                Err(err) => failed(a, e, t, &err),
            }
        })
        .collect()
}

fn simulate_run(sc: &SbcScenario, prep: &Prepared, run: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<bool>, Dataset, String)> {
    let p1 = sc.sbc.prior_p1;
    let truth: Vec<bool> = sc.effects.iter().map(|_| rng.random::<f64>() < p1).collect();
    let sweep = sc.sbc.sweep_value(run);
    match &sc.priors {
        GenerativePrior::Lmm { prior, subj_columns, item_columns } => {
            let layout = EffectLayout {
                p: prep.bundle.p(),
                k_subj: if prep.bundle.z_subj.is_some() { subj_columns.len() } else { 0 },
                k_item: if prep.bundle.z_item.is_some() { item_columns.len() } else { 0 },
            };
            let mut params = draw_lmm_params(prior, layout, &sc.pins, sc.family, rng);
            if let (Some(v), Some(SbcSweep { target: SweepTarget::LmmSd { grouping, positions }, .. })) = (sweep, &sc.sbc.sweep) {
                let sds = match grouping {
                    Grouping::Subject => &mut params.sd_subj,
                    Grouping::Item => &mut params.sd_item,
                };
                for &p in positions {
                    if p < sds.len() {
                        sds[p] = v;
                    }
                }
            }
            for (e, &t) in sc.effects.iter().zip(&truth) {
                if !t {
                    for &c in &e.columns {
                        params.beta[c] = 0.0;
                    }
                }
            }
            let data = simulate(&prep.trials, &prep.bundle, &params, sc.sbc.empirical, rng)?;
            Ok((truth, data, params.digest()))
        }
        GenerativePrior::Jzs { terms } => {
            let mut dropped: Vec<&str> = Vec::new();
            for (e, &t) in sc.effects.iter().zip(&truth) {
                if !t {
                    dropped.extend(e.jzs_terms.iter().map(String::as_str));
                }
            }
            let mut active: Vec<JzsSimTerm> = terms.iter().filter(|t| !dropped.contains(&t.term.label.as_str())).cloned().collect();
            if let (Some(v), Some(SbcSweep { target: SweepTarget::JzsScale { term }, .. })) = (sweep, &sc.sbc.sweep) {
                for t in active.iter_mut().filter(|t| &t.term.label == term) {
                    t.term.scale = v;
                    t.column_scales = None;
                }
            }
            let data = simulate_jzs(&prep.trials, &active, rng)?;
            let digest = format!(
                "jzs terms=[{}] sweep={}",
                active.iter().map(|t| t.term.label.as_str()).collect::<Vec<_>>().join(";"),
                sweep.map(|v| format!("{v:.6e}")).unwrap_or_default()
            );
            Ok((truth, data, digest))
        }
    }
}

/// The dataset of run `run`: which effects are truly present, the simulated
/// data, and a digest of the drawn parameters.
#[derive(Debug, Clone)]
pub struct SimulatedRun {
    pub truth: Vec<bool>,
    pub data: Dataset,
    pub params_digest: String,
}

pub fn simulate_dataset(sc: &SbcScenario, run: usize) -> Result<SimulatedRun> {
    let prep = sc.prepare()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sc.sbc.seed, &[run as u64]));
    let (truth, data, params_digest) = simulate_run(sc, &prep, run, &mut rng)?;
    Ok(SimulatedRun { truth, data, params_digest })
}

/// Every analysis and tested effect of a scenario on one observed dataset.
/// `data` may be raw, or already aggregated the way an analysis expects;
/// analyses that need a view the data cannot provide are reported as failed.
/// `true_h1` is false throughout, since the truth is unknown.
pub fn analyse_dataset(sc: &SbcScenario, data: &Dataset, seed: u64) -> Result<Vec<EffectOutcome>> {
    sc.validate()?;
    let unknown = vec![false; sc.effects.len()];
    let mut outcomes = Vec::new();
    for (ai, a) in sc.analyses.iter().enumerate() {
        let s = derive_seed(seed, &[0xA11, ai as u64]);
        let view = if data.aggregation == a.aggregation {
            Ok(data.clone())
        } else {
            aggregate(data, a.aggregation)
        };
        let x = view.and_then(|v| Ok((expand_design(&v.trials, &sc.contrasts, &RandomRequest::default())?.x, v)));
        match x {
            Ok((x, v)) => outcomes.extend(analyse(sc, ai, &v, &x, &unknown, s)),
            Err(err) => outcomes.extend(sc.effects.iter().map(|e| failed(a, e, false, &err))),
        }
    }
    Ok(outcomes)
}

/// Runs one SBC replicate. Every analysis sees the same simulated dataset.
pub fn run_one(sc: &SbcScenario, run: usize) -> Result<SbcRecord> {
    let prep = sc.prepare()?;
    Ok(run_prepared(sc, &prep, run))
}

fn run_prepared(sc: &SbcScenario, prep: &Prepared, run: usize) -> SbcRecord {
    let run_seed = derive_seed(sc.sbc.seed, &[run as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    let sweep_value = sc.sbc.sweep_value(run);
    let (truth, data, params_digest) = match simulate_run(sc, prep, run, &mut rng) {
        Ok(v) => v,
        Err(err) => {
            let outcomes = sc
                .analyses
                .iter()
                .flat_map(|a| sc.effects.iter().map(|e| failed(a, e, false, &err)).collect::<Vec<_>>())
                .collect();
            return SbcRecord {
                run,
                sweep_value,
                params_digest: String::new(),
                outcomes,
            };
        }
    };
    let mut outcomes = Vec::new();
    for (ai, a) in sc.analyses.iter().enumerate() {
        let seed = derive_seed(run_seed, &[0xA11, ai as u64]);
        match aggregate(&data, a.aggregation) {
            Ok(view) => outcomes.extend(analyse(sc, ai, &view, &prep.views[ai], &truth, seed)),
            Err(err) => outcomes.extend(sc.effects.iter().zip(&truth).map(|(e, &t)| failed(a, e, t, &err))),
        }
    }
    SbcRecord {
        run,
        sweep_value,
        params_digest,
        outcomes,
    }
}

/// All runs of a scenario, in run order, on the current rayon pool. Run `r`
/// draws from a generator seeded by `(seed, r)`, so the output does not
/// depend on the number of workers.
pub fn run_sbc(sc: &SbcScenario) -> Result<Vec<SbcRecord>> {
    run_sbc_with(sc, |_| {})
}

/// As `run_sbc`, calling `progress` after each finished run.
pub fn run_sbc_with<P: Fn(usize) + Sync>(sc: &SbcScenario, progress: P) -> Result<Vec<SbcRecord>> {
    let prep = sc.prepare()?;
    Ok((0..sc.sbc.runs())
        .into_par_iter()
        .map(|r| {
            let rec = run_prepared(sc, &prep, r);
            progress(r);
            rec
        })
        .collect())
}

/// One line of `records.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub run: usize,
    pub true_model: String,
    pub analysis_id: String,
    pub effect_id: String,
    pub log_bf10: f64,
    pub post_p1: f64,
    pub rhat_max: f64,
    pub bridge_iters: usize,
    pub warn_flags: String,
}

pub fn record_rows(records: &[SbcRecord]) -> Vec<RecordRow> {
    records
        .iter()
        .flat_map(|r| {
            r.outcomes.iter().map(move |o| RecordRow {
                run: r.run,
                true_model: if o.true_h1 { "H1" } else { "H0" }.into(),
                analysis_id: o.analysis_id.clone(),
                effect_id: o.effect_id.clone(),
                log_bf10: o.log_bf10,
                post_p1: o.post_p1,
                rhat_max: o.rhat_max,
                bridge_iters: o.bridge_iters,
                warn_flags: o.warn_flags.join(";"),
            })
        })
        .collect()
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.10e}")
    }
}

fn parse_f(s: &str) -> Result<f64> {
    if s == "NA" {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| Error::Config(format!("not a number: {s}")))
}

pub const RECORD_HEADER: [&str; 9] = [
    "run",
    "true_model",
    "analysis_id",
    "effect_id",
    "log_bf10",
    "post_p1",
    "rhat_max",
    "bridge_iters",
    "warn_flags",
];

pub fn write_records_csv<W: Write>(rows: &[RecordRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RECORD_HEADER)?;
    for r in rows {
        out.write_record([
            r.run.to_string(),
            r.true_model.clone(),
            r.analysis_id.clone(),
            r.effect_id.clone(),
            fmt_f(r.log_bf10),
            fmt_f(r.post_p1),
            fmt_f(r.rhat_max),
            r.bridge_iters.to_string(),
            r.warn_flags.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<RecordRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_HEADER {
        return config(format!("unexpected records header: {}", header.join(",")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(RecordRow {
            run: rec[0].parse().map_err(|_| Error::Config(format!("bad run index {}", &rec[0])))?,
            true_model: rec[1].to_string(),
            analysis_id: rec[2].to_string(),
            effect_id: rec[3].to_string(),
            log_bf10: parse_f(&rec[4])?,
            post_p1: parse_f(&rec[5])?,
            rhat_max: parse_f(&rec[6])?,
            bridge_iters: rec[7].parse().map_err(|_| Error::Config(format!("bad bridge_iters {}", &rec[7])))?,
            warn_flags: rec[8].to_string(),
        });
    }
    Ok(rows)
}

/// Mean posterior model probability of one (analysis, effect) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub analysis_id: String,
    pub effect_id: String,
    pub n: usize,
    pub n_failed: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// All values identical: the interval has zero width.
    pub degenerate: bool,
}

impl CellSummary {
    pub fn ci(&self) -> MeanCi {
        MeanCi {
            mean: self.mean,
            lo: self.ci_lo,
            hi: self.ci_hi,
            n: self.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub prior_p1: f64,
    pub cells: Vec<CellSummary>,
}

impl CalibrationSummary {
    pub fn cell(&self, analysis: &str, effect: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.analysis_id == analysis && c.effect_id == effect)
    }
}

fn grouped(rows: &[RecordRow]) -> Vec<((String, String), Vec<&RecordRow>)> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut map: BTreeMap<(String, String), Vec<&RecordRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.analysis_id.clone(), r.effect_id.clone());
        if !map.contains_key(&key) {
            order.push(key.clone());
        }
        map.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let v = map.remove(&k).unwrap();
            (k, v)
        })
        .collect()
}

/// Normal-approximation 95% intervals of the mean posterior probability per
/// (analysis, effect). Failed runs are counted but excluded from the mean.
pub fn summarize(rows: &[RecordRow], prior_p1: f64) -> CalibrationSummary {
    let cells = grouped(rows)
        .into_iter()
        .map(|((a, e), rs)| {
            let vals: Vec<f64> = rs.iter().map(|r| r.post_p1).filter(|v| v.is_finite()).collect();
            let n_failed = rs.len() - vals.len();
            let (mean, lo, hi) = if vals.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN)
            } else if vals.len() == 1 {
                (vals[0], vals[0], vals[0])
            } else {
                let ci = mean_ci(&vals);
                (ci.mean, ci.lo, ci.hi)
            };
            let degenerate = !vals.is_empty() && vals.iter().all(|&v| v == vals[0]);
            CellSummary {
                analysis_id: a,
                effect_id: e,
                n: vals.len(),
                n_failed,
                mean,
                ci_lo: lo,
                ci_hi: hi,
                degenerate,
            }
        })
        .collect();
    CalibrationSummary { prior_p1, cells }
}

pub fn write_summary_csv<W: Write>(s: &CalibrationSummary, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["analysis_id", "effect_id", "n", "n_failed", "mean_post_p1", "ci_lo", "ci_hi", "prior_p1", "degenerate"])?;
    for c in &s.cells {
        out.write_record([
            c.analysis_id.clone(),
            c.effect_id.clone(),
            c.n.to_string(),
            c.n_failed.to_string(),
            fmt_f(c.mean),
            fmt_f(c.ci_lo),
            fmt_f(c.ci_hi),
            fmt_f(s.prior_p1),
            c.degenerate.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `n` evenly spaced Cauchy scales from `lo` to `hi`.
pub fn scale_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn default_scale_grid() -> Vec<f64> {
    scale_grid(0.2, 1.5, 14)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleBf {
    pub scale: f64,
    pub bf10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneSampleTest {
    pub analysis_id: String,
    pub effect_id: String,
    pub by_scale: Vec<ScaleBf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub analysis_id: String,
    pub effect_a: String,
    pub effect_b: String,
    pub by_scale: Vec<ScaleBf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTest {
    pub analysis_id: String,
    pub effect_id: String,
    /// JZS regression BF of posterior probability on the swept value.
    pub bf10: f64,
    pub logistic: LogisticFit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTests {
    pub one_sample: Vec<OneSampleTest>,
    pub paired: Vec<PairedTest>,
    pub sweep: Vec<SweepTest>,
    /// Cells or pairs whose tests were skipped, with the reason.
    pub skipped: Vec<String>,
}

fn constant(v: &[f64]) -> bool {
    v.len() < 2 || v.iter().all(|&x| x == v[0])
}

/// JZS t-tests of mean posterior probability against `prior_p1` at every
/// scale, paired t-tests between effects of one analysis, and (with
/// `sweep_of_run`) regression BFs of posterior probability on the swept value.
pub fn calibration_tests(
    rows: &[RecordRow],
    prior_p1: f64,
    scales: &[f64],
    sweep_of_run: Option<&dyn Fn(usize) -> f64>,
) -> Result<CalibrationTests> {
    if scales.is_empty() {
        return config("scale grid must not be empty");
    }
    let mut out = CalibrationTests::default();
    let groups = grouped(rows);
    for ((a, e), rs) in &groups {
        let d: Vec<f64> = rs.iter().map(|r| r.post_p1 - prior_p1).filter(|v| v.is_finite()).collect();
        if constant(&d) {
            out.skipped.push(format!("{a}/{e}: constant posterior probabilities"));
            continue;
        }
        let by_scale = scales
            .iter()
            .map(|&s| Ok(ScaleBf { scale: s, bf10: jzs_ttest_bf(&d, s, 0.5)?.bf10 }))
            .collect::<Result<Vec<_>>>()?;
        out.one_sample.push(OneSampleTest {
            analysis_id: a.clone(),
            effect_id: e.clone(),
            by_scale,
        });
        if let Some(f) = sweep_of_run {
            let pairs: Vec<(f64, f64)> = rs.iter().filter(|r| r.post_p1.is_finite()).map(|r| (f(r.run), r.post_p1)).collect();
            let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if constant(&x) || constant(&y) || x.len() < 3 {
                out.skipped.push(format!("{a}/{e}: sweep regression needs varying values"));
            } else {
                let bf10 = jzs_linreg_bf(&x, &y, std::f64::consts::SQRT_2 / 4.0, 0.5)?.bf10;
                let logistic = logistic_fit(&x, &y, &vec![1.0; x.len()])?;
                out.sweep.push(SweepTest {
                    analysis_id: a.clone(),
                    effect_id: e.clone(),
                    bf10,
                    logistic,
                });
            }
        }
    }
    let analyses: Vec<&String> = {
        let mut v: Vec<&String> = Vec::new();
        for ((a, _), _) in &groups {
            if !v.contains(&a) {
                v.push(a);
            }
        }
        v
    };
    for a in analyses {
        let cells: Vec<&((String, String), Vec<&RecordRow>)> = groups.iter().filter(|((x, _), _)| x == a).collect();
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                let (ea, ra) = (&cells[i].0 .1, &cells[i].1);
                let (eb, rb) = (&cells[j].0 .1, &cells[j].1);
                let by_run: BTreeMap<usize, f64> = rb.iter().map(|r| (r.run, r.post_p1)).collect();
                let d: Vec<f64> = ra
                    .iter()
                    .filter_map(|r| by_run.get(&r.run).map(|pb| r.post_p1 - pb))
                    .filter(|v| v.is_finite())
                    .collect();
                if constant(&d) {
                    out.skipped.push(format!("{a}: {ea} vs {eb}: constant differences"));
                    continue;
                }
                let by_scale = scales
                    .iter()
                    .map(|&s| Ok(ScaleBf { scale: s, bf10: jzs_ttest_bf(&d, s, 0.5)?.bf10 }))
                    .collect::<Result<Vec<_>>>()?;
                out.paired.push(PairedTest {
                    analysis_id: a.clone(),
                    effect_a: ea.clone(),
                    effect_b: eb.clone(),
                    by_scale,
                });
            }
        }
    }
    Ok(out)
}

/// Conjugate toy with an exactly computable Bayes factor: `n` draws of
/// `N(μ, 1)`, H0: `μ = 0`, H1: `μ ~ N(0, τ²)`. The evidence under H1 is
/// integrated by adaptive quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConjugateToy {
    pub n: usize,
    pub tau: f64,
}

impl ConjugateToy {
    fn log_lik(&self, mean: f64, mu: f64) -> f64 {
        // Sufficient statistic ȳ ~ N(μ, 1/n); the remaining factor cancels.
        let v = 1.0 / self.n as f64;
        -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (mean - mu).powi(2) / v)
    }

    pub fn log_bf10(&self, mean: f64) -> Result<f64> {
        let l0 = self.log_lik(mean, 0.0);
        let half = 12.0 * self.tau.max(1.0 / (self.n as f64).sqrt()) + mean.abs();
        let q = integrate(
            |mu| {
                let prior = -0.5 * ((2.0 * std::f64::consts::PI).ln() + 2.0 * self.tau.ln() + (mu / self.tau).powi(2));
                (self.log_lik(mean, mu) + prior - l0).exp()
            },
            -half,
            half,
            1e-14,
            1e-12,
        )?;
        Ok(q.value.ln())
    }

    pub fn log_bf10_closed_form(&self, mean: f64) -> f64 {
        let v = 1.0 / self.n as f64;
        let t2 = self.tau * self.tau;
        -0.5 * ((v + t2) / v).ln() - 0.5 * mean * mean * (1.0 / (v + t2) - 1.0 / v)
    }
}

/// SBC with the exact toy: posterior probabilities of H1 for `runs`
/// replicates.
pub fn exact_stub_sbc(toy: ConjugateToy, runs: usize, prior_p1: f64, seed: u64) -> Result<Vec<f64>> {
    (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64]));
            let h1 = rng.random::<f64>() < prior_p1;
            let mu = if h1 { toy.tau * rng.sample::<f64, _>(rand_distr::StandardNormal) } else { 0.0 };
            let mean = mu + rng.sample::<f64, _>(rand_distr::StandardNormal) / (toy.n as f64).sqrt();
            Ok(comparison_from_log_bf(toy.log_bf10(mean)?, prior_p1).post_p1)
        })
        .collect()
}
