//! Preset scenarios for every simulation experiment, at full or desk scale.

use serde::{Deserialize, Serialize};

use crate::bridge::BridgeConfig;
use crate::collapsed::{Grouping, RandomTerms};
use crate::design::{Assignment, ContrastKind, ContrastScheme, DesignSpec, FactorSpec};
use crate::error::{config, Result};
use crate::freq::FreqScenario;
use crate::jzs::{JzsConfig, JzsSimTerm, JzsTerm};
use crate::mcmc::McmcConfig;
use crate::priors::{Dist, ParamPins, PriorSpec};
use crate::sbc::{AnalysisModel, GenerativePrior, SbcAnalysis, SbcScenario, SbcSettings, SbcSweep, SweepTarget, TestedEffect};
use crate::simulate::{Aggregation, Family};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Full,
    /// Fewer runs (and for some presets a smaller design) for a workstation.
    Desk,
}

pub const SBC_PRESETS: [&str; 15] = [
    "sim1_1",
    "sim1_1_prior50",
    "sim1_2",
    "sim1_3",
    "sim1_4",
    "sim1_5",
    "sim1_6",
    "sim1_7",
    "sim1_7_spherical",
    "sim1_8",
    "sim1_8_spherical",
    "sim2_1",
    "sim2_2",
    "sim2_3",
    "sim2_4",
];

pub const FREQ_PRESETS: [&str; 2] = ["appendix_a", "appendix_e"];

pub fn sbc_preset(name: &str, scale: Scale) -> Result<SbcScenario> {
    let desk = scale == Scale::Desk;
    let sc = match name {
        "sim1_1" => sim1_1(150.0, desk),
        "sim1_1_prior50" => sim1_1(50.0, desk),
        "sim1_2" => pit3(false, desk),
        "sim1_3" => pit5(false, desk),
        "sim1_4" => two_step(desk),
        "sim1_5" => pit3(true, desk),
        "sim1_6" => pit5(true, desk),
        "sim1_7" => jzs_f3(false, desk),
        "sim1_7_spherical" => jzs_f3(true, desk),
        "sim1_8" => jzs_2x2(false, desk),
        "sim1_8_spherical" => jzs_2x2(true, desk),
        "sim2_1" => gibson_wu_sbc(desk),
        "sim2_2" => jzs_items(2, desk),
        "sim2_3" => jzs_items(4, desk),
        "sim2_4" => items_2x2(desk),
        _ => return config(format!("unknown preset {name}; known: {}", SBC_PRESETS.join(", "))),
    };
    sc.validate()?;
    Ok(sc)
}

pub fn freq_preset(name: &str) -> Result<FreqScenario> {
    match name {
        "appendix_a" => Ok(FreqScenario::sphericity()),
        "appendix_e" => Ok(FreqScenario::item_variance()),
        _ => config(format!("unknown frequentist preset {name}; known: {}", FREQ_PRESETS.join(", "))),
    }
}

/// Design of the two-condition reading study: 42 subjects, 16 items, one
/// observation per subject and item.
pub fn gibson_wu_design() -> DesignSpec {
    DesignSpec {
        factors: vec![FactorSpec::numbered("X", 2)],
        n_subj: 42,
        n_item: 16,
        n_rep: 1,
        assignment: Assignment::LatinSquare,
    }
}

fn crossed(factors: Vec<FactorSpec>, n_subj: usize, n_rep: usize) -> DesignSpec {
    DesignSpec {
        factors,
        n_subj,
        n_item: 0,
        n_rep,
        assignment: Assignment::FullCrossing,
    }
}

fn normal(mean: f64, sd: f64) -> Dist {
    Dist::Normal { mean, sd }
}

fn half(sd: f64) -> Dist {
    Dist::HalfNormal { sd }
}

fn effect(id: &str, columns: &[usize]) -> TestedEffect {
    TestedEffect {
        id: id.into(),
        columns: columns.to_vec(),
        jzs_terms: vec![],
    }
}

fn jzs_effect(id: &str, columns: &[usize], terms: &[&str]) -> TestedEffect {
    TestedEffect {
        id: id.into(),
        columns: columns.to_vec(),
        jzs_terms: terms.iter().map(|s| s.to_string()).collect(),
    }
}

fn collapsed(id: &str, aggregation: Aggregation, random: Vec<RandomTerms>) -> SbcAnalysis {
    SbcAnalysis {
        id: id.into(),
        aggregation,
        model: AnalysisModel::Collapsed { random },
    }
}

fn jzs(id: &str, aggregation: Aggregation, terms: Vec<JzsTerm>) -> SbcAnalysis {
    SbcAnalysis {
        id: id.into(),
        aggregation,
        model: AnalysisModel::Jzs { terms },
    }
}

fn subj(columns: &[usize]) -> RandomTerms {
    RandomTerms {
        grouping: Grouping::Subject,
        columns: columns.to_vec(),
    }
}

fn item(columns: &[usize]) -> RandomTerms {
    RandomTerms {
        grouping: Grouping::Item,
        columns: columns.to_vec(),
    }
}

fn settings(n_sims: usize, prior_p1: f64, sweep: Option<SbcSweep>) -> SbcSettings {
    SbcSettings {
        n_sims,
        prior_p1,
        seed: 20_230_101,
        desk_factor: 1,
        sweep,
        empirical: false,
    }
}

fn pins_sd_subj(sd: &[Option<f64>]) -> ParamPins {
    ParamPins {
        sd_subj: sd.to_vec(),
        ..ParamPins::default()
    }
}

#[allow(clippy::too_many_arguments)]
fn lmm(
    name: &str,
    design: DesignSpec,
    contrasts: Vec<(String, ContrastScheme)>,
    family: Family,
    prior: PriorSpec,
    subj_columns: Vec<usize>,
    item_columns: Vec<usize>,
    pins: ParamPins,
    effects: Vec<TestedEffect>,
    analyses: Vec<SbcAnalysis>,
    sbc: SbcSettings,
) -> SbcScenario {
    SbcScenario {
        name: name.into(),
        design,
        contrasts,
        family,
        priors: GenerativePrior::Lmm {
            prior,
            subj_columns,
            item_columns,
        },
        pins,
        effects,
        analyses,
        sbc,
        mcmc: McmcConfig::default(),
        bridge: BridgeConfig::default(),
        jzs: JzsConfig::default(),
    }
}

/// One three-level factor, slope SDs 90 and 10.
fn sim1_1(sd_prior: f64, desk: bool) -> SbcScenario {
    let (n_subj, n_rep, runs) = if desk { (10, 5, 100) } else { (20, 10, 250) };
    let scheme = ContrastScheme::new(ContrastKind::TreatmentGrandMean).with_labels(&["c2vs1", "c3vs1"]);
    lmm(
        if sd_prior == 150.0 { "sim1_1" } else { "sim1_1_prior50" },
        crossed(vec![FactorSpec::numbered("F", 3)], n_subj, n_rep),
        vec![("F".into(), scheme)],
        Family::Normal,
        PriorSpec {
            intercept: normal(200.0, 20.0),
            contrasts: normal(0.0, 20.0),
            sd_random: half(sd_prior),
            sigma: half(20.0),
            lkj_eta: 2.0,
        },
        vec![0, 1, 2],
        vec![],
        pins_sd_subj(&[None, Some(90.0), Some(10.0)]),
        vec![effect("c2vs1", &[1]), effect("c3vs1", &[2])],
        vec![
            collapsed("aggregated", Aggregation::BySubject, vec![subj(&[0])]),
            collapsed("non_aggregated", Aggregation::None, vec![subj(&[0, 1, 2])]),
        ],
        settings(runs, 0.5, None),
    )
}

fn pit_prior(sigma: f64) -> PriorSpec {
    PriorSpec {
        intercept: normal(5.0, 5.0),
        contrasts: normal(0.0, 2.0),
        sd_random: half(10.0),
        sigma: half(sigma),
        lkj_eta: 2.0,
    }
}

/// Pavlovian-instrumental transfer, three stimulus values.
fn pit3(omnibus: bool, desk: bool) -> SbcScenario {
    let runs = if desk { 100 } else { 500 };
    let scheme = ContrastScheme::new(ContrastKind::TreatmentGrandMean).with_labels(&["c2vs1", "c3vs1"]);
    let effects = if omnibus {
        vec![effect("omnibus", &[1, 2])]
    } else {
        vec![effect("c2vs1", &[1]), effect("c3vs1", &[2])]
    };
    lmm(
        if omnibus { "sim1_5" } else { "sim1_2" },
        crossed(vec![FactorSpec::numbered("F", 3)], 15, 3),
        vec![("F".into(), scheme)],
        Family::Normal,
        pit_prior(10.0),
        vec![0, 1, 2],
        vec![],
        pins_sd_subj(&[None, Some(10.0), Some(0.0)]),
        effects,
        vec![
            collapsed("aggregated", Aggregation::BySubject, vec![subj(&[0])]),
            collapsed("non_aggregated", Aggregation::None, vec![subj(&[0, 1, 2])]),
        ],
        settings(runs, 0.5, None),
    )
}

/// Five stimulus values, each compared with the 0 € reference.
fn pit5(omnibus: bool, desk: bool) -> SbcScenario {
    let runs = if desk { 60 } else { 200 };
    let factor = FactorSpec {
        name: "V".into(),
        levels: ["0", "-2", "-1", "+1", "+2"].iter().map(|s| s.to_string()).collect(),
        within_subject: true,
        within_item: true,
    };
    let scheme = ContrastScheme::new(ContrastKind::TreatmentGrandMean).with_labels(&["m2vs0", "m1vs0", "p1vs0", "p2vs0"]);
    let effects = if omnibus {
        vec![effect("omnibus", &[1, 2, 3, 4])]
    } else {
        vec![
            effect("m2vs0", &[1]),
            effect("m1vs0", &[2]),
            effect("p1vs0", &[3]),
            effect("p2vs0", &[4]),
        ]
    };
    lmm(
        if omnibus { "sim1_6" } else { "sim1_3" },
        crossed(vec![factor], 10, 3),
        vec![("V".into(), scheme)],
        Family::Normal,
        pit_prior(5.0),
        vec![0, 1, 2, 3, 4],
        vec![],
        pins_sd_subj(&[None, Some(0.1), Some(2.0), Some(2.0), Some(10.0)]),
        effects,
        vec![
            collapsed("aggregated", Aggregation::BySubject, vec![subj(&[0])]),
            collapsed("non_aggregated", Aggregation::None, vec![subj(&[0, 1, 2, 3, 4])]),
        ],
        settings(runs, 0.5, None),
    )
}

fn half_coded(name: &str, labels: [&str; 2]) -> (FactorSpec, (String, ContrastScheme)) {
    let f = FactorSpec {
        name: name.into(),
        levels: labels.iter().map(|s| s.to_string()).collect(),
        within_subject: true,
        within_item: true,
    };
    let scheme = ContrastScheme::hypotheses(vec![vec![-1.0, 1.0]]).with_labels(&[name]);
    (f, (name.into(), scheme))
}

fn two_step_prior() -> PriorSpec {
    PriorSpec {
        intercept: normal(0.7, 0.1),
        contrasts: normal(0.0, 0.2),
        sd_random: half(0.2),
        sigma: half(0.5),
        lkj_eta: 2.0,
    }
}

/// Reward × transition, coded ±0.5.
fn two_step(desk: bool) -> SbcScenario {
    let runs = if desk { 60 } else { 200 };
    let (a, ca) = half_coded("reward", ["no", "yes"]);
    let (b, cb) = half_coded("transition", ["rare", "common"]);
    lmm(
        "sim1_4",
        crossed(vec![a, b], 10, 5),
        vec![ca, cb],
        Family::Normal,
        two_step_prior(),
        vec![0, 1, 2, 3],
        vec![],
        pins_sd_subj(&[None, Some(0.0), Some(0.0), Some(0.4)]),
        vec![effect("reward", &[1]), effect("transition", &[2]), effect("interaction", &[3])],
        vec![
            collapsed("aggregated", Aggregation::BySubject, vec![subj(&[0])]),
            collapsed("aggregated_slopes", Aggregation::BySubject, vec![subj(&[0, 1, 2])]),
            collapsed("non_aggregated", Aggregation::None, vec![subj(&[0, 1, 2, 3])]),
        ],
        settings(runs, 0.5, None),
    )
}

fn jzs_scenario(
    name: &str,
    design: DesignSpec,
    contrasts: Vec<(String, ContrastScheme)>,
    terms: Vec<JzsSimTerm>,
    effects: Vec<TestedEffect>,
    analyses: Vec<SbcAnalysis>,
    sbc: SbcSettings,
) -> SbcScenario {
    SbcScenario {
        name: name.into(),
        design,
        contrasts,
        family: Family::Normal,
        priors: GenerativePrior::Jzs { terms },
        pins: ParamPins::default(),
        effects,
        analyses,
        sbc,
        mcmc: McmcConfig::default(),
        bridge: BridgeConfig::default(),
        jzs: JzsConfig::default(),
    }
}

fn sim_term(term: JzsTerm, column_scales: Option<Vec<f64>>) -> JzsSimTerm {
    JzsSimTerm { term, column_scales }
}

/// Default-prior omnibus test of one three-level factor.
fn jzs_f3(spherical: bool, desk: bool) -> SbcScenario {
    let runs = if desk { 200 } else { 500 };
    let sa = if spherical { None } else { Some(vec![0.1, 10.0]) };
    let terms = vec![
        sim_term(JzsTerm::fixed("A", &[0], 0.5), None),
        sim_term(JzsTerm::random("subj", Grouping::Subject, &[], 1.0), None),
        sim_term(JzsTerm::random("subj:A", Grouping::Subject, &[0], 1.0), sa),
    ];
    let base = vec![JzsTerm::fixed("A", &[0], 0.5), JzsTerm::random("subj", Grouping::Subject, &[], 1.0)];
    let mut full = base.clone();
    full.push(JzsTerm::random("subj:A", Grouping::Subject, &[0], 1.0));
    jzs_scenario(
        if spherical { "sim1_7_spherical" } else { "sim1_7" },
        crossed(vec![FactorSpec::numbered("A", 3)], 30, 3),
        vec![("A".into(), ContrastScheme::new(ContrastKind::HelmertScaled))],
        terms,
        vec![jzs_effect("A", &[1, 2], &["A"])],
        vec![
            jzs("aggregated", Aggregation::BySubject, base),
            jzs("non_aggregated", Aggregation::None, full),
        ],
        settings(runs, 0.5, None),
    )
}

/// Default-prior 2 × 2 design with small main-effect and large interaction
/// slope scales.
fn jzs_2x2(spherical: bool, desk: bool) -> SbcScenario {
    let runs = if desk { 300 } else { 1000 };
    let (small, large) = if spherical { (1.0, 1.0) } else { (0.001, 1.0) };
    let fixed = || {
        vec![
            JzsTerm::fixed("A", &[0], 0.5),
            JzsTerm::fixed("B", &[1], 0.5),
            JzsTerm::fixed("A:B", &[0, 1], 0.5),
            JzsTerm::random("subj", Grouping::Subject, &[], 1.0),
        ]
    };
    let sa = |s: f64| JzsTerm::random("subj:A", Grouping::Subject, &[0], s);
    let sb = |s: f64| JzsTerm::random("subj:B", Grouping::Subject, &[1], s);
    let sab = |s: f64| JzsTerm::random("subj:A:B", Grouping::Subject, &[0, 1], s);
    let mut terms: Vec<JzsSimTerm> = fixed().into_iter().map(|t| sim_term(t, None)).collect();
    terms.extend([sim_term(sa(small), None), sim_term(sb(small), None), sim_term(sab(large), None)]);
    let mut slopes = fixed();
    slopes.extend([sa(1.0), sb(1.0)]);
    let mut full = slopes.clone();
    full.push(sab(1.0));
    jzs_scenario(
        if spherical { "sim1_8_spherical" } else { "sim1_8" },
        crossed(vec![FactorSpec::numbered("A", 2), FactorSpec::numbered("B", 2)], 30, 4),
        vec![
            ("A".into(), ContrastScheme::new(ContrastKind::HelmertScaled)),
            ("B".into(), ContrastScheme::new(ContrastKind::HelmertScaled)),
        ],
        terms,
        vec![
            jzs_effect("A", &[1], &["A"]),
            jzs_effect("B", &[2], &["B"]),
            jzs_effect("A:B", &[3], &["A:B"]),
        ],
        vec![
            jzs("aggregated", Aggregation::BySubject, fixed()),
            jzs("aggregated_slopes", Aggregation::BySubject, slopes),
            jzs("non_aggregated", Aggregation::None, full),
        ],
        settings(runs, 0.5, None),
    )
}

/// Reading-time study with crossed subjects and items; the item slope SD is
/// swept from 0 to 0.5.
fn gibson_wu_sbc(desk: bool) -> SbcScenario {
    let runs = if desk { 60 } else { 125 };
    lmm(
        "sim2_1",
        gibson_wu_design(),
        vec![("X".into(), ContrastScheme::new(ContrastKind::Sum))],
        Family::Lognormal,
        PriorSpec {
            intercept: normal(6.0, 0.6),
            contrasts: normal(0.0, 0.1),
            sd_random: half(0.1),
            sigma: half(0.5),
            lkj_eta: 2.0,
        },
        vec![0, 1],
        vec![0, 1],
        ParamPins::default(),
        vec![effect("X", &[1])],
        vec![
            collapsed("aggregated", Aggregation::BySubject, vec![subj(&[0])]),
            collapsed("non_aggregated", Aggregation::None, vec![subj(&[0, 1]), item(&[0, 1])]),
        ],
        settings(
            runs,
            0.2,
            Some(SbcSweep {
                target: SweepTarget::LmmSd {
                    grouping: Grouping::Item,
                    positions: vec![1],
                },
                lo: 0.0,
                hi: 0.5,
            }),
        ),
    )
}

/// Default-prior analysis of a latin-square design with crossed subjects and
/// items; the item-slope prior scale is swept from 0 to 1.
fn jzs_items(levels: usize, desk: bool) -> SbcScenario {
    let runs = if desk { 100 } else { 500 };
    let design = if levels == 2 {
        DesignSpec { n_rep: 1, ..gibson_wu_design() }
    } else {
        DesignSpec {
            factors: vec![FactorSpec::numbered("X", levels)],
            n_subj: 40,
            n_item: 20,
            n_rep: 1,
            assignment: Assignment::LatinSquare,
        }
    };
    let base = vec![JzsTerm::fixed("X", &[0], 0.5), JzsTerm::random("subj", Grouping::Subject, &[], 1.0)];
    let mut full = base.clone();
    full.extend([
        JzsTerm::random("item", Grouping::Item, &[], 1.0),
        JzsTerm::random("subj:X", Grouping::Subject, &[0], 1.0),
        JzsTerm::random("item:X", Grouping::Item, &[0], 1.0),
    ]);
    let terms = full.iter().cloned().map(|t| sim_term(t, None)).collect();
    let columns: Vec<usize> = (1..levels).collect();
    jzs_scenario(
        if levels == 2 { "sim2_2" } else { "sim2_3" },
        design,
        vec![("X".into(), ContrastScheme::new(ContrastKind::HelmertScaled))],
        terms,
        vec![jzs_effect("X", &columns, &["X"])],
        vec![
            jzs("aggregated", Aggregation::BySubject, base),
            jzs("non_aggregated", Aggregation::None, full),
        ],
        settings(
            runs,
            0.2,
            Some(SbcSweep {
                target: SweepTarget::JzsScale { term: "item:X".into() },
                lo: 0.0,
                hi: 1.0,
            }),
        ),
    )
}

/// 2 × 2 latin square with 16 subjects and 8 items; every item slope SD is
/// swept from 0 to 0.5.
fn items_2x2(desk: bool) -> SbcScenario {
    let runs = if desk { 60 } else { 200 };
    let (a, ca) = half_coded("A", ["a1", "a2"]);
    let (b, cb) = half_coded("B", ["b1", "b2"]);
    lmm(
        "sim2_4",
        DesignSpec {
            factors: vec![a, b],
            n_subj: 16,
            n_item: 8,
            n_rep: 1,
            assignment: Assignment::LatinSquare,
        },
        vec![ca, cb],
        Family::Normal,
        two_step_prior(),
        vec![0, 1, 2, 3],
        vec![0, 1, 2, 3],
        ParamPins::default(),
        vec![effect("A", &[1]), effect("B", &[2]), effect("A:B", &[3])],
        vec![
            collapsed("aggregated", Aggregation::BySubject, vec![subj(&[0])]),
            collapsed("non_aggregated", Aggregation::None, vec![subj(&[0, 1, 2, 3]), item(&[0, 1, 2, 3])]),
        ],
        settings(
            runs,
            0.2,
            Some(SbcSweep {
                target: SweepTarget::LmmSd {
                    grouping: Grouping::Item,
                    positions: vec![1, 2, 3],
                },
                lo: 0.0,
                hi: 0.5,
            }),
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::build_trial_table;

    #[test]
    fn every_preset_validates_at_both_scales() {
        for name in SBC_PRESETS {
            for scale in [Scale::Full, Scale::Desk] {
                let sc = sbc_preset(name, scale).unwrap();
                build_trial_table(&sc.design).unwrap();
            }
        }
        for name in FREQ_PRESETS {
            freq_preset(name).unwrap().validate().unwrap();
        }
        assert!(sbc_preset("nope", Scale::Full).is_err());
    }

    #[test]
    fn row_counts_match_the_designs() {
        assert_eq!(build_trial_table(&sbc_preset("sim1_1", Scale::Full).unwrap().design).unwrap().len(), 600);
        assert_eq!(build_trial_table(&gibson_wu_design()).unwrap().len(), 672);
        assert_eq!(build_trial_table(&sbc_preset("sim2_4", Scale::Full).unwrap().design).unwrap().len(), 128);
        assert_eq!(build_trial_table(&sbc_preset("sim1_8", Scale::Full).unwrap().design).unwrap().len(), 480);
    }

    #[test]
    fn run_counts() {
        let runs = |n, s| sbc_preset(n, s).unwrap().sbc.runs();
        assert_eq!(runs("sim1_1", Scale::Full), 250);
        assert_eq!(runs("sim1_1", Scale::Desk), 100);
        assert_eq!(runs("sim2_1", Scale::Full), 125);
        assert_eq!(runs("sim2_1", Scale::Desk), 60);
        assert_eq!(runs("sim1_8", Scale::Desk), 300);
        let sc = sbc_preset("sim2_1", Scale::Full).unwrap();
        assert_eq!(sc.sbc.prior_p1, 0.2);
        assert!((sc.sbc.sweep_value(124).unwrap() - 0.5).abs() < 1e-12);
        assert!((sc.sbc.sweep_value(1).unwrap() - 0.5 / 124.0).abs() < 1e-12);
    }
}
