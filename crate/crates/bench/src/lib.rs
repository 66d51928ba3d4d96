//! Fixtures shared by the benchmarks: preset datasets and the models built
//! on them.

use calibra_core::collapsed::{CollapsedModel, ModelSpec};
use calibra_core::jzs::{JzsModel, JzsTerm};
use calibra_core::sbc::{simulate_dataset, AnalysisModel, GenerativePrior, SbcScenario};
use calibra_core::scenarios::{sbc_preset, Scale};
use calibra_core::{aggregate, expand_design, Dataset, RandomRequest};

pub fn scenario(name: &str) -> SbcScenario {
    sbc_preset(name, Scale::Desk).expect("preset")
}

/// Collapsed model of analysis `analysis` on run 0 of a preset.
pub fn collapsed_model(name: &str, analysis: &str) -> CollapsedModel {
    let sc = scenario(name);
    let GenerativePrior::Lmm { prior, .. } = &sc.priors else { panic!("{name} is not an LMM preset") };
    let a = sc.analyses.iter().find(|a| a.id == analysis).expect("analysis");
    let AnalysisModel::Collapsed { random } = &a.model else { panic!("{analysis} is not collapsed") };
    let data = simulate_dataset(&sc, 0).expect("simulate").data;
    let view = aggregate(&data, a.aggregation).expect("aggregate");
    let x = expand_design(&view.trials, &sc.contrasts, &RandomRequest::default()).expect("design").x;
    let spec = ModelSpec {
        fixed_columns: (0..x.ncols()).collect(),
        random: random.clone(),
        priors: prior.clone(),
        family: sc.family,
    };
    CollapsedModel::new(&view, &x, &spec).expect("model")
}

/// JZS data and terms of analysis `analysis` on run 0 of a preset.
pub fn jzs_case(name: &str, analysis: &str) -> (Dataset, Vec<JzsTerm>) {
    let sc = scenario(name);
    let a = sc.analyses.iter().find(|a| a.id == analysis).expect("analysis");
    let AnalysisModel::Jzs { terms } = &a.model else { panic!("{analysis} is not JZS") };
    let data = simulate_dataset(&sc, 0).expect("simulate").data;
    (aggregate(&data, a.aggregation).expect("aggregate"), terms.clone())
}

pub fn jzs_model(name: &str, analysis: &str) -> JzsModel {
    let (data, terms) = jzs_case(name, analysis);
    JzsModel::new(&data, &terms).expect("model")
}
