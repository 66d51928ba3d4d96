use calibra_core::bridge::{bridge_logml, posterior_model_prob, BridgeConfig};
use calibra_core::collapsed::{run_mcmc, CollapsedModel, ModelSpec};
use calibra_core::jzs::{JzsModel, JzsConfig};
use calibra_core::mcmc::{sample, McmcConfig};
use calibra_core::sbc::{simulate_dataset, AnalysisModel, GenerativePrior};
use calibra_core::scenarios::{sbc_preset, Scale, SBC_PRESETS};
use calibra_core::{aggregate, expand_design, RandomRequest};
use proptest::prelude::*;

/// Correlated two-dimensional target with a non-Gaussian tail.
fn target(u: &[f64]) -> f64 {
    let (a, b) = (u[0] - 0.4, u[1] + 0.2);
    -0.5 * (a * a - 1.2 * a * b + b * b) / 0.64 - 0.05 * a.powi(4)
}

fn log_ml(seed: u64, f: &dyn Fn(&[f64]) -> f64, start: &[f64]) -> f64 {
    let draws = sample(&f, start, &McmcConfig::default(), seed).unwrap();
    bridge_logml(&draws, &f, &BridgeConfig::default(), seed ^ 0xABC).unwrap().log_ml
}

#[test]
fn bridge_is_invariant_to_affine_reparameterisation() {
    let base = log_ml(1, &target, &[0.0, 0.0]);
    // u = A v + b with A = [[2, 0.5], [0, 0.3]], |det A| = 0.6.
    let moved = |v: &[f64]| {
        let u = [2.0 * v[0] + 0.5 * v[1] + 1.0, 0.3 * v[1] - 2.0];
        target(&u) + 0.6f64.ln()
    };
    let other = log_ml(2, &moved, &[0.0, 6.0]);
    assert!((base - other).abs() < 0.05, "{base} vs {other}");
}

#[test]
fn bridge_log_bf_is_antisymmetric() {
    let wide = |u: &[f64]| target(u) + 0.3 * u[0];
    let reps: Vec<(f64, f64)> = (0..6).map(|r| (log_ml(10 + r, &target, &[0.0, 0.0]), log_ml(20 + r, &wide, &[0.0, 0.0]))).collect();
    let bf12: Vec<f64> = reps.iter().map(|(a, b)| a - b).collect();
    let m = bf12.iter().sum::<f64>() / bf12.len() as f64;
    let sd = (bf12.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (bf12.len() - 1) as f64).sqrt();
    let bf21 = log_ml(99, &wide, &[0.0, 0.0]) - log_ml(98, &target, &[0.0, 0.0]);
    assert!((bf12[0] + bf21).abs() <= 2.0 * sd.max(1e-3), "{} vs {bf21} (sd {sd})", bf12[0]);
}

proptest! {
    #[test]
    fn posterior_probability_is_monotone(lb in -30.0f64..30.0, d in 0.01f64..5.0, p in 0.01f64..0.98, dp in 0.001f64..0.01) {
        let a = posterior_model_prob(lb.exp(), p);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(posterior_model_prob((lb + d).exp(), p) >= a);
        prop_assert!(posterior_model_prob(lb.exp(), p + dp) >= a);
        let bf = lb.exp();
        prop_assert!((a - bf * p / (bf * p + 1.0 - p)).abs() < 1e-12);
    }
}

#[test]
fn mcmc_acceptance_on_every_collapsed_preset() {
    for name in SBC_PRESETS {
        let sc = sbc_preset(name, Scale::Desk).unwrap();
        let GenerativePrior::Lmm { prior, .. } = &sc.priors else { continue };
        let run = simulate_dataset(&sc, 0).unwrap();
        for a in &sc.analyses {
            let AnalysisModel::Collapsed { random } = &a.model else { continue };
            let view = aggregate(&run.data, a.aggregation).unwrap();
            let x = expand_design(&view.trials, &sc.contrasts, &RandomRequest::default()).unwrap().x;
            let spec = ModelSpec {
                fixed_columns: (0..x.ncols()).collect(),
                random: random.clone(),
                priors: prior.clone(),
                family: sc.family,
            };
            let model = CollapsedModel::new(&view, &x, &spec).unwrap();
            let draws = run_mcmc(&model, &sc.mcmc, 3).unwrap();
            for &r in &draws.accept_rate {
                assert!((0.15..=0.5).contains(&r), "{name}/{}: acceptance {r}", a.id);
            }
        }
    }
}

#[test]
fn jzs_model_against_itself_is_even() {
    let sc = sbc_preset("sim1_8", Scale::Desk).unwrap();
    let run = simulate_dataset(&sc, 1).unwrap();
    let AnalysisModel::Jzs { terms } = &sc.analyses[2].model else { panic!() };
    let m = JzsModel::new(&run.data, terms).unwrap();
    let cfg = JzsConfig::default();
    let a = m.log_evidence(&cfg, 5).unwrap().log_ml;
    let b = m.log_evidence(&cfg, 5).unwrap().log_ml;
    assert_eq!(a - b, 0.0);
}
