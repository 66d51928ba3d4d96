//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Failures are reported but only turn into a non-zero exit status when
//! `ACCEPTANCE_STRICT` is set.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use calibra_core::bridge::{bridge_logml, BridgeConfig};
use calibra_core::collapsed::{CollapsedModel, Grouping, ModelSpec, Phi, RandomTerms};
use calibra_core::freq::{alpha_power_sim, ErrorMode, ErrorRateCurve};
use calibra_core::jzs::{qmatrix, ttest_log_bf};
use calibra_core::mcmc::{sample, McmcConfig};
use calibra_core::priors::{Dist, PriorSpec};
use calibra_core::sbc::{calibration_tests, exact_stub_sbc, record_rows, run_sbc, summarize, CalibrationSummary, CellSummary, ConjugateToy, RecordRow};
use calibra_core::scenarios::{freq_preset, sbc_preset, Scale};
use calibra_core::simulate::{simulate, Family, LmmParams};
use calibra_core::{build_trial_table, expand_design, Assignment, ContrastKind, ContrastScheme, DesignSpec, FactorSpec, RandomRequest};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn contains_half(c: &CellSummary) -> bool {
    c.ci_lo <= 0.5 && 0.5 <= c.ci_hi
}

fn fmt_cell(c: &CellSummary) -> String {
    format!("{}/{} {:.3} [{:.3}, {:.3}]", c.analysis_id, c.effect_id, c.mean, c.ci_lo, c.ci_hi)
}

fn desk_summary(name: &str) -> anyhow::Result<(Vec<RecordRow>, CalibrationSummary, f64)> {
    let sc = sbc_preset(name, Scale::Desk)?;
    let rows = record_rows(&run_sbc(&sc)?);
    let s = summarize(&rows, sc.sbc.prior_p1);
    Ok((rows, s, sc.sbc.prior_p1))
}

fn cell<'a>(s: &'a CalibrationSummary, a: &str, e: &str) -> anyhow::Result<&'a CellSummary> {
    s.cell(a, e).ok_or_else(|| anyhow::anyhow!("no cell {a}/{e}"))
}

fn c1_exact_stub() -> anyhow::Result<Outcome> {
    let p = exact_stub_sbc(ConjugateToy { n: 10, tau: 1.0 }, 500, 0.5, 1)?;
    let m = p.iter().sum::<f64>() / p.len() as f64;
    Ok(outcome((m - 0.5).abs() < 0.03, format!("500 runs, mean post_p1 {m:.4}")))
}

fn c2_sim1_1() -> anyhow::Result<Outcome> {
    let (_, s, _) = desk_summary("sim1_1")?;
    let a90 = cell(&s, "aggregated", "c2vs1")?;
    let a10 = cell(&s, "aggregated", "c3vs1")?;
    let n90 = cell(&s, "non_aggregated", "c2vs1")?;
    let n10 = cell(&s, "non_aggregated", "c3vs1")?;
    let pass = a90.mean > 0.55 && a90.ci_lo > 0.5 && a10.mean < 0.45 && a10.ci_hi < 0.5 && contains_half(n90) && contains_half(n10);
    Ok(outcome(pass, [a90, a10, n90, n10].map(fmt_cell).join("; ")))
}

fn c3_sim1_5() -> anyhow::Result<Outcome> {
    let (_, s, _) = desk_summary("sim1_5")?;
    let c = cell(&s, "aggregated", "omnibus")?;
    Ok(outcome(contains_half(c), fmt_cell(c)))
}

fn c4_sim1_7() -> anyhow::Result<Outcome> {
    let (_, s, _) = desk_summary("sim1_7")?;
    let agg = cell(&s, "aggregated", "A")?;
    let non = cell(&s, "non_aggregated", "A")?;
    let (_, sp, _) = desk_summary("sim1_7_spherical")?;
    let sph = cell(&sp, "non_aggregated", "A")?;
    let pass = agg.mean < 0.45 && (non.mean - 0.5).abs() < (agg.mean - 0.5).abs() && contains_half(sph);
    Ok(outcome(pass, format!("{}; {}; spherical {}", fmt_cell(agg), fmt_cell(non), fmt_cell(sph))))
}

fn c5_sim1_8() -> anyhow::Result<Outcome> {
    let (_, s, _) = desk_summary("sim1_8")?;
    let aa = cell(&s, "aggregated", "A")?;
    let ab = cell(&s, "aggregated", "B")?;
    let ai = cell(&s, "aggregated", "A:B")?;
    let na = cell(&s, "non_aggregated", "A")?;
    let nb = cell(&s, "non_aggregated", "B")?;
    let ni = cell(&s, "non_aggregated", "A:B")?;
    let pass = aa.mean < 0.45 && ab.mean < 0.45 && ai.mean > 0.55 && contains_half(na) && contains_half(nb) && ni.mean < 0.5;
    Ok(outcome(pass, [aa, ab, ai, na, nb, ni].map(fmt_cell).join("; ")))
}

fn c6_sim2_1() -> anyhow::Result<Outcome> {
    let sc = sbc_preset("sim2_1", Scale::Desk)?;
    let rows = record_rows(&run_sbc(&sc)?);
    let sweep = |r: usize| sc.sbc.sweep_value(r).unwrap_or(f64::NAN);
    let t = calibration_tests(&rows, sc.sbc.prior_p1, &[std::f64::consts::SQRT_2 / 2.0], Some(&sweep))?;
    let get = |a: &str| {
        t.sweep
            .iter()
            .find(|s| s.analysis_id == a && s.effect_id == "X")
            .ok_or_else(|| anyhow::anyhow!("no sweep test for {a}"))
    };
    let agg = get("aggregated")?;
    let non = get("non_aggregated")?;
    let pass = agg.logistic.slope > 0.0 && agg.bf10 > 3.0 && non.bf10 < 3.0;
    Ok(outcome(
        pass,
        format!(
            "{} runs; aggregated slope {:.3} BF10 {:.2}; non_aggregated slope {:.3} BF10 {:.2}",
            sc.sbc.runs(),
            agg.logistic.slope,
            agg.bf10,
            non.logistic.slope,
            non.bf10
        ),
    ))
}

fn rates(curves: &[ErrorRateCurve], a: &str, e: &str) -> anyhow::Result<Vec<(f64, f64, f64, f64)>> {
    let c = curves
        .iter()
        .find(|c| c.analysis == a && c.effect == e)
        .ok_or_else(|| anyhow::anyhow!("no curve {a}/{e}"))?;
    Ok(c.points.iter().map(|p| (p.sd_true, p.rate(), p.ci_lo, p.ci_hi)).collect())
}

fn c7_appendix_a() -> anyhow::Result<Outcome> {
    let curves = alpha_power_sim(&freq_preset("appendix_a")?, ErrorMode::Alpha, 1000, 7)?;
    let a10 = rates(&curves, "aggregated", "c3vs1")?[0].1;
    let a90 = rates(&curves, "aggregated", "c2vs1")?[0].1;
    let n90 = rates(&curves, "non_aggregated", "c2vs1")?[0].1;
    let n10 = rates(&curves, "non_aggregated", "c3vs1")?[0].1;
    let ok = |r: f64| (0.02..=0.08).contains(&r);
    let pass = a10 < 0.02 && a90 > 0.10 && ok(n90) && ok(n10);
    Ok(outcome(
        pass,
        format!("aggregated SD10 {a10:.3} SD90 {a90:.3}; non_aggregated SD10 {n10:.3} SD90 {n90:.3}"),
    ))
}

fn c8_appendix_e() -> anyhow::Result<Outcome> {
    let mut sc = freq_preset("appendix_e")?;
    if let Some(s) = sc.sweep.as_mut() {
        s.grid = vec![0.0, 0.25, 0.5];
    }
    let curves = alpha_power_sim(&sc, ErrorMode::Alpha, 500, 8)?;
    let agg = rates(&curves, "aggregated", "X")?;
    let non = rates(&curves, "non_aggregated", "X")?;
    let flat = non.iter().all(|&(_, _, lo, hi)| lo <= 0.05 && 0.05 <= hi);
    let pass = agg[2].1 >= 3.0 * agg[0].1 && agg[2].1 > 0.0 && flat;
    let show = |v: &[(f64, f64, f64, f64)]| v.iter().map(|p| format!("{:.2}:{:.3}", p.0, p.1)).collect::<Vec<_>>().join(" ");
    Ok(outcome(pass, format!("aggregated {}; non_aggregated {}", show(&agg), show(&non))))
}

/// Two-condition design, random subject intercepts and slopes.
fn small_collapsed_case(random: bool) -> anyhow::Result<(calibra_core::Dataset, DMatrix<f64>, ModelSpec)> {
    let design = DesignSpec {
        factors: vec![FactorSpec::numbered("a", 2)],
        n_subj: 4,
        n_item: 0,
        n_rep: 2,
        assignment: Assignment::FullCrossing,
    };
    let trials = build_trial_table(&design)?;
    let schemes = vec![("a".to_string(), ContrastScheme::new(ContrastKind::Sum))];
    let req = RandomRequest { subj: vec![0, 1], item: vec![] };
    let bundle = expand_design(&trials, &schemes, &req)?;
    let params = LmmParams {
        beta: vec![1.0, 0.4],
        sd_subj: vec![0.5, 0.3],
        sd_item: vec![],
        rho_subj: DMatrix::identity(2, 2),
        rho_item: DMatrix::identity(0, 0),
        sigma: 0.6,
        family: Family::Normal,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = simulate(&trials, &bundle, &params, false, &mut rng)?;
    let spec = ModelSpec {
        fixed_columns: vec![0, 1],
        random: if random { vec![RandomTerms { grouping: Grouping::Subject, columns: vec![0, 1] }] } else { vec![] },
        priors: PriorSpec {
            intercept: Dist::Normal { mean: 1.0, sd: 0.5 },
            contrasts: Dist::Normal { mean: 0.0, sd: 0.5 },
            sd_random: Dist::HalfNormal { sd: 1.0 },
            sigma: Dist::HalfNormal { sd: 1.0 },
            lkj_eta: 2.0,
        },
        family: Family::Normal,
    };
    Ok((data, bundle.x, spec))
}

fn log_mean_exp(v: &[f64]) -> (f64, f64, f64) {
    let c = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = v.iter().map(|x| (x - c).exp()).collect();
    let n = w.len() as f64;
    let m = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (c, m, (var / n).sqrt())
}

/// Log likelihood averaged over prior draws of the fixed effects and the
/// per-subject effects, against the closed form.
fn oracle_collapsed() -> anyhow::Result<(bool, String)> {
    let (data, x, spec) = small_collapsed_case(true)?;
    let model = CollapsedModel::new(&data, &x, &spec)?;
    let w = 0.3f64;
    let phi = Phi { sds: vec![0.5, 0.3], corr_params: vec![w], log_sigma: 0.6f64.ln() };
    let exact = model.loglik(&phi)?;
    let rho = w.tanh();
    let (sd, sigma) = (&phi.sds, phi.sigma());
    let subj: Vec<usize> = data.trials.subj.iter().map(|s| s.unwrap()).collect();
    let ns = data.trials.n_subj;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = 400_000;
    let mut ll = Vec::with_capacity(draws);
    let mut u = vec![[0.0f64; 2]; ns];
    for _ in 0..draws {
        let b0 = 1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal);
        let b1 = 0.5 * rng.sample::<f64, _>(StandardNormal);
        for us in u.iter_mut() {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            *us = [sd[0] * z0, sd[1] * (rho * z0 + (1.0 - rho * rho).sqrt() * z1)];
        }
        let mut l = 0.0;
        for i in 0..data.len() {
            let s = subj[i];
            let mu = x[(i, 0)] * (b0 + u[s][0]) + x[(i, 1)] * (b1 + u[s][1]);
            let r = (data.y[i] - mu) / sigma;
            l += -0.5 * r * r - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        ll.push(l);
    }
    let (c, m, se) = log_mean_exp(&ll);
    let target = (exact - c).exp();
    let pass = (target - m).abs() < 3.0 * se;
    Ok((pass, format!("collapsed {exact:.4} vs MC {:.4} (|d|/se {:.2})", c + m.ln(), (target - m).abs() / se)))
}

/// Bridge estimate for a residual-SD-only model against a trapezoid
/// integral of the unnormalised posterior over log sigma.
fn oracle_bridge() -> anyhow::Result<(bool, String)> {
    let (data, x, spec) = small_collapsed_case(false)?;
    let model = CollapsedModel::new(&data, &x, &spec)?;
    let q = |u: &[f64]| model.log_posterior(u);
    let (lo, hi, n) = (-12.0, 6.0, 200_000);
    let h = (hi - lo) / n as f64;
    let vals: Vec<f64> = (0..=n).map(|i| q(&[lo + i as f64 * h])).collect();
    let c = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = vals.iter().enumerate().map(|(i, v)| if i == 0 || i == n { 0.5 } else { 1.0 } * (v - c).exp()).sum();
    let truth = c + (s * h).ln();
    let draws = sample(&q, &model.default_start(), &McmcConfig::default(), 21)?;
    let r = bridge_logml(&draws, &q, &BridgeConfig::default(), 3)?;
    let d = (r.log_ml - truth).abs();
    Ok((d < 0.01, format!("bridge {:.4} vs quadrature {truth:.4}", r.log_ml)))
}

/// One-sample JZS t-test BF against an average over g = r²/z².
fn oracle_ttest() -> anyhow::Result<(bool, String)> {
    let (n, t, r) = (30usize, 2.5f64, std::f64::consts::SQRT_2 / 2.0);
    let exact = ttest_log_bf(t, n, r)?.exp();
    let nu = n as f64 - 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 1_000_000;
    let v: Vec<f64> = (0..draws)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let g = r * r / (z * z);
            let a = 1.0 + n as f64 * g;
            (-0.5 * a.ln() - (nu + 1.0) / 2.0 * ((1.0 + t * t / (a * nu)) / (1.0 + t * t / nu)).ln()).exp()
        })
        .collect();
    let m = v.iter().sum::<f64>() / draws as f64;
    let se = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws as f64 - 1.0) / draws as f64).sqrt();
    Ok(((exact - m).abs() < 3.0 * se, format!("t-test BF {exact:.4} vs MC {m:.4} ± {se:.4}")))
}

fn oracle_qmatrix() -> anyhow::Result<(bool, String)> {
    let mut worst = 0.0f64;
    for alpha in 2..=8 {
        let q = qmatrix(alpha)?;
        let a = alpha as f64;
        for i in 0..alpha {
            for j in 0..alpha - 1 {
                let sq: f64 = (0..alpha).map(|k| (if i == k { 1.0 } else { 0.0 } - 1.0 / a) * q[(k, j)]).sum();
                worst = worst.max((sq - q[(i, j)]).abs());
            }
        }
        for i in 0..alpha - 1 {
            for j in 0..alpha - 1 {
                let d: f64 = (0..alpha).map(|k| q[(k, i)] * q[(k, j)]).sum();
                worst = worst.max((d - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    Ok((worst < 1e-12, format!("qmatrix max error {worst:.1e}")))
}

fn c9_oracles() -> anyhow::Result<Outcome> {
    let parts = [oracle_collapsed()?, oracle_bridge()?, oracle_ttest()?, oracle_qmatrix()?];
    Ok(outcome(parts.iter().all(|p| p.0), parts.iter().map(|p| p.1.clone()).collect::<Vec<_>>().join("; ")))
}

fn sbc_digest(dir: &Path, scenario: &str, n_sims: usize, jobs: usize) -> anyhow::Result<String> {
    let status = Command::new(env!("CARGO_BIN_EXE_calibra"))
        .args(["sbc", "--scenario", scenario, "--scale", "desk", "--seed", "5", "--no-plots", "--quiet"])
        .args(["--n-sims", &n_sims.to_string(), "--jobs", &jobs.to_string()])
        .arg("--out")
        .arg(dir)
        .stdout(Stdio::null())
        .status()?;
    anyhow::ensure!(status.success(), "calibra sbc exited with {status}");
    let bytes = std::fs::read(dir.join("records.csv"))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn c10_determinism() -> anyhow::Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let mut details = Vec::new();
    let mut pass = true;
    for (scenario, n) in [("sim1_7", 24), ("sim1_1", 4)] {
        let a = sbc_digest(&tmp.path().join(format!("{scenario}_a")), scenario, n, 1)?;
        let b = sbc_digest(&tmp.path().join(format!("{scenario}_b")), scenario, n, 1)?;
        let c = sbc_digest(&tmp.path().join(format!("{scenario}_c")), scenario, n, 8)?;
        pass &= a == b && a == c;
        details.push(format!("{scenario}: {} {} {}", &a[..12], &b[..12], &c[..12]));
    }
    Ok(outcome(pass, details.join("; ")))
}

type Criterion = fn() -> anyhow::Result<Outcome>;

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("1 exact-BF stub recovers the prior", c1_exact_stub),
        ("2 sim1_1 desk: aggregation bias by slope SD", c2_sim1_1),
        ("3 sim1_5 desk: omnibus calibrated", c3_sim1_5),
        ("4 sim1_7 desk: JZS aggregated conservative", c4_sim1_7),
        ("5 sim1_8 desk: JZS 2x2 bias pattern", c5_sim1_8),
        ("6 sim2_1 desk: bias grows with item slope SD", c6_sim2_1),
        ("7 appendix_a: frequentist type I error", c7_appendix_a),
        ("8 appendix_e: type I error over item slope SD", c8_appendix_e),
        ("9 oracle equivalences", c9_oracles),
        ("10 determinism of records.csv", c10_determinism),
    ];
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(str::to_string).collect());
    let mut failed = 0;
    for (name, f) in criteria {
        let id = name.split(' ').next().unwrap_or_default();
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{} criterion {name} ({:.0}s): {detail}", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
