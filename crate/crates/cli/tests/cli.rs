use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn calibra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calibra")).args(args).env_remove("CALIBRA_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = calibra(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Rows of a CSV as header-keyed maps.
fn table(text: &str) -> Vec<HashMap<String, String>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    r.records().map(|rec| header.iter().cloned().zip(rec.unwrap().iter().map(String::from)).collect()).collect()
}

fn num(row: &HashMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

fn find<'a>(rows: &'a [HashMap<String, String>], pairs: &[(&str, &str)]) -> &'a HashMap<String, String> {
    rows.iter().find(|r| pairs.iter().all(|(k, v)| r[*k] == *v)).unwrap_or_else(|| panic!("no row {pairs:?}"))
}

#[test]
fn simulate_writes_the_preset_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    for (preset, rows) in [("sim1_1", 600), ("gibson_wu", 672)] {
        let out = dir.path().join(format!("{preset}.csv"));
        ok(&["simulate", "--scenario", preset, "--out", p(&out)]);
        assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), rows + 1, "{preset}");
    }
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"preset": "sim1_1", "colour": "red"}"#).unwrap();
    let out = dir.path().join("data.csv");
    assert_eq!(calibra(&["simulate", "--scenario", p(&bad), "--out", p(&out)]).status.code(), Some(2));
    assert!(!out.exists());
    assert_eq!(calibra(&["simulate", "--scenario", "no_such_preset", "--out", p(&out)]).status.code(), Some(2));
    assert!(!out.exists());
    let missing = dir.path().join("missing.csv");
    assert_eq!(calibra(&["bf", "--scenario", "sim1_1", "--data", p(&missing)]).status.code(), Some(2));
}

#[test]
fn bf_on_regenerated_three_level_data_favours_the_small_sd_contrast() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    ok(&["simulate", "--scenario", "appendix_a", "--mode", "power", "--seed", "3", "--out", p(&data)]);
    let out = ok(&["bf", "--scenario", "sim1_1", "--data", p(&data)]);
    let rows = table(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 4);
    let bf = |e: &str| num(find(&rows, &[("analysis_id", "non_aggregated"), ("effect_id", e)]), "log_bf10");
    assert!(bf("c3vs1") > bf("c2vs1"), "{} vs {}", bf("c3vs1"), bf("c2vs1"));
}

/// Two-condition normal data on the reading-study design analysed by both
/// pipelines after aggregation by subject.
fn two_pipeline_case(dir: &Path, effect: f64) -> (PathBuf, PathBuf) {
    let scenario = dir.join("scenario.json");
    fs::write(
        &scenario,
        r#"{
  "preset": "sim2_1",
  "family": "normal",
  "effects": [{"id": "X", "columns": [1], "jzs_terms": ["X"]}],
  "analyses": [
    {"id": "collapsed", "aggregation": "by-subject", "pipeline": "collapsed",
     "random": [{"grouping": "subject", "columns": [0]}]},
    {"id": "jzs", "aggregation": "by-subject", "pipeline": "jzs",
     "terms": [{"label": "X", "kind": "fixed", "factors": [0], "scale": 0.5},
               {"label": "subj", "kind": "random", "grouping": "subject", "factors": [], "scale": 1.0}]}
  ]
}"#,
    )
    .unwrap();
    let raw = dir.join("raw.csv");
    ok(&["simulate", "--scenario", "gibson_wu", "--out", p(&raw)]);
    let text = fs::read_to_string(&raw).unwrap();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut r = csv::Reader::from_reader(text.as_bytes());
    w.write_record(r.headers().unwrap()).unwrap();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    for rec in r.records() {
        let rec = rec.unwrap();
        let s: usize = rec[0].parse().unwrap();
        let c: usize = rec[2].parse().unwrap();
        let k = seen.entry((s, c)).or_default();
        *k += 1;
        let cell = if (s + c).is_multiple_of(2) { 0.1 } else { -0.1 };
        let y = 6.0 + 0.3 * (s as f64).sin() + cell + 0.05 * (*k as f64 - 4.5) + if c == 2 { effect } else { 0.0 };
        w.write_record([&rec[0], &rec[1], &rec[2], &y.to_string()]).unwrap();
    }
    let data = dir.join("data.csv");
    fs::write(&data, w.into_inner().unwrap()).unwrap();
    (scenario, data)
}

#[test]
fn pipelines_agree_on_a_large_effect() {
    let dir = tempfile::tempdir().unwrap();
    let (scenario, data) = two_pipeline_case(dir.path(), 0.15);
    let out = ok(&["bf", "--scenario", p(&scenario), "--data", p(&data), "--seed", "4"]);
    let rows = table(&String::from_utf8(out.stdout).unwrap());
    for a in ["collapsed", "jzs"] {
        let bf = num(find(&rows, &[("analysis_id", a), ("effect_id", "X")]), "bf10");
        assert!(bf > 1.0, "{a}: {bf}");
    }
}

#[test]
fn jzs_pipeline_on_equal_condition_means_favours_the_null() {
    let dir = tempfile::tempdir().unwrap();
    let (scenario, data) = two_pipeline_case(dir.path(), 0.0);
    let out = ok(&["bf", "--scenario", p(&scenario), "--data", p(&data), "--pipeline", "jzs"]);
    let rows = table(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 1);
    assert!(num(&rows[0], "bf10") < 1.0, "{:?}", rows[0]);
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn sbc_writes_one_row_per_run_analysis_and_effect() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim1_1");
    ok(&["sbc", "--scenario", "sim1_1", "--n-sims", "50", "--quiet", "--no-plots", "--out", p(&out)]);
    let rows = table(&fs::read_to_string(out.join("records.csv")).unwrap());
    assert_eq!(rows.len(), 50 * 2 * 2);
    assert_eq!(table(&fs::read_to_string(out.join("summary.csv")).unwrap()).len(), 4);
}

#[test]
fn sbc_reruns_have_identical_digests() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        ok(&["sbc", "--scenario", "sim1_8", "--n-sims", "6", "--seed", "12", "--jobs", jobs, "--quiet", "--out", p(&out)]);
        digest(&out.join("records.csv"))
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    assert_eq!(a, run("c", "3"));
}

#[test]
fn sweep_fit_rises_for_the_aggregated_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim2_1");
    ok(&["sbc", "--scenario", "sim2_1", "--n-sims", "30", "--quiet", "--out", p(&out)]);
    let fit = table(&fs::read_to_string(out.join("sweep_fit.csv")).unwrap());
    let slope = num(find(&fit, &[("analysis_id", "aggregated"), ("effect_id", "X")]), "slope");
    assert!(slope > 0.0, "{slope}");
    let svg = fs::read_to_string(out.join("sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("aggregated"));
}

#[test]
fn freq_alpha_rates_for_the_three_level_design() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("alpha");
    ok(&["freq", "--scenario", "appendix_a", "--mode", "alpha", "--n-sims", "1000", "--no-plots", "--out", p(&out)]);
    let rows = table(&fs::read_to_string(out.join("alpha_curves.csv")).unwrap());
    let rate = |a: &str, e: &str| num(find(&rows, &[("analysis", a), ("effect", e)]), "rate");
    assert!(rate("aggregated", "c3vs1") < 0.02, "{}", rate("aggregated", "c3vs1"));
    assert!(rate("aggregated", "c2vs1") > 0.10, "{}", rate("aggregated", "c2vs1"));
}

#[test]
fn freq_power_is_lost_by_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("power");
    ok(&["freq", "--scenario", "appendix_a", "--mode", "power", "--n-sims", "300", "--no-plots", "--out", p(&out)]);
    let rows = table(&fs::read_to_string(out.join("power_curves.csv")).unwrap());
    let rate = |a: &str| num(find(&rows, &[("analysis", a), ("effect", "c3vs1")]), "rate");
    assert!(rate("non_aggregated") > rate("aggregated"), "{} vs {}", rate("non_aggregated"), rate("aggregated"));
}

#[test]
fn freq_without_simulations_writes_an_empty_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    ok(&["freq", "--scenario", "appendix_a", "--n-sims", "0", "--out", p(&out)]);
    let text = fs::read_to_string(out.join("alpha_curves.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
}
