//! Batch runner for calibration experiments: scenario files in, CSV tables
//! and SVG plots out.

pub mod scenario;
pub mod svg;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::Context;
use calibra_core::freq::{alpha_power_sim, write_curves_csv, ErrorMode, ErrorRateCurve};
use calibra_core::sbc::{
    analyse_dataset, calibration_tests, default_scale_grid, read_records_csv, record_rows, run_sbc_with,
    simulate_dataset, summarize, write_records_csv, write_summary_csv, CalibrationSummary, CalibrationTests,
    AnalysisModel, RecordRow, SbcScenario,
};
use calibra_core::scenarios::Scale;
use calibra_core::simulate::{read_csv, write_csv};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use scenario::Resolved;
use svg::{Panel, Point, XAxis};

#[derive(Debug, Parser)]
#[command(name = "calibra", version, about = "Simulation-based calibration of Bayes factors for repeated-measures designs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Bayes factors for every configured analysis of one dataset.
    Bf(BfArgs),
    /// Run simulation-based calibration and write records, summaries and plots.
    Sbc(SbcArgs),
    /// Frequentist rejection rates (type I error or power).
    Freq(FreqArgs),
    /// Rebuild summaries and plots from an SBC output directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Full,
    Desk,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Full => Scale::Full,
            ScaleArg::Desk => Scale::Desk,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Preset name or path to a JSON scenario file.
    #[arg(long)]
    pub scenario: String,
    /// Overrides the preset or file scale.
    #[arg(long, value_enum)]
    pub scale: Option<ScaleArg>,
    /// Master seed; overrides the scenario seed.
    #[arg(long, env = "CALIBRA_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    Auto,
    Sbc,
    Freq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Alpha,
    Power,
}

impl From<ModeArg> for ErrorMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Alpha => ErrorMode::Alpha,
            ModeArg::Power => ErrorMode::Power,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// SBC run index whose dataset is written.
    #[arg(long, default_value_t = 0)]
    pub run: usize,
    /// Which part of the scenario generates the data.
    #[arg(long, value_enum, default_value_t = Generator::Auto)]
    pub generator: Generator,
    /// For the frequentist generator: zero the tested effects (alpha) or keep them.
    #[arg(long, value_enum, default_value_t = ModeArg::Power)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Pipeline {
    All,
    Collapsed,
    Jzs,
}

#[derive(Debug, Clone, Args)]
pub struct BfArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Dataset CSV with columns subj,item,<factors…>,y.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Pipeline::All)]
    pub pipeline: Pipeline,
    /// Report CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SbcArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub n_sims: Option<usize>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory; defaults to the scenario's output.dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_plots: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FreqArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Alpha)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1000)]
    pub n_sims: usize,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_plots: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Directory written by `sbc`.
    #[arg(long)]
    pub dir: PathBuf,
}

/// Why a command stopped; each maps to an exit code.
#[derive(Debug)]
pub enum Failure {
    /// Invalid scenario, arguments or input files (exit 2).
    Config(anyhow::Error),
    /// Every analysis failed (exit 3).
    AllFailed(String),
    /// Anything else (exit 1).
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::AllFailed(_) => 3,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration error: {e:#}"),
            Failure::AllFailed(m) => write!(f, "all analyses failed: {m}"),
            Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn cfg<T, E: Into<anyhow::Error>>(r: std::result::Result<T, E>) -> Outcome<T> {
    r.map_err(|e| Failure::Config(e.into()))
}

fn rt<T, E: Into<anyhow::Error>>(r: std::result::Result<T, E>) -> Outcome<T> {
    r.map_err(|e| Failure::Runtime(e.into()))
}

pub fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Bf(a) => cmd_bf(&a),
        Command::Sbc(a) => cmd_sbc(&a),
        Command::Freq(a) => cmd_freq(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn load(args: &ScenarioArgs) -> Outcome<Resolved> {
    let mut r = cfg(scenario::load(&args.scenario, args.scale.map(Scale::from)))?;
    if let (Some(seed), Some(sc)) = (args.seed, r.sbc.as_mut()) {
        sc.sbc.seed = seed;
    }
    Ok(r)
}

fn pool(jobs: Option<usize>) -> Outcome<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Failure::Config(anyhow::anyhow!("--jobs must be at least 1")));
        }
        b = b.num_threads(j);
    }
    rt(b.build())
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        rt(std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display())))?;
    }
    Ok(BufWriter::new(rt(File::create(path).with_context(|| format!("creating {}", path.display())))?))
}

fn write_file(path: &Path, text: &str) -> Outcome<()> {
    let mut w = create(path)?;
    rt(w.write_all(text.as_bytes()))?;
    rt(w.flush())
}

pub fn cmd_simulate(a: &SimulateArgs) -> Outcome<()> {
    let r = load(&a.scenario)?;
    let use_sbc = match a.generator {
        Generator::Auto => r.sbc.is_some(),
        Generator::Sbc => true,
        Generator::Freq => false,
    };
    let data = if use_sbc {
        let sc = r.sbc.as_ref().ok_or_else(|| Failure::Config(anyhow::anyhow!("scenario has no SBC part")))?;
        let sim = rt(simulate_dataset(sc, a.run))?;
        let truth: Vec<String> = sc
            .effects
            .iter()
            .zip(&sim.truth)
            .map(|(e, &t)| format!("{}={}", e.id, if t { "H1" } else { "H0" }))
            .collect();
        eprintln!("run {}: {}; {}", a.run, truth.join(" "), sim.params_digest);
        sim.data
    } else {
        let f = r.freq.as_ref().ok_or_else(|| Failure::Config(anyhow::anyhow!("scenario has no frequentist part")))?;
        let seed = a.scenario.seed.unwrap_or(0);
        rt(f.simulate_one(a.mode.into(), seed))?
    };
    let mut w = create(&a.out)?;
    rt(write_csv(&data, &mut w))?;
    rt(w.flush())
}

const BF_HEADER: [&str; 8] = [
    "analysis_id",
    "effect_id",
    "log_bf10",
    "bf10",
    "post_p1",
    "rhat_max",
    "bridge_iters",
    "warn_flags",
];

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.6e}")
    }
}

pub fn cmd_bf(a: &BfArgs) -> Outcome<()> {
    let r = load(&a.scenario)?;
    let mut sc = r.sbc.ok_or_else(|| Failure::Config(anyhow::anyhow!("scenario has no analyses")))?;
    sc.analyses.retain(|an| {
        matches!(
            (a.pipeline, &an.model),
            (Pipeline::All, _) | (Pipeline::Collapsed, AnalysisModel::Collapsed { .. }) | (Pipeline::Jzs, AnalysisModel::Jzs { .. })
        )
    });
    if sc.analyses.is_empty() {
        return Err(Failure::Config(anyhow::anyhow!("scenario has no {:?} analyses", a.pipeline)));
    }
    let file = cfg(File::open(&a.data).with_context(|| format!("opening {}", a.data.display())))?;
    let data = cfg(read_csv(file, &sc.design.factors, sc.family))?;
    let outcomes = rt(analyse_dataset(&sc, &data, sc.sbc.seed))?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(&mut out);
    rt(w.write_record(BF_HEADER))?;
    for o in &outcomes {
        rt(w.write_record([
            o.analysis_id.clone(),
            o.effect_id.clone(),
            fmt_num(o.log_bf10),
            fmt_num(o.log_bf10.exp()),
            fmt_num(o.post_p1),
            fmt_num(o.rhat_max),
            o.bridge_iters.to_string(),
            o.warn_flags.join(";"),
        ]))?;
    }
    rt(w.flush())?;
    drop(w);
    rt(out.flush())?;
    for o in outcomes.iter().filter(|o| !o.warn_flags.is_empty()) {
        eprintln!("warning: {} {}: {}", o.analysis_id, o.effect_id, o.warn_flags.join("; "));
    }
    if outcomes.iter().all(|o| o.post_p1.is_nan()) {
        return Err(Failure::AllFailed(format!("{} analyses", sc.analyses.len())));
    }
    Ok(())
}

/// What `report` needs to rebuild outputs, saved next to the records.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub scenario: SbcScenario,
    pub plots: bool,
}

pub fn cmd_sbc(a: &SbcArgs) -> Outcome<()> {
    let r = load(&a.scenario)?;
    let mut sc = r.sbc.ok_or_else(|| Failure::Config(anyhow::anyhow!("scenario has no SBC part")))?;
    if let Some(n) = a.n_sims {
        if n == 0 {
            return Err(Failure::Config(anyhow::anyhow!("--n-sims must be at least 1")));
        }
        sc.sbc.n_sims = n;
        sc.sbc.desk_factor = 1;
    }
    let dir = a
        .out
        .clone()
        .or(r.output.dir.clone())
        .ok_or_else(|| Failure::Config(anyhow::anyhow!("no output directory (--out or output.dir)")))?;
    let plots = r.output.plots && !a.no_plots;
    let pool = pool(a.jobs)?;
    let total = sc.sbc.runs();
    let done = AtomicUsize::new(0);
    let quiet = a.quiet;
    let records = pool.install(|| {
        run_sbc_with(&sc, |_| {
            let k = done.fetch_add(1, Ordering::Relaxed) + 1;
            if !quiet && (k == total || k.is_multiple_of((total / 10).max(1))) {
                eprintln!("{}: {k}/{total} runs", sc.name);
            }
        })
    });
    let records = rt(records)?;
    let rows = record_rows(&records);
    rt(std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())))?;
    let mut w = create(&dir.join("records.csv"))?;
    rt(write_records_csv(&rows, &mut w))?;
    rt(w.flush())?;
    let manifest = RunManifest { scenario: sc.clone(), plots };
    write_file(&dir.join("scenario.json"), &rt(serde_json::to_string_pretty(&manifest))?)?;
    let summary = emit_sbc_outputs(&dir, &sc, &rows, plots)?;
    report_summary(&summary, &rows);
    if rows.iter().all(|r| r.post_p1.is_nan()) {
        return Err(Failure::AllFailed(format!("{} runs", records.len())));
    }
    Ok(())
}

fn report_summary(s: &CalibrationSummary, rows: &[RecordRow]) {
    for c in &s.cells {
        eprintln!(
            "{:>18} {:>12}  mean post_p1 {:.3} [{:.3}, {:.3}]  n={} failed={}",
            c.analysis_id, c.effect_id, c.mean, c.ci_lo, c.ci_hi, c.n, c.n_failed
        );
    }
    let warned = rows.iter().filter(|r| !r.warn_flags.is_empty()).count();
    if warned > 0 {
        eprintln!("warning: {warned} of {} records carry warning flags", rows.len());
    }
}

pub fn cmd_report(a: &ReportArgs) -> Outcome<()> {
    let text = cfg(std::fs::read_to_string(a.dir.join("scenario.json")).context("reading scenario.json"))?;
    let manifest: RunManifest = cfg(serde_json::from_str(&text).context("parsing scenario.json"))?;
    let file = cfg(File::open(a.dir.join("records.csv")).context("opening records.csv"))?;
    let rows = cfg(read_records_csv(file))?;
    let summary = emit_sbc_outputs(&a.dir, &manifest.scenario, &rows, manifest.plots)?;
    report_summary(&summary, &rows);
    Ok(())
}

/// Writes summary.csv, calibration_tests.json and the plots; with a sweep,
/// also sweep.csv and sweep_fit.csv.
pub fn emit_sbc_outputs(dir: &Path, sc: &SbcScenario, rows: &[RecordRow], plots: bool) -> Outcome<CalibrationSummary> {
    let prior = sc.sbc.prior_p1;
    let summary = summarize(rows, prior);
    let mut w = create(&dir.join("summary.csv"))?;
    rt(write_summary_csv(&summary, &mut w))?;
    rt(w.flush())?;
    let sweep_of = |r: usize| sc.sbc.sweep_value(r).unwrap_or(f64::NAN);
    let sweep_fn: Option<&dyn Fn(usize) -> f64> = if sc.sbc.sweep.is_some() { Some(&sweep_of) } else { None };
    let tests = rt(calibration_tests(rows, prior, &default_scale_grid(), sweep_fn))?;
    write_file(&dir.join("calibration_tests.json"), &rt(serde_json::to_string_pretty(&tests))?)?;
    if sc.sbc.sweep.is_some() {
        write_sweep_tables(dir, sc, rows, &tests)?;
    }
    if plots {
        write_file(&dir.join("calibration.svg"), &calibration_svg(&sc.name, &summary))?;
        if sc.sbc.sweep.is_some() {
            write_file(&dir.join("sweep.svg"), &sweep_svg(sc, rows, &tests))?;
        }
    }
    Ok(summary)
}

fn write_sweep_tables(dir: &Path, sc: &SbcScenario, rows: &[RecordRow], tests: &CalibrationTests) -> Outcome<()> {
    let mut w = csv::Writer::from_writer(create(&dir.join("sweep.csv"))?);
    rt(w.write_record(["run", "analysis_id", "effect_id", "sweep_value", "post_p1"]))?;
    for r in rows {
        rt(w.write_record([
            r.run.to_string(),
            r.analysis_id.clone(),
            r.effect_id.clone(),
            fmt_num(sc.sbc.sweep_value(r.run).unwrap_or(f64::NAN)),
            fmt_num(r.post_p1),
        ]))?;
    }
    rt(w.flush())?;
    let mut w = csv::Writer::from_writer(create(&dir.join("sweep_fit.csv"))?);
    rt(w.write_record(["analysis_id", "effect_id", "intercept", "slope", "se_slope", "z_slope", "regression_bf10"]))?;
    for t in &tests.sweep {
        rt(w.write_record([
            t.analysis_id.clone(),
            t.effect_id.clone(),
            fmt_num(t.logistic.intercept),
            fmt_num(t.logistic.slope),
            fmt_num(t.logistic.se_slope),
            fmt_num(t.logistic.z_slope()),
            fmt_num(t.bf10),
        ]))?;
    }
    rt(w.flush())
}

fn ordered<'a>(it: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut v: Vec<String> = Vec::new();
    for s in it {
        if !v.iter().any(|x| x == s) {
            v.push(s.to_string());
        }
    }
    v
}

/// Mean posterior probability of H1 with 95% intervals, one panel per
/// analysis and one point per tested effect.
pub fn calibration_svg(title: &str, s: &CalibrationSummary) -> String {
    let analyses = ordered(s.cells.iter().map(|c| c.analysis_id.as_str()));
    let panels: Vec<Panel> = analyses
        .iter()
        .map(|a| {
            let cells: Vec<_> = s.cells.iter().filter(|c| &c.analysis_id == a).collect();
            Panel {
                title: a.clone(),
                x: XAxis::Categories(cells.iter().map(|c| c.effect_id.clone()).collect()),
                y_label: "mean posterior P(H1)".into(),
                y_range: (0.0, 1.0),
                points: cells
                    .iter()
                    .enumerate()
                    .map(|(i, c)| Point {
                        x: i as f64,
                        y: c.mean,
                        lo: Some(c.ci_lo),
                        hi: Some(c.ci_hi),
                    })
                    .collect(),
                curve: vec![],
                reference: Some(s.prior_p1),
            }
        })
        .collect();
    svg::render(title, &panels)
}

/// Posterior probability of H1 against the swept value, binned into ten
/// intervals, with the fitted logistic curve.
pub fn sweep_svg(sc: &SbcScenario, rows: &[RecordRow], tests: &CalibrationTests) -> String {
    let Some(sw) = &sc.sbc.sweep else {
        return svg::render(&sc.name, &[]);
    };
    let (lo, hi) = (sw.lo, sw.hi);
    let keys: Vec<(String, String)> = {
        let mut v: Vec<(String, String)> = Vec::new();
        for r in rows {
            let k = (r.analysis_id.clone(), r.effect_id.clone());
            if !v.contains(&k) {
                v.push(k);
            }
        }
        v
    };
    let bins = 10;
    let panels: Vec<Panel> = keys
        .iter()
        .map(|(a, e)| {
            let mut groups: Vec<Vec<f64>> = vec![Vec::new(); bins];
            for r in rows.iter().filter(|r| &r.analysis_id == a && &r.effect_id == e && r.post_p1.is_finite()) {
                let v = sc.sbc.sweep_value(r.run).unwrap_or(lo);
                let b = if hi > lo { (((v - lo) / (hi - lo)) * bins as f64) as usize } else { 0 };
                groups[b.min(bins - 1)].push(r.post_p1);
            }
            let width = (hi - lo) / bins as f64;
            let points = groups
                .iter()
                .enumerate()
                .filter(|(_, g)| !g.is_empty())
                .map(|(i, g)| {
                    let m = calibra_core::stats::mean(g);
                    let half = if g.len() > 1 { 1.96 * calibra_core::stats::sd(g) / (g.len() as f64).sqrt() } else { 0.0 };
                    Point {
                        x: lo + width * (i as f64 + 0.5),
                        y: m,
                        lo: Some(m - half),
                        hi: Some(m + half),
                    }
                })
                .collect();
            let curve = tests
                .sweep
                .iter()
                .find(|t| &t.analysis_id == a && &t.effect_id == e)
                .map(|t| (0..=50).map(|i| lo + (hi - lo) * i as f64 / 50.0).map(|x| (x, t.logistic.predict(x))).collect())
                .unwrap_or_default();
            Panel {
                title: format!("{a} / {e}"),
                x: XAxis::Numeric {
                    label: "swept value".into(),
                    lo,
                    hi,
                },
                y_label: "posterior P(H1)".into(),
                y_range: (0.0, 1.0),
                points,
                curve,
                reference: Some(sc.sbc.prior_p1),
            }
        })
        .collect();
    svg::render(&format!("{} sweep", sc.name), &panels)
}

/// Rejection rates with binomial intervals: one panel per analysis, with the
/// tested effects as categories, or one panel per analysis and effect along
/// the swept SD.
pub fn freq_svg(title: &str, curves: &[ErrorRateCurve], alpha: f64, mode: ErrorMode) -> String {
    let swept = curves.iter().any(|c| c.points.len() > 1);
    let y_label = match mode {
        ErrorMode::Alpha => "type I error rate",
        ErrorMode::Power => "power",
    };
    let reference = (mode == ErrorMode::Alpha).then_some(alpha);
    let panels: Vec<Panel> = if swept {
        curves
            .iter()
            .map(|c| {
                let xs: Vec<f64> = c.points.iter().map(|p| p.sd_true).collect();
                let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Panel {
                    title: format!("{} / {}", c.analysis, c.effect),
                    x: XAxis::Numeric {
                        label: "true SD".into(),
                        lo: if lo.is_finite() { lo } else { 0.0 },
                        hi: if hi.is_finite() { hi } else { 1.0 },
                    },
                    y_label: y_label.into(),
                    y_range: (0.0, 1.0),
                    points: c
                        .points
                        .iter()
                        .map(|p| Point {
                            x: p.sd_true,
                            y: p.rate(),
                            lo: Some(p.ci_lo),
                            hi: Some(p.ci_hi),
                        })
                        .collect(),
                    curve: c.points.iter().map(|p| (p.sd_true, p.rate())).collect(),
                    reference,
                }
            })
            .collect()
    } else {
        let analyses = ordered(curves.iter().map(|c| c.analysis.as_str()));
        analyses
            .iter()
            .map(|a| {
                let cs: Vec<&ErrorRateCurve> = curves.iter().filter(|c| &c.analysis == a).collect();
                Panel {
                    title: a.clone(),
                    x: XAxis::Categories(
                        cs.iter()
                            .map(|c| match c.points.first() {
                                Some(p) => format!("{} (SD {})", c.effect, p.sd_true),
                                None => c.effect.clone(),
                            })
                            .collect(),
                    ),
                    y_label: y_label.into(),
                    y_range: (0.0, 1.0),
                    points: cs
                        .iter()
                        .enumerate()
                        .filter_map(|(i, c)| {
                            c.points.first().map(|p| Point {
                                x: i as f64,
                                y: p.rate(),
                                lo: Some(p.ci_lo),
                                hi: Some(p.ci_hi),
                            })
                        })
                        .collect(),
                    curve: vec![],
                    reference,
                }
            })
            .collect()
    };
    svg::render(title, &panels)
}

pub fn cmd_freq(a: &FreqArgs) -> Outcome<()> {
    let r = load(&a.scenario)?;
    let f = r.freq.ok_or_else(|| Failure::Config(anyhow::anyhow!("scenario has no frequentist part")))?;
    let dir = a
        .out
        .clone()
        .or(r.output.dir.clone())
        .ok_or_else(|| Failure::Config(anyhow::anyhow!("no output directory (--out or output.dir)")))?;
    let seed = a.scenario.seed.unwrap_or(0);
    let mode: ErrorMode = a.mode.into();
    let pool = pool(a.jobs)?;
    let curves = rt(pool.install(|| alpha_power_sim(&f, mode, a.n_sims, seed)))?;
    let name = match mode {
        ErrorMode::Alpha => "alpha",
        ErrorMode::Power => "power",
    };
    let mut w = create(&dir.join(format!("{name}_curves.csv")))?;
    rt(write_curves_csv(&curves, &mut w))?;
    rt(w.flush())?;
    if r.output.plots && !a.no_plots {
        write_file(&dir.join(format!("{name}.svg")), &freq_svg(&format!("{} ({name})", a.scenario.scenario), &curves, f.alpha, mode))?;
    }
    for c in &curves {
        for p in &c.points {
            eprintln!(
                "{:>16} {:>8} sd={:<6} rate {:.3} [{:.3}, {:.3}] ({} of {}, {} failed)",
                c.analysis,
                c.effect,
                p.sd_true,
                p.rate(),
                p.ci_lo,
                p.ci_hi,
                p.n_reject,
                p.n_sims,
                p.n_failed
            );
        }
    }
    let all_failed = a.n_sims > 0 && curves.iter().all(|c| c.points.iter().all(|p| p.n_failed == p.n_sims));
    if all_failed {
        return Err(Failure::AllFailed("every model fit failed".into()));
    }
    Ok(())
}
