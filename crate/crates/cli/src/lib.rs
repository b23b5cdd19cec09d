//! Command-line front end: argument parsing, persistence wiring and plots.

pub mod manifest;
pub mod plots;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use umloc::datasim::{self, sub_seed, Dataset, SimConfig};
use umloc::evalkit::{self, Level, MetricsReport, Pipeline};
use umloc::textfmt;
use umloc::trainer::{self, Phase, TrainConfig};

pub use manifest::{Manifest, MANIFEST_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "umloc",
    version,
    about = "Map-constrained inertial localization with velocity intervals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate floor plans, walks and IMU recordings
    Simulate(SimulateArgs),
    /// Run the training curriculum
    Train(TrainArgs),
    /// Evaluate a trained pipeline on the test split
    Eval(EvalArgs),
    /// Evaluate under injected noise and frame dropout
    Robustness(RobustnessArgs),
    /// Render figures from a report and, optionally, a trained pipeline
    Plot(PlotArgs),
    /// Repeat the run recorded in a manifest
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct SeedArg {
    /// Seed for every random choice; falls back to UMLOC_SEED, then 0
    #[arg(long, env = "UMLOC_SEED")]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 16)]
    n_traj: usize,
    #[arg(long, default_value_t = 60.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 60.0)]
    rate: f64,
    /// Trajectories sharing one floor plan
    #[arg(long, default_value_t = 8)]
    traj_per_map: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value = "all", value_parser = parse_phase)]
    phase: Phase,
    /// `key=value` training configuration; unknown keys are rejected
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in configuration used when no config file is given
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
    profile: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Interval levels in percent (68, 90, 95); defaults to every trained level
    #[arg(long, value_delimiter = ',', value_parser = parse_level)]
    level: Vec<Level>,
    /// Clamp generated velocities into the conditioning interval
    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    clip_to_interval: bool,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct RobustnessArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, value_delimiter = ',', value_parser = parse_level)]
    level: Vec<Level>,
    /// Clamp generated velocities into the conditioning interval
    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    clip_to_interval: bool,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    report: PathBuf,
    /// Dataset holding the maps and ground truth of the reported trajectories
    #[arg(long)]
    data: PathBuf,
    /// Trained pipeline; enables predicted paths, samples and drift curves
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of noise-sampled trajectories drawn on each overlay
    #[arg(long, default_value_t = 0, requires = "checkpoint")]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    max_overlays: usize,
    /// Distance bin width of the drift curve, in metres
    #[arg(long, default_value_t = 5.0)]
    bin_m: f64,
    /// Clamp generated velocities into the conditioning interval
    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    clip_to_interval: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Replaces the recorded output directory (or report file)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_phase(s: &str) -> std::result::Result<Phase, String> {
    s.parse().map_err(|e: umloc::Error| e.to_string())
}

fn parse_level(s: &str) -> std::result::Result<Level, String> {
    let p: u32 = s
        .parse()
        .map_err(|_| format!("'{s}' is not a percentage"))?;
    Level::from_percent(p).map_err(|e| e.to_string())
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let seed_from_env = matches
        .subcommand()
        .filter(|(_, sub)| sub.ids().any(|id| id == "seed"))
        .map(|(_, sub)| sub.value_source("seed") == Some(ValueSource::EnvVariable))
        .unwrap_or(false);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command, seed_from_env) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command, seed_from_env: bool) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a, seed_from_env),
        Command::Eval(a) => eval(a),
        Command::Robustness(a) => robustness(a),
        Command::Plot(a) => plot(a),
        Command::Replay(a) => replay(a),
    }
}

fn path_str(p: &Path) -> Result<String> {
    p.to_str()
        .map(str::to_string)
        .with_context(|| format!("path {} is not valid UTF-8", p.display()))
}

/// Manifest location for a report file: next to it, with `.manifest` appended.
pub fn report_manifest_path(report: &Path) -> PathBuf {
    let mut name = report
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest");
    report.with_file_name(name)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let seed = a.seed.seed.unwrap_or(0);
    let mut cfg = SimConfig::new(seed, a.n_traj, a.duration_s, a.rate);
    cfg.traj_per_map = a.traj_per_map;
    let dataset = datasim::simulate(&cfg)?;
    dataset.write_dir(&a.out)?;
    Manifest::new("simulate", seed)
        .arg("n-traj", a.n_traj)
        .arg("duration-s", a.duration_s)
        .arg("rate", a.rate)
        .arg("traj-per-map", a.traj_per_map)
        .arg("out", path_str(&a.out)?)
        .write(&a.out.join(MANIFEST_FILE))?;
    log::info!(
        "wrote {} trajectories and {} maps to {}",
        dataset.trajectories.len(),
        dataset.maps.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, seed_from_env: bool) -> Result<()> {
    let cfg = match &a.config {
        Some(path) => {
            let text = textfmt::read_to_string(path)?;
            let mut cfg = TrainConfig::parse(&text, a.seed.seed.unwrap_or(0))
                .with_context(|| format!("config {}", path.display()))?;
            // An explicit flag beats the file; the environment only fills a gap.
            if let (Some(s), false) = (a.seed.seed, seed_from_env) {
                cfg.seed = s;
            }
            cfg
        }
        None => TrainConfig::profile(&a.profile, a.seed.seed.unwrap_or(0))?,
    };
    let dataset = Dataset::read_dir(&a.data)?;
    let phase_name = match a.phase {
        Phase::Quantile => "quantile",
        Phase::Cgan => "cgan",
        Phase::Joint => "joint",
        Phase::All => "all",
    };
    trainer::run_curriculum(&dataset, &cfg, &a.out, a.phase)?;
    Manifest::new("train", cfg.seed)
        .arg("phase", phase_name)
        .arg("data", path_str(&a.data)?)
        .arg("out", path_str(&a.out)?)
        .with_config(&cfg.to_text())?
        .write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

fn levels_or_trained(requested: &[Level], pipeline: &Pipeline) -> Vec<Level> {
    if requested.is_empty() {
        pipeline.level_qnets.iter().map(|(l, _)| *l).collect()
    } else {
        requested.to_vec()
    }
}

fn level_list(levels: &[Level]) -> String {
    levels
        .iter()
        .map(|l| l.percent().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn write_report(path: &Path, report: &MetricsReport, manifest: Manifest) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    textfmt::write_string(path, &report.to_text())?;
    manifest.write(&report_manifest_path(path))?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let seed = a.seed.seed.unwrap_or(0);
    let mut pipeline = Pipeline::load(&a.checkpoint)?;
    pipeline.clip_to_interval = a.clip_to_interval;
    let dataset = Dataset::read_dir(&a.data)?;
    let levels = levels_or_trained(&a.level, &pipeline);
    let (report, _) = evalkit::run_eval(&pipeline, &dataset, &levels, seed)?;
    let m = Manifest::new("eval", seed)
        .arg("checkpoint", path_str(&a.checkpoint)?)
        .arg("data", path_str(&a.data)?)
        .arg("level", level_list(&levels))
        .arg("clip-to-interval", a.clip_to_interval)
        .arg("report", path_str(&a.report)?);
    write_report(&a.report, &report, m)
}

fn robustness(a: RobustnessArgs) -> Result<()> {
    let seed = a.seed.seed.unwrap_or(0);
    let mut pipeline = Pipeline::load(&a.checkpoint)?;
    pipeline.clip_to_interval = a.clip_to_interval;
    let dataset = Dataset::read_dir(&a.data)?;
    let levels = levels_or_trained(&a.level, &pipeline);
    let report = evalkit::run_robustness(&pipeline, &dataset, &levels, a.dropout, seed)?;
    let m = Manifest::new("robustness", seed)
        .arg("checkpoint", path_str(&a.checkpoint)?)
        .arg("data", path_str(&a.data)?)
        .arg("dropout", a.dropout)
        .arg("level", level_list(&levels))
        .arg("clip-to-interval", a.clip_to_interval)
        .arg("report", path_str(&a.report)?);
    write_report(&a.report, &report, m)
}

fn plot(a: PlotArgs) -> Result<()> {
    let seed = a.seed.seed.unwrap_or(0);
    let report = MetricsReport::parse(&textfmt::read_to_string(&a.report)?)
        .with_context(|| format!("report {}", a.report.display()))?;
    if report.blocks.is_empty() {
        bail!("report {} has no trajectory blocks", a.report.display());
    }
    let dataset = Dataset::read_dir(&a.data)?;
    let mut pipeline = a.checkpoint.as_deref().map(Pipeline::load).transpose()?;
    if let Some(p) = pipeline.as_mut() {
        p.clip_to_interval = a.clip_to_interval;
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut written = plots::metric_cdfs(&a.out, &report)?;
    written.extend(plots::noise_curves(&a.out, &report)?);

    let mut names: Vec<&str> = Vec::new();
    for b in &report.blocks {
        if !names.contains(&b.trajectory.as_str()) {
            names.push(&b.trajectory);
        }
    }
    let mut predicted: Vec<(usize, Vec<[f64; 2]>)> = Vec::new();
    let maps = match &pipeline {
        Some(p) => p.maps_for(&dataset)?,
        None => Vec::new(),
    };
    for (k, name) in names.iter().enumerate() {
        let idx = dataset
            .trajectories
            .iter()
            .position(|t| t.name == *name)
            .with_context(|| {
                format!(
                    "trajectory '{name}' from the report is not in {}",
                    a.data.display()
                )
            })?;
        let s = &dataset.trajectories[idx];
        let mut prediction = None;
        let mut samples = Vec::new();
        if let Some(p) = &pipeline {
            let (start, v1) = evalkit::start_state(s);
            let map = &maps[s.map_id];
            prediction = Some(evalkit::infer(p, &s.imu, map, start, v1, &[], None)?.positions);
            if k < a.max_overlays {
                for j in 0..a.samples {
                    let z_seed = sub_seed(sub_seed(seed, idx as u64), j as u64);
                    samples.push(
                        evalkit::infer(p, &s.imu, map, start, v1, &[], Some(z_seed))?.positions,
                    );
                }
            }
        }
        if k < a.max_overlays {
            let file = format!("overlay_{name}.svg");
            plots::overlay(
                &a.out.join(&file),
                &plots::Overlay {
                    title: name.to_string(),
                    grid: &dataset.maps[s.map_id].grid,
                    truth: s.truth.positions(),
                    prediction: prediction.as_deref(),
                    samples: &samples,
                },
            )?;
            written.push(file);
        }
        if let Some(pred) = prediction {
            predicted.push((idx, pred));
        }
    }
    if !predicted.is_empty() {
        let pairs: Vec<(&[[f64; 2]], &[[f64; 2]])> = predicted
            .iter()
            .map(|(i, p)| (dataset.trajectories[*i].truth.positions(), p.as_slice()))
            .collect();
        plots::drift(&a.out.join("drift_vs_distance.svg"), &pairs, a.bin_m)?;
        written.push("drift_vs_distance.svg".into());
    }

    let mut m = Manifest::new("plot", seed)
        .arg("report", path_str(&a.report)?)
        .arg("data", path_str(&a.data)?)
        .arg("samples", a.samples)
        .arg("max-overlays", a.max_overlays)
        .arg("bin-m", a.bin_m)
        .arg("clip-to-interval", a.clip_to_interval)
        .arg("out", path_str(&a.out)?);
    if let Some(c) = &a.checkpoint {
        m = m.arg("checkpoint", path_str(c)?);
    }
    m.write(&a.out.join(MANIFEST_FILE))?;
    log::info!("wrote {} figures to {}", written.len(), a.out.display());
    Ok(())
}

/// Rebuilds the command line recorded in a manifest, redirecting its output
/// when `out` is given. Training configurations are written next to the new
/// output and passed with `--config`.
pub fn replay_argv(m: &Manifest, out: Option<&Path>) -> Result<Vec<String>> {
    let mut m = m.clone();
    let key = if matches!(m.command.as_str(), "eval" | "robustness") {
        "report"
    } else {
        "out"
    };
    if let Some(o) = out {
        m.set(key, path_str(o)?);
    }
    if m.get(key).is_none() {
        bail!("manifest has no '{key}' argument");
    }
    if let Some(text) = m.config_text() {
        if m.command != "train" {
            bail!("only train manifests carry a configuration");
        }
        let dir = PathBuf::from(m.get("out").unwrap_or_default());
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(trainer::CONFIG_FILE);
        textfmt::write_string(&path, &text)?;
        m.set("config", path_str(&path)?);
    }
    Ok(m.to_argv())
}

fn replay(a: ReplayArgs) -> Result<()> {
    let m = Manifest::read(&a.manifest)?;
    if m.version != env!("CARGO_PKG_VERSION") {
        log::warn!(
            "manifest written by version {}, running {}",
            m.version,
            env!("CARGO_PKG_VERSION")
        );
    }
    let argv = replay_argv(&m, a.out.as_deref())?;
    log::info!("replaying: {}", argv.join(" "));
    match run(argv) {
        EXIT_OK => Ok(()),
        code => bail!("replayed command exited with code {code}"),
    }
}
