//! Accuracy and calibration metrics, end-to-end inference over whole
//! sequences, the robustness protocol and its report format.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cgan::{integrate_positions, GenCondition, Generator, MapBank};
use crate::datasim::{
    perturb, sub_seed, Dataset, PerturbationSpec, TrajectorySample, NOISE_MULTIPLIERS, WINDOW_LEN,
};
use crate::error::{check_len, Error, Result};
use crate::geometry::{Frame, ImuSequence};
use crate::mapkit::DistanceMap;
use crate::qnet::{input_features, QuantileNet, QuantileSeries, INPUT_DIM};
use crate::textfmt;
use crate::trainer::{
    self, joint_qnet_stem, mode_maps, qnet_stem, standard_normal, MapMode, TrainConfig, CGAN_STEM,
    JOINT_CGAN_STEM, TRAINING_DTYPE,
};

pub const REPORT_MAGIC: &str = "UREP1";
pub const RTE_INTERVAL_S: f64 = 60.0;

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Root mean square of per-step position error norms.
pub fn ate(truth: &[[f64; 2]], pred: &[[f64; 2]]) -> Result<f64> {
    check_len("ate trajectories", truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::Empty("ate over an empty trajectory".into()));
    }
    let s: f64 = truth.iter().zip(pred).map(|(&a, &b)| sq_dist(a, b)).sum();
    Ok((s / truth.len() as f64).sqrt())
}

/// RMSE of displacement differences over `interval_s`. Sequences spanning
/// less than the interval use their full span, scaled up to the interval.
pub fn rte(truth: &[[f64; 2]], pred: &[[f64; 2]], dt: f64, interval_s: f64) -> Result<f64> {
    check_len("rte trajectories", truth.len(), pred.len())?;
    let n = truth.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "rte needs at least 2 steps, got {n}"
        )));
    }
    if !(dt > 0.0 && interval_s > 0.0) {
        return Err(Error::InvalidArgument(
            "rte needs positive dt and interval".into(),
        ));
    }
    let nominal = (interval_s / dt).round().max(1.0) as usize;
    let (lag, scale) = if nominal <= n - 1 {
        (nominal, 1.0)
    } else {
        (n - 1, interval_s / ((n - 1) as f64 * dt))
    };
    let mut s = 0.0;
    for t in 0..n - lag {
        let dp = [pred[t + lag][0] - pred[t][0], pred[t + lag][1] - pred[t][1]];
        let dg = [
            truth[t + lag][0] - truth[t][0],
            truth[t + lag][1] - truth[t][1],
        ];
        s += sq_dist(dp, dg);
    }
    Ok(scale * (s / (n - lag) as f64).sqrt())
}

/// Final position error as a fraction of the truth path length.
pub fn fde(truth: &[[f64; 2]], pred: &[[f64; 2]]) -> Result<f64> {
    check_len("fde trajectories", truth.len(), pred.len())?;
    let length: f64 = truth.windows(2).map(|w| sq_dist(w[0], w[1]).sqrt()).sum();
    if !(length > 0.0) {
        return Err(Error::InvalidArgument(
            "fde needs a path of positive length".into(),
        ));
    }
    let (a, b) = (truth[truth.len() - 1], pred[pred.len() - 1]);
    Ok(sq_dist(a, b).sqrt() / length)
}

fn inside(v: [f64; 2], l: [f64; 2], u: [f64; 2]) -> bool {
    l[0] <= v[0] && v[0] <= u[0] && l[1] <= v[1] && v[1] <= u[1]
}

fn count_inside(truth: &[[f64; 2]], q: &QuantileSeries) -> Result<usize> {
    check_len("picp truth vs intervals", truth.len(), q.len())?;
    if truth.is_empty() {
        return Err(Error::Empty("picp over zero steps".into()));
    }
    Ok(truth
        .iter()
        .zip(q.lower().iter().zip(q.upper()))
        .filter(|(&v, (&l, &u))| inside(v, l, u))
        .count())
}

/// Fraction of steps whose velocity lies inside the interval on both axes.
pub fn picp(truth: &[[f64; 2]], q: &QuantileSeries) -> Result<f64> {
    Ok(count_inside(truth, q)? as f64 / truth.len() as f64)
}

/// Complement of [`picp`], counted directly.
pub fn fraction_outside(truth: &[[f64; 2]], q: &QuantileSeries) -> Result<f64> {
    let n = truth.len();
    Ok((n - count_inside(truth, q)?) as f64 / n as f64)
}

/// Mean 2-norm of the per-step width vector.
pub fn aiw(q: &QuantileSeries) -> f64 {
    if q.is_empty() {
        return 0.0;
    }
    let s: f64 = q
        .lower()
        .iter()
        .zip(q.upper())
        .map(|(&l, &u)| sq_dist(u, l).sqrt())
        .sum();
    s / q.len() as f64
}

/// Interval levels of the evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    L68,
    L90,
    L95,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L68, Level::L90, Level::L95];

    pub fn alpha(&self) -> f64 {
        match self {
            Level::L68 => 0.16,
            Level::L90 => 0.05,
            Level::L95 => 0.025,
        }
    }

    pub fn fraction(&self) -> f64 {
        match self {
            Level::L68 => 0.68,
            Level::L90 => 0.90,
            Level::L95 => 0.95,
        }
    }

    pub fn percent(&self) -> u32 {
        match self {
            Level::L68 => 68,
            Level::L90 => 90,
            Level::L95 => 95,
        }
    }

    /// Gaussian multiplier of the standard deviation.
    pub fn sigma_multiplier(&self) -> f64 {
        match self {
            Level::L68 => 1.0,
            Level::L90 => 1.64,
            Level::L95 => 2.0,
        }
    }

    pub fn from_percent(p: u32) -> Result<Level> {
        Level::ALL
            .into_iter()
            .find(|l| l.percent() == p)
            .ok_or_else(|| Error::InvalidArgument(format!("unsupported interval level {p}%")))
    }

    pub fn from_fraction(f: f64) -> Result<Level> {
        Level::ALL
            .into_iter()
            .find(|l| (l.fraction() - f).abs() < 1e-9)
            .ok_or_else(|| Error::InvalidArgument(format!("unsupported interval level {f}")))
    }

    pub fn from_alpha(a: f64) -> Option<Level> {
        Level::ALL.into_iter().find(|l| l.alpha() == a)
    }
}

/// Mean velocity and per-axis log standard deviation from a Gaussian model.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBaselineOutput {
    pub mean: Vec<[f64; 2]>,
    pub log_std: Vec<[f64; 2]>,
}

impl GaussianBaselineOutput {
    pub fn sigma(&self) -> Vec<[f64; 2]> {
        self.log_std
            .iter()
            .map(|c| [c[0].exp(), c[1].exp()])
            .collect()
    }
}

/// Bounds `mean ± k exp(c)` with `k` set by the level.
pub fn gaussian_to_interval(out: &GaussianBaselineOutput, level: f64) -> Result<QuantileSeries> {
    let lv = Level::from_fraction(level)?;
    check_len(
        "gaussian mean vs log-std",
        out.mean.len(),
        out.log_std.len(),
    )?;
    let k = lv.sigma_multiplier();
    let sigma = out.sigma();
    let lower = out
        .mean
        .iter()
        .zip(&sigma)
        .map(|(m, s)| [m[0] - k * s[0], m[1] - k * s[1]])
        .collect();
    let upper = out
        .mean
        .iter()
        .zip(&sigma)
        .map(|(m, s)| [m[0] + k * s[0], m[1] + k * s[1]])
        .collect();
    QuantileSeries::new(lower, upper, lv.alpha())
}

/// Trained models needed for end-to-end inference.
pub struct Pipeline {
    pub config: TrainConfig,
    /// Quantile model conditioning the generator.
    pub cond_qnet: QuantileNet,
    pub gen: Generator,
    /// One quantile model per evaluated level.
    pub level_qnets: Vec<(Level, QuantileNet)>,
    /// Clamp generated velocities into the conditioning interval and
    /// re-integrate. Off unless asked for.
    pub clip_to_interval: bool,
}

impl Pipeline {
    /// Loads from a training output directory, preferring jointly fine-tuned
    /// checkpoints when present.
    pub fn load(dir: &Path) -> Result<Pipeline> {
        let cfg_path = dir.join(trainer::CONFIG_FILE);
        if !cfg_path.exists() {
            return Err(Error::MissingCheckpoint(cfg_path));
        }
        let config = TrainConfig::parse(&textfmt::read_to_string(&cfg_path)?, 0)?;
        let joint = dir.join(format!("{JOINT_CGAN_STEM}.umck")).exists();
        let (gen, cond_stem) = if joint {
            (
                Generator::load(dir, JOINT_CGAN_STEM, TRAINING_DTYPE)?.0,
                joint_qnet_stem(config.cond_alpha),
            )
        } else {
            (
                Generator::load(dir, CGAN_STEM, TRAINING_DTYPE)?.0,
                qnet_stem(config.cond_alpha),
            )
        };
        let (cond_qnet, _) = QuantileNet::load(dir, &cond_stem, TRAINING_DTYPE)?;
        let mut level_qnets = Vec::new();
        for &a in &config.alphas {
            if let Some(level) = Level::from_alpha(a) {
                level_qnets.push((
                    level,
                    QuantileNet::load(dir, &qnet_stem(a), TRAINING_DTYPE)?.0,
                ));
            }
        }
        level_qnets.sort_by_key(|(l, _)| *l);
        Ok(Pipeline {
            config,
            cond_qnet,
            gen,
            level_qnets,
            clip_to_interval: false,
        })
    }

    pub fn level_qnet(&self, level: Level) -> Result<&QuantileNet> {
        self.level_qnets
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, q)| q)
            .ok_or_else(|| {
                Error::MissingCheckpoint(format!("{}.umck", qnet_stem(level.alpha())).into())
            })
    }

    /// The distance fields this pipeline was trained to see.
    pub fn maps_for(&self, dataset: &Dataset) -> Result<Vec<DistanceMap>> {
        mode_maps(dataset, self.config.map_mode)
    }

    pub fn map_mode(&self) -> MapMode {
        self.config.map_mode
    }
}

/// Output of chained inference over one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub velocities: Vec<[f64; 2]>,
    pub positions: Vec<[f64; 2]>,
    pub intervals: Vec<(Level, QuantileSeries)>,
}

fn window_tensor(imu: &[[f64; 6]], v1: [f64; 2], dt: f64) -> Result<Tensor> {
    let rows = input_features(imu, v1, dt);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(
        Tensor::from_vec(flat, (1, rows.len(), INPUT_DIM), &Device::Cpu)?
            .to_dtype(TRAINING_DTYPE)?,
    )
}

fn pairs(t: &Tensor) -> Result<Vec<[f64; 2]>> {
    Ok(crate::nn::flat(t)?
        .chunks(2)
        .map(|c| [c[0], c[1]])
        .collect())
}

/// Runs the pipeline over a whole global-frame sequence in consecutive
/// windows. Each window starts from the previous window's last generated
/// velocity and position. `z_seed = None` decodes with zero noise.
pub fn infer(
    pipeline: &Pipeline,
    imu: &ImuSequence,
    map: &DistanceMap,
    start: [f64; 2],
    v1: [f64; 2],
    levels: &[Level],
    z_seed: Option<u64>,
) -> Result<Inference> {
    if imu.frame() != Frame::Global {
        return Err(Error::InvalidState(
            "inference expects a global-frame sequence".into(),
        ));
    }
    if imu.is_empty() {
        return Err(Error::Empty("inference over an empty sequence".into()));
    }
    let dt = 1.0 / imu.rate();
    let channels: Vec<[f64; 6]> = imu.samples().iter().map(|s| s.channels()).collect();
    let bank = MapBank::new(vec![map.clone()], TRAINING_DTYPE)?;
    let maps = bank.batch(&[0])?;
    let (norm_scale, norm_offset) = bank.normalizers(&[0])?;
    let mut rng = z_seed.map(ChaCha8Rng::seed_from_u64);
    let level_nets: Vec<(Level, &QuantileNet)> = levels
        .iter()
        .map(|&l| Ok((l, pipeline.level_qnet(l)?)))
        .collect::<Result<_>>()?;
    let mut v_prev = v1;
    let mut p_prev = start;
    let mut velocities = Vec::with_capacity(channels.len());
    let mut positions = Vec::with_capacity(channels.len());
    let mut bounds: Vec<(Vec<[f64; 2]>, Vec<[f64; 2]>)> =
        vec![(Vec::new(), Vec::new()); levels.len()];
    let z_dim = pipeline.gen.config().z_dim;
    for chunk in channels.chunks(WINDOW_LEN) {
        let t = chunk.len();
        let x = window_tensor(chunk, v_prev, dt)?;
        let (features, q) = pipeline.cond_qnet.forward(&x)?;
        let z = match rng.as_mut() {
            Some(r) => standard_normal(r, (1, t, z_dim), TRAINING_DTYPE)?,
            None => Tensor::zeros((1, t, z_dim), TRAINING_DTYPE, &Device::Cpu)?,
        };
        let (lower, upper) = (q.lower.clone(), q.upper.clone());
        let cond = GenCondition {
            features,
            lower: q.lower,
            upper: q.upper,
            maps: maps.clone(),
            norm_scale: norm_scale.clone(),
            norm_offset: norm_offset.clone(),
        };
        let p0 =
            Tensor::from_vec(p_prev.to_vec(), (1, 2), &Device::Cpu)?.to_dtype(TRAINING_DTYPE)?;
        let (v, p) = pipeline.gen.generate(&cond, &z, &p0, false)?;
        for (k, (_, net)) in level_nets.iter().enumerate() {
            let (_, q) = net.forward(&x)?;
            bounds[k].0.extend(pairs(&q.lower)?);
            bounds[k].1.extend(pairs(&q.upper)?);
        }
        let (v, p) = if pipeline.clip_to_interval {
            let v = pairs(&v.maximum(&lower)?.minimum(&upper)?)?;
            let p = integrate_positions(p_prev, &v, pipeline.gen.config().dt);
            (v, p)
        } else {
            (pairs(&v)?, pairs(&p)?)
        };
        v_prev = v[t - 1];
        p_prev = p[t - 1];
        velocities.extend(v);
        positions.extend(p);
    }
    let intervals = levels
        .iter()
        .zip(bounds)
        .map(|(&l, (lo, up))| Ok((l, QuantileSeries::new(lo, up, l.alpha())?)))
        .collect::<Result<_>>()?;
    Ok(Inference {
        velocities,
        positions,
        intervals,
    })
}

/// Metrics for one trajectory, perturbation and level.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBlock {
    pub trajectory: String,
    pub noise_mult: f64,
    pub dropout: f64,
    pub level: u32,
    pub seed: u64,
    pub ate_m: f64,
    pub rte_m: f64,
    pub fde_frac: f64,
    pub picp: f64,
    pub aiw_mps: f64,
}

/// Name used for the aggregate blocks.
pub const AGGREGATE: &str = "mean";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub blocks: Vec<ReportBlock>,
    pub aggregates: Vec<ReportBlock>,
}

const BLOCK_KEYS: [&str; 10] = [
    "trajectory",
    "noise_mult",
    "dropout",
    "level",
    "seed",
    "ate_m",
    "rte_m",
    "fde_frac",
    "picp",
    "aiw_mps",
];

impl MetricsReport {
    pub fn from_blocks(blocks: Vec<ReportBlock>) -> Self {
        let mut keys: Vec<(u64, u64, u32)> = Vec::new();
        for b in &blocks {
            let k = (b.noise_mult.to_bits(), b.dropout.to_bits(), b.level);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let aggregates = keys
            .into_iter()
            .map(|(nm, dr, level)| {
                let group: Vec<&ReportBlock> = blocks
                    .iter()
                    .filter(|b| {
                        b.noise_mult.to_bits() == nm
                            && b.dropout.to_bits() == dr
                            && b.level == level
                    })
                    .collect();
                let n = group.len() as f64;
                let mean = |f: fn(&ReportBlock) -> f64| group.iter().map(|b| f(b)).sum::<f64>() / n;
                ReportBlock {
                    trajectory: AGGREGATE.into(),
                    noise_mult: f64::from_bits(nm),
                    dropout: f64::from_bits(dr),
                    level,
                    seed: group[0].seed,
                    ate_m: mean(|b| b.ate_m),
                    rte_m: mean(|b| b.rte_m),
                    fde_frac: mean(|b| b.fde_frac),
                    picp: mean(|b| b.picp),
                    aiw_mps: mean(|b| b.aiw_mps),
                }
            })
            .collect();
        MetricsReport { blocks, aggregates }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{REPORT_MAGIC}\n");
        for (tag, list) in [
            ("[trajectory]", &self.blocks),
            ("[aggregate]", &self.aggregates),
        ] {
            for b in list {
                let _ = write!(
                    s,
                    "\n{tag}\ntrajectory={}\nnoise_mult={}\ndropout={}\nlevel={}\nseed={}\nate_m={}\nrte_m={}\nfde_frac={}\npicp={}\naiw_mps={}\n",
                    b.trajectory, b.noise_mult, b.dropout, b.level, b.seed, b.ate_m, b.rte_m, b.fde_frac, b.picp, b.aiw_mps
                );
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.first().map(|l| l.trim()) != Some(REPORT_MAGIC) {
            return Err(Error::parse(1, format!("expected magic '{REPORT_MAGIC}'")));
        }
        let mut report = MetricsReport::default();
        let mut current: Option<(bool, textfmt::KvBlock, usize)> = None;
        let finish = |cur: Option<(bool, textfmt::KvBlock, usize)>,
                      r: &mut MetricsReport|
         -> Result<()> {
            if let Some((agg, kv, line)) = cur {
                let b = block_from_kv(&kv, line)?;
                if agg {
                    r.aggregates.push(b);
                } else {
                    if !r.aggregates.is_empty() {
                        return Err(Error::parse(line, "trajectory block after the aggregates"));
                    }
                    r.blocks.push(b);
                }
            }
            Ok(())
        };
        for (i, raw) in lines.iter().enumerate().skip(1) {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[trajectory]" | "[aggregate]" => {
                    finish(current.take(), &mut report)?;
                    current = Some((line == "[aggregate]", textfmt::KvBlock::default(), lineno));
                }
                _ => {
                    let Some((_, kv, _)) = current.as_mut() else {
                        return Err(Error::parse(lineno, "key outside a block"));
                    };
                    let (k, v) = textfmt::split_kv(line, lineno)?;
                    kv.insert(k, v, lineno)?;
                }
            }
        }
        finish(current, &mut report)?;
        if report.blocks.is_empty() && report.aggregates.is_empty() {
            return Err(Error::Empty("report has no blocks".into()));
        }
        Ok(report)
    }
}

fn block_from_kv(kv: &textfmt::KvBlock, line: usize) -> Result<ReportBlock> {
    kv.only(&BLOCK_KEYS)?;
    let num = |k: &str| -> Result<f64> {
        let v: f64 = kv.require(k)?;
        if !v.is_finite() {
            return Err(Error::parse(line, format!("non-finite {k}")));
        }
        Ok(v)
    };
    let b = ReportBlock {
        trajectory: kv.require("trajectory")?,
        noise_mult: num("noise_mult")?,
        dropout: num("dropout")?,
        level: kv.require("level")?,
        seed: kv.require("seed")?,
        ate_m: num("ate_m")?,
        rte_m: num("rte_m")?,
        fde_frac: num("fde_frac")?,
        picp: num("picp")?,
        aiw_mps: num("aiw_mps")?,
    };
    if !(0.0..=1.0).contains(&b.picp)
        || b.aiw_mps < 0.0
        || b.fde_frac < 0.0
        || b.ate_m < 0.0
        || b.rte_m < 0.0
    {
        return Err(Error::parse(line, "metric outside its range"));
    }
    Ok(b)
}

/// One evaluated trajectory under one perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    pub name: String,
    pub map_id: usize,
    pub truth: Vec<[f64; 2]>,
    pub inference: Inference,
}

pub fn metrics_blocks(
    r: &TrajectoryResult,
    truth_v: &[[f64; 2]],
    dt: f64,
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<Vec<ReportBlock>> {
    let p = &r.inference.positions;
    let a = ate(&r.truth, p)?;
    let rt = rte(&r.truth, p, dt, RTE_INTERVAL_S)?;
    let f = fde(&r.truth, p)?;
    r.inference
        .intervals
        .iter()
        .map(|(level, q)| {
            Ok(ReportBlock {
                trajectory: r.name.clone(),
                noise_mult: spec.noise_multiplier,
                dropout: spec.dropout_rate,
                level: level.percent(),
                seed,
                ate_m: a,
                rte_m: rt,
                fde_frac: f,
                picp: picp(truth_v, q)?,
                aiw_mps: aiw(q),
            })
        })
        .collect()
}

/// Starting state for a test sequence: the position one step before the
/// first sample and, for simulated walks, a standing start.
pub fn start_state(sample: &TrajectorySample) -> ([f64; 2], [f64; 2]) {
    (sample.truth.anchor(0), [0.0, 0.0])
}

/// Perturbs and evaluates every test trajectory. `perturbation_seed` is
/// combined with the trajectory index so each sequence gets its own noise.
pub fn evaluate_split(
    pipeline: &Pipeline,
    dataset: &Dataset,
    maps: &[DistanceMap],
    levels: &[Level],
    spec: &PerturbationSpec,
    sigma_imu: &[f64; 6],
) -> Result<Vec<(TrajectoryResult, Vec<ReportBlock>)>> {
    let test = dataset.indices(crate::datasim::Split::Test);
    if test.is_empty() {
        return Err(Error::Empty("dataset has no test trajectories".into()));
    }
    test.into_iter()
        .map(|i| {
            let s = &dataset.trajectories[i];
            let spec_i = PerturbationSpec {
                seed: sub_seed(spec.seed, i as u64),
                ..*spec
            };
            let imu = perturb(&s.imu, &spec_i, sigma_imu)?;
            let (start, v1) = start_state(s);
            let inference = infer(pipeline, &imu, &maps[s.map_id], start, v1, levels, None)?;
            let r = TrajectoryResult {
                name: s.name.clone(),
                map_id: s.map_id,
                truth: s.truth.positions().to_vec(),
                inference,
            };
            let blocks = metrics_blocks(&r, s.truth.velocities(), s.truth.dt(), spec, spec.seed)?;
            Ok((r, blocks))
        })
        .collect()
}

/// Clean evaluation on the test split.
pub fn run_eval(
    pipeline: &Pipeline,
    dataset: &Dataset,
    levels: &[Level],
    seed: u64,
) -> Result<(MetricsReport, Vec<TrajectoryResult>)> {
    let maps = pipeline.maps_for(dataset)?;
    let results = evaluate_split(
        pipeline,
        dataset,
        &maps,
        levels,
        &PerturbationSpec::clean(seed),
        &[0.0; 6],
    )?;
    let mut blocks = Vec::new();
    let mut trajs = Vec::new();
    for (r, b) in results {
        blocks.extend(b);
        trajs.push(r);
    }
    Ok((MetricsReport::from_blocks(blocks), trajs))
}

/// The perturbation settings of the protocol: every noise multiplier
/// without dropout, then dropout without noise.
pub fn robustness_settings(dropout: f64, seed: u64) -> Vec<PerturbationSpec> {
    let mut v: Vec<PerturbationSpec> = NOISE_MULTIPLIERS
        .iter()
        .map(|&m| PerturbationSpec {
            noise_multiplier: m,
            dropout_rate: 0.0,
            seed,
        })
        .collect();
    v.push(PerturbationSpec {
        noise_multiplier: 0.0,
        dropout_rate: dropout,
        seed,
    });
    v
}

/// Test-time degradation sweep. `sigma_imu` comes from the training split.
pub fn run_robustness(
    pipeline: &Pipeline,
    dataset: &Dataset,
    levels: &[Level],
    dropout: f64,
    seed: u64,
) -> Result<MetricsReport> {
    let sigma = crate::datasim::estimate_sigma_imu(dataset)?;
    let maps = pipeline.maps_for(dataset)?;
    let mut blocks = Vec::new();
    for spec in robustness_settings(dropout, seed) {
        for (_, b) in evaluate_split(pipeline, dataset, &maps, levels, &spec, &sigma)? {
            blocks.extend(b);
        }
    }
    Ok(MetricsReport::from_blocks(blocks))
}

/// Empirical CDF points `(value, fraction <= value)` of finite inputs.
pub fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| (x, (i + 1) as f64 / n))
        .collect()
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile(&v, 0.5)
}

/// Position error against travelled distance, pooled over trajectories:
/// `(bin centre m, first quartile, median, third quartile)` per bin.
pub fn drift_vs_distance(
    results: &[(&[[f64; 2]], &[[f64; 2]])],
    bin_m: f64,
) -> Result<Vec<(f64, f64, f64, f64)>> {
    if !(bin_m > 0.0) {
        return Err(Error::InvalidArgument(format!("bad bin width {bin_m}")));
    }
    let mut bins: Vec<Vec<f64>> = Vec::new();
    for (truth, pred) in results {
        check_len("drift trajectories", truth.len(), pred.len())?;
        let mut travelled = 0.0;
        for t in 0..truth.len() {
            if t > 0 {
                travelled += sq_dist(truth[t], truth[t - 1]).sqrt();
            }
            let k = (travelled / bin_m) as usize;
            if bins.len() <= k {
                bins.resize(k + 1, Vec::new());
            }
            bins[k].push(sq_dist(truth[t], pred[t]).sqrt());
        }
    }
    Ok(bins
        .into_iter()
        .enumerate()
        .filter(|(_, b)| !b.is_empty())
        .map(|(k, mut b)| {
            b.sort_by(|a, c| a.total_cmp(c));
            (
                (k as f64 + 0.5) * bin_m,
                quantile(&b, 0.25),
                quantile(&b, 0.5),
                quantile(&b, 0.75),
            )
        })
        .collect())
}

/// Fraction of positions whose clearance is below `r_s`.
pub fn infeasible_fraction(positions: &[[f64; 2]], map: &DistanceMap, r_s: f64) -> f64 {
    if positions.is_empty() {
        return 0.0;
    }
    positions.iter().filter(|&&p| map.sample(p) < r_s).count() as f64 / positions.len() as f64
}

#[cfg(test)]
mod tests;
