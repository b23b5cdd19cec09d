//! Three-phase curriculum: quantile pretraining, CGAN training with the
//! quantile module frozen, then joint fine-tuning.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cgan::{
    adversarial_losses, feasibility_loss, generator_loss, supervised_loss, Discriminator,
    FeasSchedule, GanConfig, GenCondition, Generator, MapBank,
};
use crate::datasim::{sub_seed, windowize, Dataset, Split, Window};
use crate::error::{Error, Result};
use crate::mapkit::{DistanceMap, SAFETY_MARGIN};
use crate::nn::{self, Adam};
use crate::qnet::{
    pinball_loss_tensor, train_quantile_into, EpochRecord, QuantileConfig, QuantileNet,
    QuantileTrainConfig, WindowBatch,
};
use crate::textfmt;

/// Distance value of the "no map information" field.
pub const UNIFORM_MAP_VALUE: f64 = 10.0;
pub const CONFIG_FILE: &str = "config.txt";
pub const CGAN_STEM: &str = "cgan";
pub const DISC_FILE: &str = "cgan_disc.safetensors";
pub const JOINT_CGAN_STEM: &str = "joint_cgan";
pub const JOINT_DISC_FILE: &str = "joint_cgan_disc.safetensors";
pub const TRAINING_DTYPE: DType = DType::F32;

pub fn qnet_stem(alpha: f64) -> String {
    format!("qnet_a{alpha}")
}

pub fn joint_qnet_stem(alpha: f64) -> String {
    format!("joint_qnet_a{alpha}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Quantile,
    Cgan,
    Joint,
    All,
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(Phase::Quantile),
            "cgan" => Ok(Phase::Cgan),
            "joint" => Ok(Phase::Joint),
            "all" => Ok(Phase::All),
            _ => Err(Error::Config(format!("unknown phase '{s}'"))),
        }
    }
}

/// Which distance field the generator and its losses see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMode {
    Map,
    Uniform,
}

impl MapMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MapMode::Map => "map",
            MapMode::Uniform => "uniform",
        }
    }
}

impl FromStr for MapMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(MapMode::Map),
            "uniform" => Ok(MapMode::Uniform),
            _ => Err(Error::Config(format!("unknown map mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub profile: String,
    pub seed: u64,
    /// Interval levels trained in phase 1, one quantile model each.
    pub alphas: Vec<f64>,
    /// The level whose quantiles condition the generator.
    pub cond_alpha: f64,
    pub hidden: usize,
    pub head_hidden: usize,
    pub quantile_epochs: usize,
    pub cgan_iterations: u64,
    pub joint_iterations: u64,
    pub lr_quantile: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub joint_lr_scale: f64,
    pub batch: usize,
    pub window: usize,
    pub train_stride: usize,
    pub val_stride: usize,
    pub disc_steps_per_gen: usize,
    /// Fractions of the phase-2 budget: adversarial weight is 0 for the
    /// first `adv_warmup`, then rises linearly to 1 over `adv_anneal`.
    pub adv_warmup: f64,
    pub adv_anneal: f64,
    pub feas_start: f64,
    pub feas_ramp: f64,
    pub feas_max: f64,
    pub lambda_sup: f64,
    pub gamma: f64,
    pub r_s: f64,
    pub map_mode: MapMode,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// 0 disables early stopping.
    pub early_stop: usize,
    pub grad_clip: f64,
    pub log_every: u64,
    pub val_every: u64,
    /// Cap on validation windows used during CGAN phases (0 = all).
    pub val_windows: usize,
}

const KEYS: &[&str] = &[
    "profile",
    "seed",
    "alphas",
    "cond_alpha",
    "hidden",
    "head_hidden",
    "quantile_epochs",
    "cgan_iterations",
    "joint_iterations",
    "lr_quantile",
    "lr_generator",
    "lr_discriminator",
    "joint_lr_scale",
    "batch",
    "window",
    "train_stride",
    "val_stride",
    "disc_steps_per_gen",
    "adv_warmup",
    "adv_anneal",
    "feas_start",
    "feas_ramp",
    "feas_max",
    "lambda_sup",
    "gamma",
    "r_s",
    "map_mode",
    "plateau_factor",
    "plateau_patience",
    "early_stop",
    "grad_clip",
    "log_every",
    "val_every",
    "val_windows",
];

impl TrainConfig {
    /// Budgets that fit a laptop CPU.
    pub fn desk(seed: u64) -> Self {
        let n = 2000;
        TrainConfig {
            profile: "desk".into(),
            seed,
            alphas: vec![0.16, 0.05, 0.025],
            cond_alpha: 0.025,
            hidden: 32,
            head_hidden: 32,
            quantile_epochs: 30,
            cgan_iterations: n,
            joint_iterations: 500,
            lr_quantile: 1e-3,
            lr_generator: 1e-4,
            lr_discriminator: 2e-4,
            joint_lr_scale: 0.1,
            batch: 16,
            window: 120,
            train_stride: 30,
            val_stride: 60,
            disc_steps_per_gen: 2,
            adv_warmup: 0.1,
            adv_anneal: 0.1,
            // the published ramp scaled from 50k iterations to this budget
            feas_start: 0.2 * n as f64,
            feas_ramp: 0.04 * n as f64,
            feas_max: 0.5,
            lambda_sup: crate::cgan::LAMBDA_SUP,
            gamma: crate::cgan::GAMMA,
            r_s: SAFETY_MARGIN,
            map_mode: MapMode::Map,
            plateau_factor: 0.75,
            plateau_patience: 15,
            early_stop: 8,
            grad_clip: 5.0,
            log_every: 10,
            val_every: 100,
            val_windows: 64,
        }
    }

    /// The published budgets and schedule.
    pub fn paper(seed: u64) -> Self {
        let s = FeasSchedule::PAPER;
        TrainConfig {
            profile: "paper".into(),
            hidden: 128,
            head_hidden: 64,
            quantile_epochs: 150,
            cgan_iterations: 50_000,
            joint_iterations: 5_000,
            feas_start: s.start,
            feas_ramp: s.ramp,
            feas_max: s.max,
            early_stop: 0,
            val_every: 1000,
            log_every: 100,
            val_windows: 0,
            ..TrainConfig::desk(seed)
        }
    }

    pub fn profile(name: &str, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::desk(seed)),
            "paper" => Ok(TrainConfig::paper(seed)),
            _ => Err(Error::Config(format!("unknown profile '{name}'"))),
        }
    }

    /// Parses `key=value` lines over a profile (`profile=`, default desk).
    /// Unknown keys are rejected. Without a `seed` line, `default_seed` is used.
    pub fn parse(text: &str, default_seed: u64) -> Result<Self> {
        let kv = textfmt::parse_kv_document(text, None)?;
        kv.only(KEYS)?;
        let profile: String = kv.get("profile")?.unwrap_or_else(|| "desk".into());
        let seed = kv.get("seed")?.unwrap_or(default_seed);
        let mut c = TrainConfig::profile(&profile, seed)?;
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = kv.get(stringify!($field))? { c.$field = v; }
            )*};
        }
        set!(
            cond_alpha,
            hidden,
            head_hidden,
            quantile_epochs,
            cgan_iterations,
            joint_iterations,
            lr_quantile,
            lr_generator,
            lr_discriminator,
            joint_lr_scale,
            batch,
            window,
            train_stride,
            val_stride,
            disc_steps_per_gen,
            adv_warmup,
            adv_anneal,
            feas_start,
            feas_ramp,
            feas_max,
            lambda_sup,
            gamma,
            r_s,
            map_mode,
            plateau_factor,
            plateau_patience,
            early_stop,
            grad_clip,
            log_every,
            val_every,
            val_windows
        );
        if let Some(raw) = kv.raw("alphas") {
            c.alphas = raw
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad alpha '{t}'")))
                })
                .collect::<Result<_>>()?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Every field, in a form [`TrainConfig::parse`] reads back identically.
    pub fn to_text(&self) -> String {
        let alphas: Vec<String> = self.alphas.iter().map(|a| a.to_string()).collect();
        let mut s = String::new();
        let fields: Vec<(&str, String)> = vec![
            ("profile", self.profile.clone()),
            ("seed", self.seed.to_string()),
            ("alphas", alphas.join(",")),
            ("cond_alpha", self.cond_alpha.to_string()),
            ("hidden", self.hidden.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("quantile_epochs", self.quantile_epochs.to_string()),
            ("cgan_iterations", self.cgan_iterations.to_string()),
            ("joint_iterations", self.joint_iterations.to_string()),
            ("lr_quantile", self.lr_quantile.to_string()),
            ("lr_generator", self.lr_generator.to_string()),
            ("lr_discriminator", self.lr_discriminator.to_string()),
            ("joint_lr_scale", self.joint_lr_scale.to_string()),
            ("batch", self.batch.to_string()),
            ("window", self.window.to_string()),
            ("train_stride", self.train_stride.to_string()),
            ("val_stride", self.val_stride.to_string()),
            ("disc_steps_per_gen", self.disc_steps_per_gen.to_string()),
            ("adv_warmup", self.adv_warmup.to_string()),
            ("adv_anneal", self.adv_anneal.to_string()),
            ("feas_start", self.feas_start.to_string()),
            ("feas_ramp", self.feas_ramp.to_string()),
            ("feas_max", self.feas_max.to_string()),
            ("lambda_sup", self.lambda_sup.to_string()),
            ("gamma", self.gamma.to_string()),
            ("r_s", self.r_s.to_string()),
            ("map_mode", self.map_mode.as_str().into()),
            ("plateau_factor", self.plateau_factor.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("early_stop", self.early_stop.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("log_every", self.log_every.to_string()),
            ("val_every", self.val_every.to_string()),
            ("val_windows", self.val_windows.to_string()),
        ];
        for (k, v) in fields {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.window == 0 || self.train_stride == 0 || self.val_stride == 0 {
            return bad("batch, window and strides must be at least 1".into());
        }
        if self.alphas.is_empty() {
            return bad("at least one alpha is required".into());
        }
        for &a in self.alphas.iter().chain([self.cond_alpha].iter()) {
            if !(a > 0.0 && a < 0.5) {
                return bad(format!("alpha {a} outside (0, 0.5)"));
            }
        }
        if !self.alphas.contains(&self.cond_alpha) {
            return bad(format!(
                "cond_alpha {} is not among the trained alphas",
                self.cond_alpha
            ));
        }
        if self.hidden == 0 || self.head_hidden == 0 {
            return bad("network sizes must be positive".into());
        }
        let nonneg = [
            ("lr_quantile", self.lr_quantile),
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("joint_lr_scale", self.joint_lr_scale),
            ("adv_warmup", self.adv_warmup),
            ("adv_anneal", self.adv_anneal),
            ("feas_start", self.feas_start),
            ("feas_ramp", self.feas_ramp),
            ("feas_max", self.feas_max),
            ("lambda_sup", self.lambda_sup),
            ("gamma", self.gamma),
            ("r_s", self.r_s),
            ("plateau_factor", self.plateau_factor),
            ("grad_clip", self.grad_clip),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be finite and non-negative, got {v}"));
            }
        }
        if self.gamma > 1.0 {
            return bad(format!("gamma {} above 1", self.gamma));
        }
        if self.log_every == 0 || self.val_every == 0 {
            return bad("log_every and val_every must be at least 1".into());
        }
        Ok(())
    }

    pub fn quantile_config(&self, alpha: f64) -> QuantileConfig {
        QuantileConfig {
            alpha,
            hidden: self.hidden,
            head_hidden: self.head_hidden,
        }
    }

    pub fn quantile_train_config(&self, dt: f64) -> QuantileTrainConfig {
        QuantileTrainConfig {
            epochs: self.quantile_epochs,
            batch: self.batch,
            lr: self.lr_quantile,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            early_stop: (self.early_stop > 0).then_some(self.early_stop),
            rotate: true,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            seed: self.seed,
            dt,
        }
    }

    pub fn gan_config(&self, dt: f64) -> GanConfig {
        GanConfig {
            dt,
            ..GanConfig::new(self.hidden)
        }
    }

    pub fn feas_schedule(&self) -> FeasSchedule {
        FeasSchedule {
            start: self.feas_start,
            ramp: self.feas_ramp,
            max: self.feas_max,
        }
    }

    /// Adversarial weight at phase-2 iteration `i` (1-based).
    pub fn adv_weight(&self, i: u64) -> f64 {
        let n = self.cgan_iterations as f64;
        let start = self.adv_warmup * n;
        let len = self.adv_anneal * n;
        let x = i as f64 - start;
        if x <= 0.0 {
            0.0
        } else if len <= 0.0 {
            1.0
        } else {
            (x / len).min(1.0)
        }
    }

    /// First phase-2 iteration at which every loss term has its full weight.
    pub fn full_objective_from(&self) -> u64 {
        let adv = (self.adv_warmup + self.adv_anneal) * self.cgan_iterations as f64;
        let feas = if self.feas_max > 0.0 {
            self.feas_start + self.feas_ramp
        } else {
            0.0
        };
        adv.max(feas).ceil() as u64
    }
}

/// Windows and maps prepared for training.
pub struct TrainData {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub bank: MapBank,
    pub dt: f64,
}

/// Distance fields as the generator sees them under `mode`.
pub fn mode_maps(dataset: &Dataset, mode: MapMode) -> Result<Vec<DistanceMap>> {
    dataset
        .maps
        .iter()
        .map(|m| match mode {
            MapMode::Map => Ok(m.distance.clone()),
            MapMode::Uniform => m.distance.uniform_like(UNIFORM_MAP_VALUE),
        })
        .collect()
}

pub fn sample_rate(dataset: &Dataset) -> Result<f64> {
    let first = dataset
        .trajectories
        .first()
        .ok_or_else(|| Error::Empty("dataset has no trajectories".into()))?;
    let rate = first.imu.rate();
    if dataset.trajectories.iter().any(|t| t.imu.rate() != rate) {
        return Err(Error::InvalidArgument(
            "trajectories have different sample rates".into(),
        ));
    }
    Ok(rate)
}

impl TrainData {
    pub fn new(dataset: &Dataset, cfg: &TrainConfig, dtype: DType) -> Result<Self> {
        let dt = 1.0 / sample_rate(dataset)?;
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, s) in dataset.trajectories.iter().enumerate() {
            match s.split {
                Split::Train => train.extend(windowize(s, i, cfg.window, cfg.train_stride)),
                Split::Val => val.extend(windowize(s, i, cfg.window, cfg.val_stride)),
                Split::Test => {}
            }
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::Empty(format!(
                "need training and validation windows, got {} and {}",
                train.len(),
                val.len()
            )));
        }
        let bank = MapBank::new(mode_maps(dataset, cfg.map_mode)?, dtype)?;
        Ok(TrainData {
            train,
            val,
            bank,
            dt,
        })
    }

    /// Validation windows for the CGAN phases, evenly thinned to the cap.
    pub fn val_subset(&self, cap: usize) -> Vec<&Window> {
        let n = self.val.len();
        if cap == 0 || n <= cap {
            return self.val.iter().collect();
        }
        (0..cap).map(|k| &self.val[k * n / cap]).collect()
    }
}

/// A batch with everything the generator and discriminator consume.
pub struct GanBatch {
    pub cond: GenCondition,
    pub z: Tensor,
    pub p0: Tensor,
    /// Absolute truth positions `(B, T, 2)`.
    pub truth_p: Tensor,
    pub truth_v: Tensor,
    pub map_ids: Vec<usize>,
    /// Quantile loss of the conditioning model on this batch.
    pub l_q: Option<Tensor>,
}

pub fn anchors_tensor(anchors: &[[f64; 2]], dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = anchors.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (anchors.len(), 2), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn standard_normal(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize),
    dtype: DType,
) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2;
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Builds a generator batch. With `train_qnet` the quantile outputs keep
/// their graph (joint phase); otherwise they are detached.
pub fn gan_batch(
    windows: &[&Window],
    qnet: &QuantileNet,
    bank: &MapBank,
    z: Tensor,
    dt: f64,
    train_qnet: bool,
) -> Result<GanBatch> {
    let dtype = qnet.dtype();
    let b = WindowBatch::new(windows, dt, dtype)?;
    let (features, q) = qnet.forward(&b.inputs)?;
    let (features, lower, upper, l_q) = if train_qnet {
        let l_q = pinball_loss_tensor(&b.velocities, &q.lower, &q.upper, qnet.config().alpha)?;
        (features, q.lower, q.upper, Some(l_q))
    } else {
        (features.detach(), q.lower.detach(), q.upper.detach(), None)
    };
    let (norm_scale, norm_offset) = bank.normalizers(&b.map_ids)?;
    let p0 = anchors_tensor(&b.anchors, dtype)?;
    let truth_p = b.positions.broadcast_add(&p0.unsqueeze(1)?)?;
    Ok(GanBatch {
        cond: GenCondition {
            features,
            lower,
            upper,
            maps: bank.batch(&b.map_ids)?,
            norm_scale,
            norm_offset,
        },
        z,
        p0,
        truth_p,
        truth_v: b.velocities,
        map_ids: b.map_ids,
        l_q,
    })
}

/// A generator/discriminator pair with their optimizers.
pub struct GanModels {
    pub gen: Generator,
    pub disc: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub d_updates: u64,
    pub g_updates: u64,
}

impl GanModels {
    pub fn new(
        gen: Generator,
        disc: Discriminator,
        lr_g: f64,
        lr_d: f64,
        clip: Option<f64>,
    ) -> Result<Self> {
        let opt_g = Adam::new(gen.store().all_vars(), lr_g, clip)?;
        let opt_d = Adam::new(disc.store().all_vars(), lr_d, clip)?;
        Ok(GanModels {
            gen,
            disc,
            opt_g,
            opt_d,
            d_updates: 0,
            g_updates: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepWeights {
    pub w_adv: f64,
    pub lambda_feas: f64,
    pub lambda_sup: f64,
    pub gamma: f64,
    pub r_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_d: f64,
    pub l_adv: f64,
    pub l_feas: f64,
    pub l_sup: f64,
    pub l_g: f64,
    pub l_q: Option<f64>,
}

impl StepLosses {
    pub fn is_finite(&self) -> bool {
        [
            self.l_d,
            self.l_adv,
            self.l_feas,
            self.l_sup,
            self.l_g,
            self.l_q.unwrap_or(0.0),
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One two-time-scale update: `disc_steps` discriminator updates against a
/// single generated batch, then one generator update. Returns the losses and
/// the generator-step gradients (which also reach the quantile model when
/// the batch kept its graph).
pub fn ttur_step(
    models: &mut GanModels,
    batch: &GanBatch,
    maps: &[&DistanceMap],
    w: &StepWeights,
    disc_steps: usize,
) -> Result<(StepLosses, GradStore)> {
    let c = &batch.cond;
    let (v_hat, p_hat) = models.gen.generate(c, &batch.z, &batch.p0, true)?;
    let fake = v_hat.detach();
    let mut l_d = f64::NAN;
    for _ in 0..disc_steps {
        l_d = discriminator_step(models, batch, &fake)?;
    }
    let d_fake = models
        .disc
        .discriminate(&v_hat, &c.lower, &c.upper, &c.maps)?;
    let ones = Tensor::ones_like(&d_fake)?;
    let (_, l_adv) = adversarial_losses(&ones, &d_fake)?;
    let l_feas = feasibility_loss(&p_hat, maps, w.r_s)?;
    let l_sup = supervised_loss(&batch.truth_p, &batch.truth_v, &p_hat, &v_hat, w.gamma)?;
    let l_g = generator_loss(
        &l_adv,
        &l_feas,
        &l_sup,
        w.w_adv,
        w.lambda_feas,
        w.lambda_sup,
    )?;
    let total = match &batch.l_q {
        Some(l_q) => (&l_g + l_q)?,
        None => l_g.clone(),
    };
    let losses = StepLosses {
        l_d,
        l_adv: nn::scalar(&l_adv)?,
        l_feas: nn::scalar(&l_feas)?,
        l_sup: nn::scalar(&l_sup)?,
        l_g: nn::scalar(&l_g)?,
        l_q: batch.l_q.as_ref().map(nn::scalar).transpose()?,
    };
    if !losses.is_finite() {
        return Err(Error::Divergence(format!("generator losses {losses:?}")));
    }
    let grads = total.backward()?;
    models.opt_g.step(&grads)?;
    models.g_updates += 1;
    Ok((losses, grads))
}

/// One discriminator update on real velocities versus the detached `fake`.
pub fn discriminator_step(models: &mut GanModels, batch: &GanBatch, fake: &Tensor) -> Result<f64> {
    let c = &batch.cond;
    let lower = c.lower.detach();
    let upper = c.upper.detach();
    let summary = models.disc.map_summary(&c.maps)?;
    let d_real = models
        .disc
        .forward(&batch.truth_v, &lower, &upper, &summary)?;
    let d_fake = models.disc.forward(fake, &lower, &upper, &summary)?;
    let (loss, _) = adversarial_losses(&d_real, &d_fake)?;
    let l_d = nn::scalar(&loss)?;
    if !l_d.is_finite() {
        return Err(Error::Divergence(format!("discriminator loss {l_d}")));
    }
    models.opt_d.backward_step(&loss)?;
    models.d_updates += 1;
    Ok(l_d)
}

/// Held-out `L_sup` with zero noise and the encoder in eval mode.
pub fn validation_sup(
    gen: &Generator,
    qnet: &QuantileNet,
    windows: &[&Window],
    bank: &MapBank,
    batch: usize,
    dt: f64,
    gamma: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in windows.chunks(batch.max(1)) {
        let t = chunk[0].len();
        let z = Tensor::zeros(
            (chunk.len(), t, gen.config().z_dim),
            qnet.dtype(),
            &Device::Cpu,
        )?;
        let b = gan_batch(chunk, qnet, bank, z, dt, false)?;
        let (v, p) = gen.generate(&b.cond, &b.z, &b.p0, false)?;
        let l = nn::scalar(&supervised_loss(&b.truth_p, &b.truth_v, &p, &v, gamma)?)?;
        total += l * chunk.len() as f64;
        count += chunk.len();
    }
    if count == 0 {
        return Err(Error::Empty("no validation windows".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub phase: String,
    pub iteration: u64,
    pub losses: StepLosses,
    pub w_adv: f64,
    pub lambda_feas: f64,
    pub val_sup: Option<f64>,
}

pub fn format_gan_history(rows: &[IterRecord]) -> String {
    let mut s = String::from(
        "phase\titeration\tl_d\tl_adv\tl_feas\tl_sup\tl_g\tl_q\tw_adv\tlambda_feas\tval_sup\n",
    );
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| x.to_string());
    for r in rows {
        let l = &r.losses;
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.phase,
            r.iteration,
            l.l_d,
            l.l_adv,
            l.l_feas,
            l.l_sup,
            l.l_g,
            opt(l.l_q),
            r.w_adv,
            r.lambda_feas,
            opt(r.val_sup)
        );
    }
    s
}

/// Reads `(iteration, lambda_feas, val_sup)` back from a CGAN history file.
pub fn parse_gan_history(text: &str) -> Result<Vec<(u64, f64, Option<f64>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.starts_with("phase\titeration") => {}
        _ => return Err(Error::parse(1, "missing history header")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 11 {
                return Err(Error::parse(
                    i + 1,
                    format!("expected 11 columns, got {}", cols.len()),
                ));
            }
            let it = cols[1]
                .parse()
                .map_err(|_| Error::parse(i + 1, "bad iteration"))?;
            let lf = textfmt::parse_f64(cols[9], i + 1)?;
            let val = if cols[10] == "-" {
                None
            } else {
                Some(textfmt::parse_f64(cols[10], i + 1)?)
            };
            Ok((it, lf, val))
        })
        .collect()
}

pub fn format_qnet_history(rows: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\ttrain_loss\tval_loss\tlr\n");
    for r in rows {
        let tl = r.train_loss.map_or("-".to_string(), |v| v.to_string());
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.epoch, tl, r.val_loss, r.lr);
    }
    s
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurriculumReport {
    pub quantile: Vec<(f64, Vec<EpochRecord>)>,
    pub cgan: Vec<IterRecord>,
    pub joint: Vec<IterRecord>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    textfmt::write_string(path, text)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "{what} needs {} from an earlier phase",
            path.display()
        )));
    }
    Ok(())
}

/// Runs `phase` (or all three in order), writing checkpoints, histories and
/// the resolved config to `out`.
pub fn run_curriculum(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out: &Path,
    phase: Phase,
) -> Result<CurriculumReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let data = TrainData::new(dataset, cfg, TRAINING_DTYPE)?;
    let mut report = CurriculumReport::default();
    if matches!(phase, Phase::Quantile | Phase::All) {
        report.quantile = run_quantile_phase(&data, cfg, out)?;
    }
    if matches!(phase, Phase::Cgan | Phase::All) {
        report.cgan = run_cgan_phase(&data, cfg, out)?;
    }
    if matches!(phase, Phase::Joint | Phase::All) {
        report.joint = run_joint_phase(&data, cfg, out)?;
    }
    Ok(report)
}

pub fn run_quantile_phase(
    data: &TrainData,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<Vec<(f64, Vec<EpochRecord>)>> {
    let qcfg = cfg.quantile_train_config(data.dt);
    let mut all = Vec::new();
    for &alpha in &cfg.alphas {
        let net = QuantileNet::new(
            &cfg.quantile_config(alpha),
            sub_seed(cfg.seed, 0x50),
            TRAINING_DTYPE,
        )?;
        let stem = qnet_stem(alpha);
        let history = train_quantile_into(&net, &data.train, &data.val, &qcfg)?;
        let best = crate::qnet::best_val(&history);
        net.save(out, &stem, history.len() - 1, best)?;
        write(
            &out.join(format!("history_{stem}.tsv")),
            &format_qnet_history(&history),
        )?;
        all.push((alpha, history));
    }
    Ok(all)
}

/// The frozen conditioning model of phase 2.
pub fn load_cond_qnet(cfg: &TrainConfig, dir: &Path) -> Result<QuantileNet> {
    let stem = qnet_stem(cfg.cond_alpha);
    require_file(&dir.join(format!("{stem}.umck")), "the cgan phase")?;
    let (net, _) = QuantileNet::load(dir, &stem, TRAINING_DTYPE)?;
    Ok(net)
}

struct LoopSpec<'a> {
    phase: &'static str,
    iterations: u64,
    /// Offset added to the loop counter for the feasibility schedule.
    schedule_offset: u64,
    adv_full: bool,
    qnet_opt: Option<&'a mut Adam>,
    select_from: u64,
}

fn gan_loop(
    data: &TrainData,
    cfg: &TrainConfig,
    qnet: &QuantileNet,
    models: &mut GanModels,
    spec: LoopSpec<'_>,
    seed_tag: u64,
) -> Result<LoopOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, seed_tag));
    let schedule = cfg.feas_schedule();
    let val = data.val_subset(cfg.val_windows);
    let train_qnet = spec.qnet_opt.is_some();
    let mut qnet_opt = spec.qnet_opt;
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let snapshot = |m: &GanModels| -> Result<_> {
        Ok((
            m.gen.store().snapshot()?,
            m.disc.store().snapshot()?,
            qnet.store().snapshot()?,
        ))
    };
    let mut best: Option<(f64, _)> = None;
    let mut last_val_snapshot = snapshot(models)?;
    let mut last_val = None;
    let mut outcome = Ok(());
    for i in 1..=spec.iterations {
        if order.len() < cfg.batch {
            let mut fresh: Vec<usize> = (0..data.train.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..cfg.batch.min(order.len())).collect();
        let windows: Vec<&Window> = idx.iter().map(|&k| &data.train[k]).collect();
        let z = standard_normal(
            &mut rng,
            (windows.len(), windows[0].len(), models.gen.config().z_dim),
            qnet.dtype(),
        )?;
        let batch = gan_batch(&windows, qnet, &data.bank, z, data.dt, train_qnet)?;
        let maps: Vec<&DistanceMap> = batch.map_ids.iter().map(|&k| data.bank.map(k)).collect();
        let si = spec.schedule_offset + i;
        let weights = StepWeights {
            w_adv: if spec.adv_full {
                1.0
            } else {
                cfg.adv_weight(i)
            },
            lambda_feas: schedule.value(si),
            lambda_sup: cfg.lambda_sup,
            gamma: cfg.gamma,
            r_s: cfg.r_s,
        };
        let step = ttur_step(models, &batch, &maps, &weights, cfg.disc_steps_per_gen);
        let losses = match step {
            Ok((losses, grads)) => {
                if let Some(opt) = qnet_opt.as_deref_mut() {
                    opt.step(&grads)?;
                }
                losses
            }
            Err(Error::Divergence(msg)) => {
                log::error!(
                    "{} iteration {i}: {msg}; keeping the last good checkpoint",
                    spec.phase
                );
                outcome = Err(Error::Divergence(format!(
                    "{} iteration {i}: {msg}",
                    spec.phase
                )));
                break;
            }
            Err(e) => return Err(e),
        };
        let validate = i % cfg.val_every == 0 || i == spec.iterations;
        let val_sup = if validate {
            let v = validation_sup(
                &models.gen,
                qnet,
                &val,
                &data.bank,
                cfg.batch,
                data.dt,
                cfg.gamma,
            )?;
            if !v.is_finite() {
                outcome = Err(Error::Divergence(format!(
                    "{} validation loss {v} at {i}",
                    spec.phase
                )));
                break;
            }
            last_val_snapshot = snapshot(models)?;
            last_val = Some(v);
            let eligible = i >= spec.select_from.min(spec.iterations);
            if eligible && best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, last_val_snapshot.clone()));
            }
            log::info!("{} iteration {i}: val L_sup {v:.5}", spec.phase);
            Some(v)
        } else {
            None
        };
        if i % cfg.log_every == 0 || validate {
            history.push(IterRecord {
                phase: spec.phase.into(),
                iteration: si,
                losses,
                w_adv: weights.w_adv,
                lambda_feas: weights.lambda_feas,
                val_sup,
            });
        }
    }
    let (selected_val, (g, d, q)) = match best {
        Some(b) => b,
        None => (last_val.unwrap_or(f64::NAN), last_val_snapshot),
    };
    models.gen.store().restore(&g)?;
    models.disc.store().restore(&d)?;
    if train_qnet {
        qnet.store().restore(&q)?;
    }
    Ok(LoopOutcome {
        history,
        selected_val,
        outcome,
    })
}

struct LoopOutcome {
    history: Vec<IterRecord>,
    /// Validation `L_sup` of the parameters the loop left in place.
    selected_val: f64,
    outcome: Result<()>,
}

pub fn run_cgan_phase(data: &TrainData, cfg: &TrainConfig, out: &Path) -> Result<Vec<IterRecord>> {
    let qnet = load_cond_qnet(cfg, out)?;
    let gcfg = cfg.gan_config(data.dt);
    let gen = Generator::new(&gcfg, sub_seed(cfg.seed, 0x60), TRAINING_DTYPE)?;
    let disc = Discriminator::new(&gcfg, sub_seed(cfg.seed, 0x61), TRAINING_DTYPE)?;
    let clip = (cfg.grad_clip > 0.0).then_some(cfg.grad_clip);
    let mut models = GanModels::new(gen, disc, cfg.lr_generator, cfg.lr_discriminator, clip)?;
    let spec = LoopSpec {
        phase: "cgan",
        iterations: cfg.cgan_iterations,
        schedule_offset: 0,
        adv_full: false,
        qnet_opt: None,
        select_from: cfg.full_objective_from(),
    };
    let LoopOutcome {
        history,
        selected_val,
        outcome,
    } = gan_loop(data, cfg, &qnet, &mut models, spec, 0x62)?;
    models
        .gen
        .save(out, CGAN_STEM, models.g_updates, selected_val)?;
    models.disc.store().save(&out.join(DISC_FILE))?;
    write(&out.join("history_cgan.tsv"), &format_gan_history(&history))?;
    outcome.map(|_| history)
}

pub fn run_joint_phase(data: &TrainData, cfg: &TrainConfig, out: &Path) -> Result<Vec<IterRecord>> {
    let qnet = load_cond_qnet(cfg, out)?;
    require_file(&out.join(format!("{CGAN_STEM}.umck")), "the joint phase")?;
    let (gen, _) = Generator::load(out, CGAN_STEM, TRAINING_DTYPE)?;
    let disc = Discriminator::new(gen.config(), 0, TRAINING_DTYPE)?;
    disc.store().load(&out.join(DISC_FILE))?;
    let k = cfg.joint_lr_scale;
    let clip = (cfg.grad_clip > 0.0).then_some(cfg.grad_clip);
    let mut models = GanModels::new(
        gen,
        disc,
        cfg.lr_generator * k,
        cfg.lr_discriminator * k,
        clip,
    )?;
    let mut qopt = Adam::new(qnet.store().all_vars(), cfg.lr_quantile * k, clip)?;
    let spec = LoopSpec {
        phase: "joint",
        iterations: cfg.joint_iterations,
        schedule_offset: cfg.cgan_iterations,
        adv_full: true,
        qnet_opt: Some(&mut qopt),
        select_from: 0,
    };
    let LoopOutcome {
        history,
        selected_val: best,
        outcome,
    } = gan_loop(data, cfg, &qnet, &mut models, spec, 0x63)?;
    models
        .gen
        .save(out, JOINT_CGAN_STEM, models.g_updates, best)?;
    models.disc.store().save(&out.join(JOINT_DISC_FILE))?;
    qnet.save(out, &joint_qnet_stem(cfg.cond_alpha), 0, best)?;
    write(
        &out.join("history_joint.tsv"),
        &format_gan_history(&history),
    )?;
    outcome.map(|_| history)
}
