//! Velocity prediction intervals from a recurrent IMU encoder.
//!
//! The encoder is a two-layer LSTM over per-step inputs built from the
//! global-frame IMU window and the initial velocity. The head emits a
//! midpoint and a raw half-width per axis; the half-width goes through
//! softplus, so the lower bound never exceeds the upper one.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasim::{sub_seed, Window};
use crate::error::{check_len, Error, Result};
use crate::geometry::{Frame, ImuSequence};
use crate::nn::{self, Adam, Linear, Lstm, ParamStore};
use crate::textfmt;

pub const CHECKPOINT_MAGIC: &str = "UMCK1";

/// Per-step input width: horizontal accel (2), vertical accel minus gravity,
/// angular rate (3), initial velocity (2), and the velocity obtained by
/// integrating horizontal acceleration from the initial velocity (2).
pub const INPUT_DIM: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileConfig {
    pub alpha: f64,
    pub hidden: usize,
    pub head_hidden: usize,
}

impl QuantileConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        let cfg = QuantileConfig {
            alpha,
            hidden: 64,
            head_hidden: 64,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::Config(format!(
                "alpha {} outside (0, 0.5)",
                self.alpha
            )));
        }
        if self.hidden == 0 || self.head_hidden == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        Ok(())
    }

    /// Nominal coverage `1 - 2 alpha`.
    pub fn level(&self) -> f64 {
        1.0 - 2.0 * self.alpha
    }
}

/// Lower and upper velocity bounds per step.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSeries {
    lower: Vec<[f64; 2]>,
    upper: Vec<[f64; 2]>,
    alpha: f64,
}

impl QuantileSeries {
    pub fn new(lower: Vec<[f64; 2]>, upper: Vec<[f64; 2]>, alpha: f64) -> Result<Self> {
        check_len("lower vs upper bounds", lower.len(), upper.len())?;
        for (t, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l[0] <= u[0] && l[1] <= u[1]) {
                return Err(Error::InvalidArgument(format!(
                    "crossing interval at step {t}"
                )));
            }
        }
        Ok(QuantileSeries {
            lower,
            upper,
            alpha,
        })
    }

    pub fn lower(&self) -> &[[f64; 2]] {
        &self.lower
    }
    pub fn upper(&self) -> &[[f64; 2]] {
        &self.upper
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn len(&self) -> usize {
        self.lower.len()
    }
    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn concat(parts: &[QuantileSeries]) -> Result<QuantileSeries> {
        let alpha = parts.first().map(|p| p.alpha).unwrap_or(0.05);
        let lower = parts.iter().flat_map(|p| p.lower.iter().copied()).collect();
        let upper = parts.iter().flat_map(|p| p.upper.iter().copied()).collect();
        QuantileSeries::new(lower, upper, alpha)
    }
}

/// Per-step network inputs for one window of global-frame IMU channels.
pub fn input_features(imu: &[[f64; 6]], v1: [f64; 2], dt: f64) -> Vec<[f64; INPUT_DIM]> {
    let g = crate::datasim::GRAVITY;
    let mut v = v1;
    imu.iter()
        .map(|c| {
            let row = [
                c[0],
                c[1],
                c[2] - g,
                c[3],
                c[4],
                c[5],
                v1[0],
                v1[1],
                v[0],
                v[1],
            ];
            // the integral excludes the current sample
            v = [v[0] + dt * c[0], v[1] + dt * c[1]];
            row
        })
        .collect()
}

/// A stack of windows as tensors.
pub struct WindowBatch {
    /// `(B, T, INPUT_DIM)`
    pub inputs: Tensor,
    /// `(B, T, 2)`
    pub velocities: Tensor,
    /// `(B, T, 2)`, relative to each window's anchor.
    pub positions: Tensor,
    /// `(B, 2)` absolute anchor positions.
    pub anchors: Vec<[f64; 2]>,
    pub v1: Tensor,
    pub map_ids: Vec<usize>,
}

impl WindowBatch {
    pub fn new(windows: &[&Window], dt: f64, dtype: DType) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let t = windows[0].len();
        let b = windows.len();
        let dev = Device::Cpu;
        let mut inputs = Vec::with_capacity(b * t * INPUT_DIM);
        let mut vel = Vec::with_capacity(b * t * 2);
        let mut pos = Vec::with_capacity(b * t * 2);
        let mut v1 = Vec::with_capacity(b * 2);
        for w in windows {
            check_len("window lengths in batch", w.len(), t)?;
            for row in input_features(&w.imu, w.v1, dt) {
                inputs.extend_from_slice(&row);
            }
            for v in &w.velocities {
                vel.extend_from_slice(v);
            }
            for p in &w.positions {
                pos.push(p[0] - w.anchor[0]);
                pos.push(p[1] - w.anchor[1]);
            }
            v1.extend_from_slice(&w.v1);
        }
        Ok(WindowBatch {
            inputs: Tensor::from_vec(inputs, (b, t, INPUT_DIM), &dev)?.to_dtype(dtype)?,
            velocities: Tensor::from_vec(vel, (b, t, 2), &dev)?.to_dtype(dtype)?,
            positions: Tensor::from_vec(pos, (b, t, 2), &dev)?.to_dtype(dtype)?,
            anchors: windows.iter().map(|w| w.anchor).collect(),
            v1: Tensor::from_vec(v1, (b, 2), &dev)?.to_dtype(dtype)?,
            map_ids: windows.iter().map(|w| w.map_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Network outputs, each `(B, T, 2)`.
pub struct QuantileOutput {
    pub lower: Tensor,
    pub upper: Tensor,
    pub mid: Tensor,
    pub half: Tensor,
}

impl QuantileOutput {
    /// Splits batch element `b` into an f64 series.
    pub fn series(&self, b: usize, alpha: f64) -> Result<QuantileSeries> {
        let to_pairs = |t: &Tensor| -> Result<Vec<[f64; 2]>> {
            let v = nn::flat(&t.get(b)?)?;
            Ok(v.chunks(2).map(|c| [c[0], c[1]]).collect())
        };
        QuantileSeries::new(to_pairs(&self.lower)?, to_pairs(&self.upper)?, alpha)
    }
}

pub struct QuantileNet {
    store: ParamStore,
    l1: Lstm,
    l2: Lstm,
    h1: Linear,
    h2: Linear,
    cfg: QuantileConfig,
}

impl QuantileNet {
    pub fn new(cfg: &QuantileConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let l1 = Lstm::new(&mut store, "qnet.l1", INPUT_DIM, cfg.hidden)?;
        let l2 = Lstm::new(&mut store, "qnet.l2", cfg.hidden, cfg.hidden)?;
        let h1 = Linear::new(&mut store, "qnet.h1", cfg.hidden, cfg.head_hidden)?;
        let h2 = Linear::new(&mut store, "qnet.h2", cfg.head_hidden, 4)?;
        Ok(QuantileNet {
            store,
            l1,
            l2,
            h1,
            h2,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &QuantileConfig {
        &self.cfg
    }
    pub fn store(&self) -> &ParamStore {
        &self.store
    }
    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// `(B, T, INPUT_DIM)` to `(B, T, hidden)` features.
    pub fn encode(&self, inputs: &Tensor) -> Result<Tensor> {
        let h = self.l1.seq(inputs)?;
        self.l2.seq(&h)
    }

    pub fn predict(&self, features: &Tensor) -> Result<QuantileOutput> {
        let z = self.h1.forward(features)?.relu()?;
        let out = self.h2.forward(&z)?;
        let mid = out.narrow(2, 0, 2)?;
        let half = nn::softplus(&out.narrow(2, 2, 2)?)?;
        Ok(QuantileOutput {
            lower: (&mid - &half)?,
            upper: (&mid + &half)?,
            mid,
            half,
        })
    }

    pub fn forward(&self, inputs: &Tensor) -> Result<(Tensor, QuantileOutput)> {
        let f = self.encode(inputs)?;
        let q = self.predict(&f)?;
        Ok((f, q))
    }

    fn single_input(&self, imu: &[[f64; 6]], v1: [f64; 2], dt: f64) -> Result<Tensor> {
        let rows = input_features(imu, v1, dt);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(
            Tensor::from_vec(flat, (1, rows.len(), INPUT_DIM), &Device::Cpu)?
                .to_dtype(self.dtype())?,
        )
    }

    /// Encodes a global-frame sequence; returns `T` rows of `hidden` features.
    pub fn encode_sequence(&self, seq: &ImuSequence, v1: [f64; 2]) -> Result<Vec<Vec<f64>>> {
        if seq.frame() != Frame::Global {
            return Err(Error::InvalidState(
                "the encoder expects global-frame input".into(),
            ));
        }
        let imu: Vec<[f64; 6]> = seq.samples().iter().map(|s| s.channels()).collect();
        let f = self.encode(&self.single_input(&imu, v1, 1.0 / seq.rate())?)?;
        let h = self.cfg.hidden;
        Ok(nn::flat(&f)?.chunks(h).map(|c| c.to_vec()).collect())
    }

    pub fn predict_window(
        &self,
        imu: &[[f64; 6]],
        v1: [f64; 2],
        dt: f64,
    ) -> Result<QuantileSeries> {
        let (_, q) = self.forward(&self.single_input(imu, v1, dt)?)?;
        q.series(0, self.cfg.alpha)
    }

    pub fn save(&self, dir: &Path, stem: &str, epochs: usize, val_loss: f64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(format!("{stem}.safetensors")))?;
        let text = format!(
            "{CHECKPOINT_MAGIC}\nmodule=qnet\nalpha={}\nhidden={}\nhead_hidden={}\nepochs={epochs}\nval_loss={val_loss}\n",
            self.cfg.alpha, self.cfg.hidden, self.cfg.head_hidden
        );
        textfmt::write_string(&dir.join(format!("{stem}.umck")), &text)
    }

    pub fn load(dir: &Path, stem: &str, dtype: DType) -> Result<(Self, QnetSidecar)> {
        let side_path = dir.join(format!("{stem}.umck"));
        if !side_path.exists() {
            return Err(Error::MissingCheckpoint(side_path));
        }
        let sidecar = QnetSidecar::parse(&textfmt::read_to_string(&side_path)?)?;
        let cfg = QuantileConfig {
            alpha: sidecar.alpha,
            hidden: sidecar.hidden,
            head_hidden: sidecar.head_hidden,
        };
        let net = QuantileNet::new(&cfg, 0, dtype)?;
        net.store.load(&dir.join(format!("{stem}.safetensors")))?;
        Ok((net, sidecar))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QnetSidecar {
    pub alpha: f64,
    pub hidden: usize,
    pub head_hidden: usize,
    pub epochs: usize,
    pub val_loss: f64,
}

impl QnetSidecar {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = textfmt::parse_kv_document(text, Some(CHECKPOINT_MAGIC))?;
        kv.only(&[
            "module",
            "alpha",
            "hidden",
            "head_hidden",
            "epochs",
            "val_loss",
        ])?;
        let module: String = kv.require("module")?;
        if module != "qnet" {
            return Err(Error::Config(format!(
                "expected a qnet checkpoint, found module={module}"
            )));
        }
        let s = QnetSidecar {
            alpha: kv.require("alpha")?,
            hidden: kv.require("hidden")?,
            head_hidden: kv.require("head_hidden")?,
            epochs: kv.require("epochs")?,
            val_loss: kv.require("val_loss")?,
        };
        QuantileConfig {
            alpha: s.alpha,
            hidden: s.hidden,
            head_hidden: s.head_hidden,
        }
        .validate()?;
        if s.hidden > 4096 || s.head_hidden > 4096 {
            return Err(Error::Config("implausible hidden size".into()));
        }
        Ok(s)
    }
}

/// Check function `rho_alpha(u) = max(alpha u, (alpha - 1) u)`.
pub fn checker(u: f64, alpha: f64) -> f64 {
    (alpha * u).max((alpha - 1.0) * u)
}

/// Check function with the two slopes given separately: `above * u` for
/// `u >= 0` and `below * (-u)` otherwise. Passing `alpha` and `1 - alpha`
/// literally avoids forming `alpha - 1`, which is inexact in floating point.
fn rho_split(u: f64, above: f64, below: f64) -> f64 {
    if u >= 0.0 {
        above * u
    } else {
        below * -u
    }
}

/// Pinball loss on cumulative residuals, averaged over `4T` terms.
pub fn pinball_loss(truth: &[[f64; 2]], q: &QuantileSeries) -> Result<f64> {
    check_len("truth vs quantiles", truth.len(), q.len())?;
    if truth.is_empty() {
        return Err(Error::Empty("pinball loss over zero steps".into()));
    }
    let a = q.alpha();
    let b = 1.0 - a;
    let mut cum_l = [0.0; 2];
    let mut cum_u = [0.0; 2];
    let mut total = 0.0;
    for t in 0..truth.len() {
        for k in 0..2 {
            cum_l[k] += truth[t][k] - q.lower[t][k];
            cum_u[k] += truth[t][k] - q.upper[t][k];
            total += rho_split(cum_l[k], a, b) + rho_split(cum_u[k], b, a);
        }
    }
    Ok(total / (4 * truth.len()) as f64)
}

/// `u * (tau - 1[u < 0])` with the indicator held constant, so the
/// derivative at `u = 0` is `tau`.
fn checker_tensor(u: &Tensor, tau: f64) -> Result<Tensor> {
    let below = u.lt(0.0)?.to_dtype(u.dtype())?.detach();
    let weight = below.affine(-1.0, tau)?;
    Ok((u * weight)?)
}

/// Tensor form of [`pinball_loss`] over `(B, T, 2)` inputs, averaged over the
/// batch.
pub fn pinball_loss_tensor(
    truth: &Tensor,
    lower: &Tensor,
    upper: &Tensor,
    alpha: f64,
) -> Result<Tensor> {
    if truth.dims() != lower.dims() || truth.dims() != upper.dims() {
        return Err(Error::LengthMismatch {
            what: "pinball loss operands",
            left: truth.elem_count(),
            right: lower.elem_count().min(upper.elem_count()),
        });
    }
    let rl = (truth - lower)?.cumsum(1)?;
    let ru = (truth - upper)?.cumsum(1)?;
    let terms = (checker_tensor(&rl, alpha)? + checker_tensor(&ru, 1.0 - alpha)?)?;
    Ok((terms.mean_all()? * 0.5)?)
}

/// Multiplies the learning rate by `factor` once more than `patience`
/// consecutive epochs fail to improve the monitored loss.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch; returns the multiplier to apply to the learning rate.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best * (1.0 - self.threshold) {
            self.best = metric;
            self.bad_epochs = 0;
            return 1.0;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return self.factor;
        }
        1.0
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Stop after this many epochs without a new best validation loss.
    pub early_stop: Option<usize>,
    pub rotate: bool,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub dt: f64,
}

impl QuantileTrainConfig {
    pub fn new(seed: u64) -> Self {
        QuantileTrainConfig {
            epochs: 30,
            batch: 16,
            lr: 1e-3,
            plateau_factor: 0.75,
            plateau_patience: 15,
            early_stop: Some(8),
            rotate: true,
            grad_clip: Some(5.0),
            seed,
            dt: 1.0 / 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `None` for epoch 0, which only evaluates the untrained model.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub lr: f64,
}

/// Mean validation loss over fixed (unrotated) batches.
pub fn evaluate_quantile(
    net: &QuantileNet,
    windows: &[Window],
    batch: usize,
    dt: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in windows.chunks(batch.max(1)) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let b = WindowBatch::new(&refs, dt, net.dtype())?;
        let (_, q) = net.forward(&b.inputs)?;
        let l = nn::scalar(&pinball_loss_tensor(
            &b.velocities,
            &q.lower,
            &q.upper,
            net.cfg.alpha,
        )?)?;
        total += l * chunk.len() as f64;
        count += chunk.len();
    }
    if count == 0 {
        return Err(Error::Empty("no validation windows".into()));
    }
    Ok(total / count as f64)
}

/// Trains `net` in place and leaves it at the best-validation parameters.
/// Epoch 0 of the returned history is the untrained model.
pub fn train_quantile_into(
    net: &QuantileNet,
    train: &[Window],
    val: &[Window],
    cfg: &QuantileTrainConfig,
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty(
            "quantile training needs train and validation windows".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0x51));
    let mut opt = Adam::new(net.store.all_vars(), cfg.lr, cfg.grad_clip)?;
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let alpha = net.cfg.alpha;

    let v0 = evaluate_quantile(net, val, cfg.batch, cfg.dt)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: v0,
        lr: cfg.lr,
    }];
    let mut best = (v0, net.store.snapshot()?);
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.batch) {
            let windows: Vec<Window> = chunk
                .iter()
                .map(|&i| {
                    if cfg.rotate {
                        train[i].rotated(rng.random_range(0.0..std::f64::consts::TAU))
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Window> = windows.iter().collect();
            let b = WindowBatch::new(&refs, cfg.dt, net.dtype())?;
            let (_, q) = net.forward(&b.inputs)?;
            let loss = pinball_loss_tensor(&b.velocities, &q.lower, &q.upper, alpha)?;
            let l = nn::scalar(&loss)?;
            if !l.is_finite() {
                return Err(Error::Divergence(format!(
                    "quantile loss {l} at epoch {epoch}"
                )));
            }
            opt.backward_step(&loss)?;
            sum += l * chunk.len() as f64;
            n += chunk.len();
        }
        let val_loss = evaluate_quantile(net, val, cfg.batch, cfg.dt)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "validation loss {val_loss} at epoch {epoch}"
            )));
        }
        let k = sched.step(val_loss);
        if k != 1.0 {
            opt.set_learning_rate(opt.learning_rate() * k);
        }
        history.push(EpochRecord {
            epoch,
            train_loss: Some(sum / n as f64),
            val_loss,
            lr: opt.learning_rate(),
        });
        log::info!(
            "qnet alpha={alpha} epoch {epoch}: train {:.5} val {val_loss:.5}",
            sum / n as f64
        );
        if val_loss < best.0 {
            best = (val_loss, net.store.snapshot()?);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    net.store.restore(&best.1)?;
    Ok(history)
}

pub fn train_quantile(
    train: &[Window],
    val: &[Window],
    qcfg: &QuantileConfig,
    cfg: &QuantileTrainConfig,
    dtype: DType,
) -> Result<(QuantileNet, Vec<EpochRecord>)> {
    let net = QuantileNet::new(qcfg, sub_seed(cfg.seed, 0x50), dtype)?;
    let history = train_quantile_into(&net, train, val, cfg)?;
    Ok((net, history))
}

/// Best validation loss in a history.
pub fn best_val(history: &[EpochRecord]) -> f64 {
    history
        .iter()
        .map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn series(lower: Vec<[f64; 2]>, upper: Vec<[f64; 2]>, alpha: f64) -> QuantileSeries {
        QuantileSeries::new(lower, upper, alpha).unwrap()
    }

    #[test]
    fn checker_unit_cases() {
        assert_eq!(checker(0.0, 0.05), 0.0);
        assert!((checker(2.0, 0.05) - 0.1).abs() < 1e-15);
        assert!((checker(-2.0, 0.05) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn worked_single_step_example() {
        let q = series(vec![[0.5, 0.0]], vec![[1.5, 0.0]], 0.05);
        assert_eq!(pinball_loss(&[[1.0, 0.0]], &q).unwrap(), 0.0125);
    }

    #[test]
    fn truth_on_both_bounds_gives_zero() {
        let v = vec![[0.3, -0.2], [1.0, 0.5]];
        let q = series(v.clone(), v.clone(), 0.16);
        assert_eq!(pinball_loss(&v, &q).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_error() {
        let q = series(vec![[0.0, 0.0]], vec![[1.0, 1.0]], 0.05);
        assert!(pinball_loss(&[[0.0, 0.0], [0.0, 0.0]], &q).is_err());
    }

    fn tensors(v: &[[f64; 2]]) -> Tensor {
        let flat: Vec<f64> = v.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (1, v.len(), 2), &Device::Cpu).unwrap()
    }

    #[test]
    fn tensor_form_matches_scalar_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = rng.random_range(1..30);
            let v: Vec<[f64; 2]> = (0..t)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let mid: Vec<[f64; 2]> = v
                .iter()
                .map(|x| [x[0] + rng.random_range(-0.3..0.3), x[1]])
                .collect();
            let half: Vec<[f64; 2]> = (0..t)
                .map(|_| [rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)])
                .collect();
            let lo: Vec<[f64; 2]> = mid
                .iter()
                .zip(&half)
                .map(|(m, h)| [m[0] - h[0], m[1] - h[1]])
                .collect();
            let hi: Vec<[f64; 2]> = mid
                .iter()
                .zip(&half)
                .map(|(m, h)| [m[0] + h[0], m[1] + h[1]])
                .collect();
            let a = pinball_loss(&v, &series(lo.clone(), hi.clone(), 0.16)).unwrap();
            let b = nn::scalar(
                &pinball_loss_tensor(&tensors(&v), &tensors(&lo), &tensors(&hi), 0.16).unwrap(),
            )
            .unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = 7;
        let v: Vec<[f64; 2]> = (0..t)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let lo: Vec<[f64; 2]> = v
            .iter()
            .map(|x| {
                [
                    x[0] - rng.random_range(-0.4..0.6),
                    x[1] - rng.random_range(-0.4..0.6),
                ]
            })
            .collect();
        let hi: Vec<[f64; 2]> = lo
            .iter()
            .map(|x| {
                [
                    x[0] + rng.random_range(0.1..0.8),
                    x[1] + rng.random_range(0.1..0.8),
                ]
            })
            .collect();
        let alpha = 0.05;
        let lo_var = candle_core::Var::from_tensor(&tensors(&lo)).unwrap();
        let hi_var = candle_core::Var::from_tensor(&tensors(&hi)).unwrap();
        let loss = pinball_loss_tensor(&tensors(&v), lo_var.as_tensor(), hi_var.as_tensor(), alpha)
            .unwrap();
        let grads = loss.backward().unwrap();
        let g_lo = nn::flat(grads.get(lo_var.as_tensor()).unwrap()).unwrap();
        let g_hi = nn::flat(grads.get(hi_var.as_tensor()).unwrap()).unwrap();
        let f = |lo: &[[f64; 2]], hi: &[[f64; 2]]| {
            pinball_loss(
                &v,
                &QuantileSeries {
                    lower: lo.to_vec(),
                    upper: hi.to_vec(),
                    alpha,
                },
            )
            .unwrap()
        };
        let h = 1e-5;
        for idx in 0..2 * t {
            let (s, k) = (idx / 2, idx % 2);
            for (which, g) in [(0, &g_lo), (1, &g_hi)] {
                let (mut a, mut b) = (lo.clone(), hi.clone());
                let (mut c, mut d) = (lo.clone(), hi.clone());
                if which == 0 {
                    a[s][k] += h;
                    c[s][k] -= h;
                } else {
                    b[s][k] += h;
                    d[s][k] -= h;
                }
                let fd = (f(&a, &b) - f(&c, &d)) / (2.0 * h);
                let an = g[idx];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                    "{which} {idx}: fd {fd} an {an}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn axis_swap_leaves_loss_unchanged(
            raw in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -1.0f64..1.0, -1.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..20),
            alpha in 0.01f64..0.49,
        ) {
            let v: Vec<[f64; 2]> = raw.iter().map(|r| [r.0, r.1]).collect();
            let lo: Vec<[f64; 2]> = raw.iter().map(|r| [r.0 + r.2 - r.4, r.1 + r.3 - r.5]).collect();
            let hi: Vec<[f64; 2]> = raw.iter().map(|r| [r.0 + r.2 + r.4, r.1 + r.3 + r.5]).collect();
            let swap = |x: &Vec<[f64; 2]>| x.iter().map(|p| [p[1], p[0]]).collect::<Vec<_>>();
            let a = pinball_loss(&v, &series(lo.clone(), hi.clone(), alpha)).unwrap();
            let b = pinball_loss(&swap(&v), &series(swap(&lo), swap(&hi), alpha)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        #[test]
        fn widening_around_inside_truth_costs_alpha_per_unit(
            raw in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, 0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0), 1..20),
            eps in 0.0f64..0.2,
            alpha in 0.01f64..0.49,
        ) {
            // every cumulative residual keeps its sign, so the loss grows
            // linearly: alpha * eps * (T + 1) / 2
            let v: Vec<[f64; 2]> = raw.iter().map(|r| [r.0, r.1]).collect();
            let lo: Vec<[f64; 2]> = raw.iter().map(|r| [r.0 - r.2, r.1 - r.3]).collect();
            let hi: Vec<[f64; 2]> = raw.iter().map(|r| [r.0 + r.4, r.1 + r.5]).collect();
            let lo2: Vec<[f64; 2]> = lo.iter().map(|p| [p[0] - eps, p[1] - eps]).collect();
            let hi2: Vec<[f64; 2]> = hi.iter().map(|p| [p[0] + eps, p[1] + eps]).collect();
            let a = pinball_loss(&v, &series(lo, hi, alpha)).unwrap();
            let b = pinball_loss(&v, &series(lo2, hi2, alpha)).unwrap();
            let t = v.len() as f64;
            prop_assert!((b - a - alpha * eps * (t + 1.0) / 2.0).abs() <= 1e-9);
        }

        #[test]
        fn widening_toward_outside_truth_never_increases_loss(
            raw in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, 0.3f64..1.0, 0.3f64..1.0), 1..20),
            eps in 0.0f64..0.2,
            alpha in 0.01f64..0.49,
        ) {
            // truth sits above the whole interval on x and below it on y,
            // with margins wider than eps
            let v: Vec<[f64; 2]> = raw.iter().map(|r| [r.0, r.1]).collect();
            let lo: Vec<[f64; 2]> = raw.iter().map(|r| [r.0 - r.2 - 0.2, r.1 + r.3]).collect();
            let hi: Vec<[f64; 2]> = raw.iter().map(|r| [r.0 - r.2, r.1 + r.3 + 0.2]).collect();
            let lo2: Vec<[f64; 2]> = lo.iter().map(|p| [p[0] - eps, p[1] - eps]).collect();
            let hi2: Vec<[f64; 2]> = hi.iter().map(|p| [p[0] + eps, p[1] + eps]).collect();
            let a = pinball_loss(&v, &series(lo, hi, alpha)).unwrap();
            let b = pinball_loss(&v, &series(lo2, hi2, alpha)).unwrap();
            prop_assert!(b <= a + 1e-12, "{} > {}", b, a);
        }
    }

    fn toy_windows(n: usize, seed: u64) -> Vec<Window> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|k| {
                let speed = rng.random_range(0.5..1.5);
                let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let v = [speed * heading.cos(), speed * heading.sin()];
                let imu: Vec<[f64; 6]> = (0..20)
                    .map(|_| {
                        [
                            rng.random_range(-0.1..0.1),
                            rng.random_range(-0.1..0.1),
                            9.81,
                            0.0,
                            0.0,
                            0.0,
                        ]
                    })
                    .collect();
                let positions = (1..=20)
                    .map(|t| [v[0] * t as f64 / 60.0, v[1] * t as f64 / 60.0])
                    .collect();
                Window {
                    imu,
                    velocities: vec![v; 20],
                    positions,
                    v1: v,
                    anchor: [0.0, 0.0],
                    map_id: 0,
                    traj: k,
                    start: 0,
                }
            })
            .collect()
    }

    #[test]
    fn output_shapes_and_non_crossing() {
        let cfg = QuantileConfig {
            alpha: 0.05,
            hidden: 8,
            head_hidden: 8,
        };
        let net = QuantileNet::new(&cfg, 1, DType::F64).unwrap();
        let w = toy_windows(3, 1);
        let refs: Vec<&Window> = w.iter().collect();
        let b = WindowBatch::new(&refs, 1.0 / 60.0, DType::F64).unwrap();
        let (f, q) = net.forward(&b.inputs).unwrap();
        assert_eq!(f.dims(), &[3, 20, 8]);
        assert_eq!(q.lower.dims(), &[3, 20, 2]);
        let lo = nn::flat(&q.lower).unwrap();
        let hi = nn::flat(&q.upper).unwrap();
        assert!(lo.iter().zip(&hi).all(|(l, u)| l <= u));
    }

    #[test]
    fn encoder_is_causal() {
        let cfg = QuantileConfig {
            alpha: 0.05,
            hidden: 16,
            head_hidden: 8,
        };
        let net = QuantileNet::new(&cfg, 2, DType::F64).unwrap();
        let w = &toy_windows(1, 2)[0];
        let mut imu = w.imu.clone();
        let base = net.single_input(&imu, w.v1, 1.0 / 60.0).unwrap();
        imu[15][0] += 3.0;
        let moved = net.single_input(&imu, w.v1, 1.0 / 60.0).unwrap();
        let a = nn::flat(&net.encode(&base).unwrap()).unwrap();
        let b = nn::flat(&net.encode(&moved).unwrap()).unwrap();
        for t in 0..15 {
            for k in 0..16 {
                assert!((a[t * 16 + k] - b[t * 16 + k]).abs() <= 1e-9);
            }
        }
        assert!((15 * 16..20 * 16).any(|i| a[i] != b[i]));
        assert_eq!(a, nn::flat(&net.encode(&base).unwrap()).unwrap());
    }

    #[test]
    fn body_frame_sequence_rejected() {
        use crate::geometry::{ImuSample, Quaternion};
        let cfg = QuantileConfig {
            alpha: 0.05,
            hidden: 4,
            head_hidden: 4,
        };
        let net = QuantileNet::new(&cfg, 2, DType::F64).unwrap();
        let samples = (0..3)
            .map(|t| ImuSample {
                t: t as f64,
                accel: [0.0; 3],
                gyro: [0.0; 3],
            })
            .collect();
        let seq =
            ImuSequence::new(samples, vec![Quaternion::IDENTITY; 3], Frame::Body, 1.0).unwrap();
        assert!(matches!(
            net.encode_sequence(&seq, [0.0, 0.0]),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn zero_half_width_collapses_bounds() {
        let cfg = QuantileConfig {
            alpha: 0.05,
            hidden: 4,
            head_hidden: 4,
        };
        let net = QuantileNet::new(&cfg, 2, DType::F64).unwrap();
        // a huge negative raw half-width drives softplus to zero
        let b = net.h2.bias().clone();
        let mut vals = nn::flat(&b).unwrap();
        vals[2] = -1e3;
        vals[3] = -1e3;
        let w = nn::flat(net.h2.weight())
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 4 >= 2 { 0.0 } else { *v })
            .collect::<Vec<_>>();
        let store = net.store();
        let mut snap = store.snapshot().unwrap();
        snap.insert("qnet.h2.b".into(), vals);
        snap.insert("qnet.h2.w".into(), w);
        store.restore(&snap).unwrap();
        let win = &toy_windows(1, 3)[0];
        let q = net.predict_window(&win.imu, win.v1, 1.0 / 60.0).unwrap();
        assert_eq!(q.lower(), q.upper());
    }

    #[test]
    fn scheduler_reduces_after_patience_plus_one_bad_epochs() {
        let mut s = PlateauScheduler::new(0.75, 15);
        assert_eq!(s.step(1.0), 1.0);
        for k in 0..15 {
            assert_eq!(s.step(1.0), 1.0, "epoch {k}");
        }
        assert_eq!(s.step(1.0), 0.75);
        assert_eq!(s.bad_epochs(), 0);
    }

    #[test]
    fn training_improves_and_is_reproducible() {
        let train = toy_windows(48, 4);
        let val = toy_windows(16, 5);
        let qcfg = QuantileConfig {
            alpha: 0.16,
            hidden: 8,
            head_hidden: 8,
        };
        let mut cfg = QuantileTrainConfig::new(1);
        cfg.epochs = 4;
        let (_, h1) = train_quantile(&train, &val, &qcfg, &cfg, DType::F32).unwrap();
        let (_, h2) = train_quantile(&train, &val, &qcfg, &cfg, DType::F32).unwrap();
        assert_eq!(h1, h2);
        assert!(best_val(&h1) <= h1[0].val_loss);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_validation_loss() {
        let train = toy_windows(16, 6);
        let val = toy_windows(8, 7);
        let qcfg = QuantileConfig {
            alpha: 0.05,
            hidden: 8,
            head_hidden: 8,
        };
        let mut cfg = QuantileTrainConfig::new(2);
        cfg.epochs = 1;
        let (net, h) = train_quantile(&train, &val, &qcfg, &cfg, DType::F32).unwrap();
        let before = evaluate_quantile(&net, &val, 16, cfg.dt).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path(), "qnet", h.len() - 1, before).unwrap();
        let (back, side) = QuantileNet::load(dir.path(), "qnet", DType::F32).unwrap();
        assert_eq!(side.alpha, 0.05);
        let after = evaluate_quantile(&back, &val, 16, cfg.dt).unwrap();
        assert!((before - after).abs() <= 1e-6);
    }

    #[test]
    fn sidecar_rejects_unknown_keys_and_wrong_module() {
        let good =
            "UMCK1\nmodule=qnet\nalpha=0.05\nhidden=8\nhead_hidden=8\nepochs=3\nval_loss=0.1\n";
        assert!(QnetSidecar::parse(good).is_ok());
        assert!(QnetSidecar::parse(&good.replace("module=qnet", "module=cgan")).is_err());
        assert!(QnetSidecar::parse(&format!("{good}extra=1\n")).is_err());
        assert!(QnetSidecar::parse(&good.replace("alpha=0.05", "alpha=0.7")).is_err());
    }
}
