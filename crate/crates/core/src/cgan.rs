//! Map-conditioned trajectory generator, its discriminator and losses.
//!
//! The generator decodes one step at a time. Each step queries the encoded
//! map with the IMU feature of that step plus the previous position
//! (normalized to the map's feature lattice), decodes a velocity correction
//! around the quantile midpoint from `[z_t, c_t, q^L_t, q^U_t]`, and
//! integrates it into the next position.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};

use crate::error::{check_len, Error, Result};
use crate::mapkit::{DistanceMap, SAFETY_MARGIN};
use crate::nn::{self, BatchNorm2d, Conv2d, Linear, Lstm, ParamStore};
use crate::qnet::CHECKPOINT_MAGIC;
use crate::textfmt;

pub const GAMMA: f64 = 0.3;
pub const LAMBDA_SUP: f64 = 5.0;
pub const DT: f64 = 0.0167;
pub const MAP_CHANNELS: usize = 64;
pub const COORD_CHANNELS: usize = 2;
pub const PROB_CLAMP: f64 = 1e-7;
/// Distance values above this saturate in the network's map input.
pub const MAP_INPUT_CLIP: f64 = 4.0;

/// Piecewise-linear feasibility weight `min(max, max(0, max * (i - start) / ramp))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasSchedule {
    pub start: f64,
    pub ramp: f64,
    pub max: f64,
}

impl FeasSchedule {
    pub const PAPER: FeasSchedule = FeasSchedule {
        start: 10_000.0,
        ramp: 2_000.0,
        max: 0.5,
    };

    pub fn value(&self, i: u64) -> f64 {
        if self.ramp <= 0.0 {
            return if i as f64 >= self.start {
                self.max
            } else {
                0.0
            };
        }
        self.max
            .min((self.max * (i as f64 - self.start) / self.ramp).max(0.0))
    }
}

/// The feasibility weight schedule with its published constants.
pub fn lambda_feas(i: u64) -> f64 {
    FeasSchedule::PAPER.value(i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_sup: f64,
    pub gamma: f64,
    pub r_s: f64,
    pub feas: FeasSchedule,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sup: LAMBDA_SUP,
            gamma: GAMMA,
            r_s: SAFETY_MARGIN,
            feas: FeasSchedule::PAPER,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanConfig {
    /// Width of the IMU features coming from the quantile encoder.
    pub imu_hidden: usize,
    pub d: usize,
    pub heads: usize,
    pub z_dim: usize,
    pub dec_hidden: usize,
    pub disc_hidden: usize,
    pub dt: f64,
}

impl GanConfig {
    pub fn new(imu_hidden: usize) -> Self {
        GanConfig {
            imu_hidden,
            d: 32,
            heads: 4,
            z_dim: 16,
            dec_hidden: 64,
            disc_hidden: 32,
            dt: DT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention dimension {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if [
            self.imu_hidden,
            self.d,
            self.z_dim,
            self.dec_hidden,
            self.disc_hidden,
        ]
        .contains(&0)
        {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("bad dt {}", self.dt)));
        }
        Ok(())
    }
}

/// Feature lattice size after three stride-2 convolutions.
pub fn feature_size(n: usize) -> usize {
    let mut n = n;
    for _ in 0..3 {
        n = (n - 1) / 2 + 1;
    }
    n
}

fn linspace_unit(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|k| -1.0 + 2.0 * k as f64 / (n - 1) as f64)
        .collect()
}

/// Coordinate channels `(2, hr, wr)`: channel 0 holds x (column), channel 1
/// holds y (row), both spanning `[-1, 1]` with the first cell at -1.
pub fn coord_channels(hr: usize, wr: usize, dtype: DType) -> Result<Tensor> {
    let xs = linspace_unit(wr);
    let ys = linspace_unit(hr);
    let mut data = Vec::with_capacity(2 * hr * wr);
    for _ in 0..hr {
        data.extend_from_slice(&xs);
    }
    for &y in &ys {
        data.extend(std::iter::repeat_n(y, wr));
    }
    Ok(Tensor::from_vec(data, (2, hr, wr), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Network view of a distance field, `(1, H, W)`, saturated and scaled to [0, 1].
pub fn map_input(map: &DistanceMap, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = map
        .values()
        .iter()
        .map(|v| v.min(MAP_INPUT_CLIP) / MAP_INPUT_CLIP)
        .collect();
    Ok(Tensor::from_vec(data, (1, map.height(), map.width()), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Affine map from global position to the normalized feature-lattice
/// coordinates used by the coordinate channels: `norm = a * p + b` per axis.
pub fn position_normalizer(map: &DistanceMap) -> ([f64; 2], [f64; 2]) {
    let r = map.resolution();
    let o = map.origin();
    let mut a = [0.0; 2];
    let mut b = [0.0; 2];
    for (k, n) in [map.width(), map.height()].into_iter().enumerate() {
        let nr = feature_size(n);
        if nr == 1 {
            continue;
        }
        // grid coordinate g = (p - o) / r; feature coordinate f = (g + 0.5) nr / n - 0.5
        let s = nr as f64 / n as f64;
        let k2 = 2.0 / (nr - 1) as f64;
        a[k] = k2 * s / r;
        b[k] = -1.0 + k2 * ((0.5 - o[k] / r) * s - 0.5);
    }
    (a, b)
}

/// The distance fields a model is trained or evaluated against, with their
/// network inputs precomputed.
pub struct MapBank {
    maps: Vec<DistanceMap>,
    inputs: Vec<Tensor>,
    dtype: DType,
}

impl MapBank {
    pub fn new(maps: Vec<DistanceMap>, dtype: DType) -> Result<Self> {
        let inputs = maps
            .iter()
            .map(|m| map_input(m, dtype))
            .collect::<Result<_>>()?;
        Ok(MapBank {
            maps,
            inputs,
            dtype,
        })
    }

    pub fn map(&self, id: usize) -> &DistanceMap {
        &self.maps[id]
    }
    pub fn maps(&self) -> &[DistanceMap] {
        &self.maps
    }
    pub fn len(&self) -> usize {
        self.maps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// `(B, 1, H, W)` inputs for a batch of map ids.
    pub fn batch(&self, ids: &[usize]) -> Result<Tensor> {
        let parts: Vec<&Tensor> = ids.iter().map(|&i| &self.inputs[i]).collect();
        Ok(Tensor::stack(&parts, 0)?)
    }

    /// Per-element `(scale, offset)` tensors `(B, 2)` for position normalization.
    pub fn normalizers(&self, ids: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut a = Vec::with_capacity(ids.len() * 2);
        let mut b = Vec::with_capacity(ids.len() * 2);
        for &i in ids {
            let (sa, sb) = position_normalizer(&self.maps[i]);
            a.extend_from_slice(&sa);
            b.extend_from_slice(&sb);
        }
        let n = ids.len();
        Ok((
            Tensor::from_vec(a, (n, 2), &Device::Cpu)?.to_dtype(self.dtype)?,
            Tensor::from_vec(b, (n, 2), &Device::Cpu)?.to_dtype(self.dtype)?,
        ))
    }
}

/// Three stride-2 conv stages (16, 32, 64 channels) with batch norm and ReLU,
/// then the two coordinate channels.
pub struct MapEncoder {
    convs: Vec<(Conv2d, BatchNorm2d)>,
}

impl MapEncoder {
    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        let chans = [1, 16, 32, MAP_CHANNELS];
        let mut convs = Vec::new();
        for k in 0..3 {
            convs.push((
                Conv2d::new(
                    store,
                    &format!("{name}.conv{k}"),
                    chans[k],
                    chans[k + 1],
                    3,
                    2,
                    1,
                )?,
                BatchNorm2d::new(store, &format!("{name}.bn{k}"), chans[k + 1])?,
            ));
        }
        Ok(MapEncoder { convs })
    }

    /// `(B, 1, H, W)` to `(B, 66, Hr, Wr)`.
    pub fn forward(&self, maps: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = maps.clone();
        for (conv, bn) in &self.convs {
            x = bn.forward(&conv.forward(&x)?, train)?.relu()?;
        }
        let (b, _, hr, wr) = x.dims4()?;
        let coords = coord_channels(hr, wr, x.dtype())?
            .unsqueeze(0)?
            .broadcast_as((b, COORD_CHANNELS, hr, wr))?;
        Ok(Tensor::cat(&[&x, &coords], 1)?)
    }
}

/// `(B, C, Hr, Wr)` to `(B, Hr*Wr, C)`.
pub fn flatten_cells(fm: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = fm.dims4()?;
    Ok(fm.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Multi-head scaled dot-product attention from a query sequence onto map
/// cells. One linear projection each for queries, keys and values; head
/// outputs are concatenated.
pub struct CrossAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    heads: usize,
    d: usize,
}

/// Keys and values split into heads, each `(B, heads, N, d/heads)`.
pub struct KeyValues {
    k: Tensor,
    v: Tensor,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        q_in: usize,
        kv_in: usize,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention dimension {d} not divisible by {heads} heads"
            )));
        }
        Ok(CrossAttention {
            wq: Linear::new(store, &format!("{name}.wq"), q_in, d)?,
            wk: Linear::new(store, &format!("{name}.wk"), kv_in, d)?,
            wv: Linear::new(store, &format!("{name}.wv"), kv_in, d)?,
            heads,
            d,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, self.d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Projects flattened map cells `(B, N, kv_in)`.
    pub fn key_values(&self, cells: &Tensor) -> Result<KeyValues> {
        Ok(KeyValues {
            k: self.split_heads(&self.wk.forward(cells)?)?,
            v: self.split_heads(&self.wv.forward(cells)?)?,
        })
    }

    /// Attends queries `(B, T, q_in)`; returns the context `(B, T, d)` and the
    /// attention weights `(B, heads, T, N)`.
    pub fn attend(&self, queries: &Tensor, kv: &KeyValues) -> Result<(Tensor, Tensor)> {
        let (b, t, _) = queries.dims3()?;
        let expected = self.wq.weight().dims()[0];
        if queries.dim(2)? != expected {
            return Err(Error::Config(format!(
                "query width {} does not match the projection input {expected}",
                queries.dim(2)?
            )));
        }
        let q = self.split_heads(&self.wq.forward(queries)?)?;
        let scale = 1.0 / ((self.d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&kv.k.transpose(2, 3)?)? * scale)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = weights
            .matmul(&kv.v)?
            .transpose(1, 2)?
            .reshape((b, t, self.d))?;
        Ok((ctx, weights))
    }

    /// Queries `(B, T, q_in)` against an encoded map `(B, C, Hr, Wr)`.
    pub fn cross_attend(&self, queries: &Tensor, fm: &Tensor) -> Result<(Tensor, Tensor)> {
        let cells = flatten_cells(fm)?;
        if cells.dim(2)? != self.wk.weight().dims()[0] {
            return Err(Error::Config(format!(
                "map feature width {} does not match the key projection input {}",
                cells.dim(2)?,
                self.wk.weight().dims()[0]
            )));
        }
        let kv = self.key_values(&cells)?;
        self.attend(queries, &kv)
    }
}

/// Conditioning inputs for one batch, all `(B, T, ·)` unless noted.
pub struct GenCondition {
    pub features: Tensor,
    pub lower: Tensor,
    pub upper: Tensor,
    /// `(B, 1, H, W)` map inputs.
    pub maps: Tensor,
    /// `(B, 2)` position normalizers from [`MapBank::normalizers`].
    pub norm_scale: Tensor,
    pub norm_offset: Tensor,
}

pub struct Generator {
    store: ParamStore,
    encoder: MapEncoder,
    attention: CrossAttention,
    decoder: Lstm,
    head: Linear,
    cfg: GanConfig,
}

impl Generator {
    pub fn new(cfg: &GanConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let encoder = MapEncoder::new(&mut store, "gen.map")?;
        let attention = CrossAttention::new(
            &mut store,
            "gen.att",
            cfg.imu_hidden + 2,
            MAP_CHANNELS + COORD_CHANNELS,
            cfg.d,
            cfg.heads,
        )?;
        let decoder = Lstm::new(&mut store, "gen.dec", cfg.z_dim + cfg.d + 4, cfg.dec_hidden)?;
        let head = Linear::new(&mut store, "gen.head", cfg.dec_hidden, 2)?;
        // start close to the quantile midpoint
        let snap = store.snapshot()?;
        let mut small = snap.clone();
        for key in ["gen.head.w", "gen.head.b"] {
            small.insert(key.into(), snap[key].iter().map(|v| v * 0.1).collect());
        }
        store.restore(&small)?;
        Ok(Generator {
            store,
            encoder,
            attention,
            decoder,
            head,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.cfg
    }
    pub fn store(&self) -> &ParamStore {
        &self.store
    }
    pub fn attention(&self) -> &CrossAttention {
        &self.attention
    }

    pub fn encode_map(&self, maps: &Tensor, train: bool) -> Result<Tensor> {
        self.encoder.forward(maps, train)
    }

    /// Decodes velocities `(B, T, 2)` and absolute positions `(B, T, 2)` from
    /// `p0` `(B, 2)`, the position one step before the window.
    pub fn generate(
        &self,
        cond: &GenCondition,
        z: &Tensor,
        p0: &Tensor,
        train: bool,
    ) -> Result<(Tensor, Tensor)> {
        let (b, t, _) = cond.features.dims3()?;
        if z.dims() != [b, t, self.cfg.z_dim] {
            return Err(Error::Config(format!(
                "noise shape {:?}, expected {:?}",
                z.dims(),
                [b, t, self.cfg.z_dim]
            )));
        }
        let fm = self.encode_map(&cond.maps, train)?;
        let kv = self.attention.key_values(&flatten_cells(&fm)?)?;
        let mid = ((&cond.lower + &cond.upper)? * 0.5)?;
        // decoder input projections for the parts known up front
        let mut state = self.decoder.zero_state(b, z.dtype(), z.device())?;
        let mut p = p0.clone();
        let mut vs = Vec::with_capacity(t);
        let mut ps = Vec::with_capacity(t);
        for k in 0..t {
            let feat = cond.features.narrow(1, k, 1)?.squeeze(1)?;
            let pn = p.mul(&cond.norm_scale)?.add(&cond.norm_offset)?;
            let query = Tensor::cat(&[&feat, &pn], 1)?.unsqueeze(1)?;
            let (ctx, _) = self.attention.attend(&query, &kv)?;
            let ctx = ctx.squeeze(1)?;
            let input = Tensor::cat(
                &[
                    &z.narrow(1, k, 1)?.squeeze(1)?,
                    &ctx,
                    &cond.lower.narrow(1, k, 1)?.squeeze(1)?,
                    &cond.upper.narrow(1, k, 1)?.squeeze(1)?,
                ],
                1,
            )?;
            state = self.decoder.step(&input, &state)?;
            let v = (mid.narrow(1, k, 1)?.squeeze(1)? + self.head.forward(&state.h)?)?;
            p = (p + (&v * self.cfg.dt)?)?;
            vs.push(v);
            ps.push(p.clone());
        }
        Ok((Tensor::stack(&vs, 1)?, Tensor::stack(&ps, 1)?))
    }

    pub fn save(&self, dir: &Path, stem: &str, iterations: u64, val_loss: f64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(format!("{stem}.safetensors")))?;
        textfmt::write_string(
            &dir.join(format!("{stem}.umck")),
            &CganSidecar::from_config(&self.cfg, iterations, val_loss).to_text(),
        )
    }

    pub fn load(dir: &Path, stem: &str, dtype: DType) -> Result<(Self, CganSidecar)> {
        let side_path = dir.join(format!("{stem}.umck"));
        if !side_path.exists() {
            return Err(Error::MissingCheckpoint(side_path));
        }
        let side = CganSidecar::parse(&textfmt::read_to_string(&side_path)?)?;
        let g = Generator::new(&side.config, 0, dtype)?;
        g.store.load(&dir.join(format!("{stem}.safetensors")))?;
        Ok((g, side))
    }
}

/// Integrates velocities from `p0` with period `dt`.
pub fn integrate_positions(p0: [f64; 2], v: &[[f64; 2]], dt: f64) -> Vec<[f64; 2]> {
    let mut p = p0;
    v.iter()
        .map(|v| {
            p = [p[0] + dt * v[0], p[1] + dt * v[1]];
            p
        })
        .collect()
}

/// Velocity and quantile-sequence encoders plus a small map CNN, fused by an
/// MLP into a probability. IMU features are deliberately not an input.
pub struct Discriminator {
    store: ParamStore,
    vel: Lstm,
    quant: Lstm,
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

impl Discriminator {
    pub fn new(cfg: &GanConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let h = cfg.disc_hidden;
        let vel = Lstm::new(&mut store, "disc.vel", 2, h)?;
        let quant = Lstm::new(&mut store, "disc.quant", 4, h)?;
        let chans = [1, 8, 16, h];
        let convs = (0..3)
            .map(|k| {
                Conv2d::new(
                    &mut store,
                    &format!("disc.conv{k}"),
                    chans[k],
                    chans[k + 1],
                    3,
                    2,
                    1,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fc1 = Linear::new(&mut store, "disc.fc1", 3 * h, 2 * h)?;
        let fc2 = Linear::new(&mut store, "disc.fc2", 2 * h, 1)?;
        Ok(Discriminator {
            store,
            vel,
            quant,
            convs,
            fc1,
            fc2,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Map summary `(B, h)` by global average pooling; reusable across calls.
    pub fn map_summary(&self, maps: &Tensor) -> Result<Tensor> {
        let mut x = maps.clone();
        for c in &self.convs {
            x = nn::leaky_relu(&c.forward(&x)?, 0.2)?;
        }
        Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    /// Probability `(B,)` that `v` is a real trajectory.
    pub fn forward(
        &self,
        v: &Tensor,
        lower: &Tensor,
        upper: &Tensor,
        map_summary: &Tensor,
    ) -> Result<Tensor> {
        let hv = self.vel.last(v)?;
        let hq = self.quant.last(&Tensor::cat(&[lower, upper], 2)?)?;
        let x = Tensor::cat(&[&hv, &hq, map_summary], 1)?;
        let x = nn::leaky_relu(&self.fc1.forward(&x)?, 0.2)?;
        Ok(nn::sigmoid(&self.fc2.forward(&x)?)?.squeeze(1)?)
    }

    pub fn discriminate(
        &self,
        v: &Tensor,
        lower: &Tensor,
        upper: &Tensor,
        maps: &Tensor,
    ) -> Result<Tensor> {
        self.forward(v, lower, upper, &self.map_summary(maps)?)
    }
}

/// Differentiable bilinear sampling of per-element distance fields at
/// positions `(B, T, 2)`. The interpolation footprint is chosen from the
/// current values; positions outside a grid sample 0 with no gradient.
pub fn sample_maps(positions: &Tensor, maps: &[&DistanceMap]) -> Result<Tensor> {
    let (b, t, _) = positions.dims3()?;
    check_len("maps vs batch", maps.len(), b)?;
    let dtype = positions.dtype();
    let p = nn::flat(positions)?;
    let n = b * t;
    let mut sx = vec![0.0; n];
    let mut ox = vec![0.0; n];
    let mut sy = vec![0.0; n];
    let mut oy = vec![0.0; n];
    let mut corners = vec![[0.0f64; 4]; n];
    let mut mask = vec![0.0; n];
    for e in 0..n {
        let map = maps[e / t];
        let q = [p[2 * e], p[2 * e + 1]];
        let Some(s) = map.stencil(q) else {
            continue;
        };
        let r = map.resolution();
        let o = map.origin();
        mask[e] = 1.0;
        corners[e] = s.corners;
        // fx = (x - ox) / r - j0 unless clamped (then constant)
        if s.clamped_x {
            ox[e] = s.fx;
        } else {
            sx[e] = 1.0 / r;
            ox[e] = -o[0] / r - s.j0 as f64;
        }
        if s.clamped_y {
            oy[e] = s.fy;
        } else {
            sy[e] = 1.0 / r;
            oy[e] = -o[1] / r - s.i0 as f64;
        }
    }
    let dev = Device::Cpu;
    let mk =
        |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, t), &dev)?.to_dtype(dtype)?) };
    let x = positions.narrow(2, 0, 1)?.squeeze(2)?;
    let y = positions.narrow(2, 1, 1)?.squeeze(2)?;
    let fx = ((x * mk(sx)?)? + mk(ox)?)?;
    let fy = ((y * mk(sy)?)? + mk(oy)?)?;
    let c = |k: usize| mk(corners.iter().map(|c| c[k]).collect());
    let gx = fx.affine(-1.0, 1.0)?;
    let gy = fy.affine(-1.0, 1.0)?;
    let top = ((&gx * c(0)?)? + (&fx * c(1)?)?)?;
    let bottom = ((&gx * c(2)?)? + (&fx * c(3)?)?)?;
    let value = ((gy * top)? + (fy * bottom)?)?;
    Ok((value * mk(mask)?)?)
}

/// Mean squared hinge `max(R_s - M(p), 0)^2` over batch and time.
pub fn feasibility_loss(positions: &Tensor, maps: &[&DistanceMap], r_s: f64) -> Result<Tensor> {
    let m = sample_maps(positions, maps)?;
    Ok(m.affine(-1.0, r_s)?.relu()?.sqr()?.mean_all()?)
}

/// Reference form of [`feasibility_loss`] for one trajectory.
pub fn feasibility_loss_f64(positions: &[[f64; 2]], map: &DistanceMap, r_s: f64) -> f64 {
    if positions.is_empty() {
        return 0.0;
    }
    positions
        .iter()
        .map(|&p| (r_s - map.sample(p)).max(0.0).powi(2))
        .sum::<f64>()
        / positions.len() as f64
}

/// `(1/T) sum_t [gamma |p - p̂|^2 + (1 - gamma) |v - v̂|^2]`, averaged over the batch.
pub fn supervised_loss(
    truth_p: &Tensor,
    truth_v: &Tensor,
    pred_p: &Tensor,
    pred_v: &Tensor,
    gamma: f64,
) -> Result<Tensor> {
    if truth_p.dims() != pred_p.dims()
        || truth_v.dims() != pred_v.dims()
        || truth_p.dims() != truth_v.dims()
    {
        return Err(Error::LengthMismatch {
            what: "supervised loss operands",
            left: truth_p.elem_count(),
            right: pred_p.elem_count(),
        });
    }
    let dp = (truth_p - pred_p)?.sqr()?.sum(D::Minus1)?;
    let dv = (truth_v - pred_v)?.sqr()?.sum(D::Minus1)?;
    Ok(((dp * gamma)? + (dv * (1.0 - gamma))?)?.mean_all()?)
}

pub fn supervised_loss_f64(
    truth_p: &[[f64; 2]],
    truth_v: &[[f64; 2]],
    pred_p: &[[f64; 2]],
    pred_v: &[[f64; 2]],
    gamma: f64,
) -> Result<f64> {
    let t = truth_p.len();
    check_len("truth positions vs velocities", t, truth_v.len())?;
    check_len("truth vs predicted positions", t, pred_p.len())?;
    check_len("truth vs predicted velocities", t, pred_v.len())?;
    if t == 0 {
        return Err(Error::Empty("supervised loss over zero steps".into()));
    }
    let sq = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let total: f64 = (0..t)
        .map(|k| gamma * sq(truth_p[k], pred_p[k]) + (1.0 - gamma) * sq(truth_v[k], pred_v[k]))
        .sum();
    Ok(total / t as f64)
}

/// `(L_D, L_adv)` from discriminator outputs on real and generated batches.
pub fn adversarial_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let lo = PROB_CLAMP;
    let hi = 1.0 - PROB_CLAMP;
    let real = d_real.clamp(lo, hi)?;
    let fake = d_fake.clamp(lo, hi)?;
    let l_d = ((fake.affine(-1.0, 1.0)?.log()?.mean_all()? + real.log()?.mean_all()?)? * -1.0)?;
    let l_adv = (fake.log()?.mean_all()? * -1.0)?;
    Ok((l_d, l_adv))
}

pub fn adversarial_losses_f64(d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    let c = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let mean = |it: &mut dyn Iterator<Item = f64>, n: usize| it.sum::<f64>() / n as f64;
    let l_fake = mean(&mut d_fake.iter().map(|&p| (1.0 - c(p)).ln()), d_fake.len());
    let l_real = mean(&mut d_real.iter().map(|&p| c(p).ln()), d_real.len());
    let l_adv = -mean(&mut d_fake.iter().map(|&p| c(p).ln()), d_fake.len());
    (-l_fake - l_real, l_adv)
}

/// `w_adv L_adv + lambda_feas L_feas + lambda_sup L_sup`.
pub fn generator_loss(
    l_adv: &Tensor,
    l_feas: &Tensor,
    l_sup: &Tensor,
    w_adv: f64,
    lambda_feas: f64,
    lambda_sup: f64,
) -> Result<Tensor> {
    Ok(((l_adv * w_adv)? + (l_feas * lambda_feas)? + (l_sup * lambda_sup)?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CganSidecar {
    pub config: GanConfig,
    pub iterations: u64,
    pub val_loss: f64,
}

impl CganSidecar {
    pub fn from_config(config: &GanConfig, iterations: u64, val_loss: f64) -> Self {
        CganSidecar {
            config: config.clone(),
            iterations,
            val_loss,
        }
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        format!(
            "{CHECKPOINT_MAGIC}\nmodule=cgan\nimu_hidden={}\nd={}\nheads={}\nz_dim={}\ndec_hidden={}\ndisc_hidden={}\ndt={}\niterations={}\nval_loss={}\n",
            c.imu_hidden, c.d, c.heads, c.z_dim, c.dec_hidden, c.disc_hidden, c.dt, self.iterations, self.val_loss
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = textfmt::parse_kv_document(text, Some(CHECKPOINT_MAGIC))?;
        kv.only(&[
            "module",
            "imu_hidden",
            "d",
            "heads",
            "z_dim",
            "dec_hidden",
            "disc_hidden",
            "dt",
            "iterations",
            "val_loss",
        ])?;
        let module: String = kv.require("module")?;
        if module != "cgan" {
            return Err(Error::Config(format!(
                "expected a cgan checkpoint, found module={module}"
            )));
        }
        let config = GanConfig {
            imu_hidden: kv.require("imu_hidden")?,
            d: kv.require("d")?,
            heads: kv.require("heads")?,
            z_dim: kv.require("z_dim")?,
            dec_hidden: kv.require("dec_hidden")?,
            disc_hidden: kv.require("disc_hidden")?,
            dt: kv.require("dt")?,
        };
        config.validate()?;
        if [
            config.imu_hidden,
            config.d,
            config.z_dim,
            config.dec_hidden,
            config.disc_hidden,
        ]
        .iter()
        .any(|&v| v > 4096)
        {
            return Err(Error::Config("implausible network size".into()));
        }
        Ok(CganSidecar {
            config,
            iterations: kv.require("iterations")?,
            val_loss: kv.require("val_loss")?,
        })
    }
}
