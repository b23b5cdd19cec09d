//! Small neural-network toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names and are
//! initialized from a seeded ChaCha stream, so every model is reproducible
//! bit for bit. Layers keep clones of their variables (candle variables are
//! shared handles), so an optimizer built from the store updates them in
//! place.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            buffers: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }
    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(
        &mut self,
        name: String,
        values: Vec<f64>,
        shape: &[usize],
        buffer: bool,
    ) -> Result<Var> {
        let map = if buffer {
            &mut self.buffers
        } else {
            &mut self.vars
        };
        if map.contains_key(&name) {
            return Err(Error::InvalidState(format!(
                "parameter '{name}' defined twice"
            )));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        map.insert(name, var.clone());
        Ok(var)
    }

    /// Trainable tensor drawn uniformly from `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.insert(name.to_string(), values, shape, false)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name.to_string(), vec![value; n], shape, false)
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name.to_string(), vec![value; n], shape, true)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies of all values as f64, keyed by name; buffers are prefixed with `@`.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), flat(v.as_tensor())?);
        }
        for (k, v) in &self.buffers {
            out.insert(format!("@{k}"), flat(v.as_tensor())?);
        }
        Ok(out)
    }

    /// Writes back values taken by [`ParamStore::snapshot`].
    pub fn restore(&self, snap: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        let all = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(self.buffers.iter().map(|(k, v)| (format!("@{k}"), v)));
        for (key, var) in all {
            let values = snap
                .get(&key)
                .ok_or_else(|| Error::InvalidState(format!("snapshot lacks '{key}'")))?;
            let t =
                Tensor::from_vec(values.clone(), var.dims(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for (k, v) in &self.vars {
            map.insert(format!("p.{k}"), v.as_tensor().clone());
        }
        for (k, v) in &self.buffers {
            map.insert(format!("b.{k}"), v.as_tensor().clone());
        }
        candle_core::safetensors::save(&map, path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads values saved by [`ParamStore::save`] into an identically shaped
    /// store. Missing, extra or misshapen entries are errors.
    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let map = candle_core::safetensors::load(path, &self.device)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let expected = self.vars.len() + self.buffers.len();
        if map.len() != expected {
            return Err(Error::Config(format!(
                "{}: {} tensors, expected {expected}",
                path.display(),
                map.len()
            )));
        }
        let all = self
            .vars
            .iter()
            .map(|(k, v)| (format!("p.{k}"), v))
            .chain(self.buffers.iter().map(|(k, v)| (format!("b.{k}"), v)));
        for (key, var) in all {
            let t = map.get(&key).ok_or_else(|| {
                Error::Config(format!("{}: missing tensor {key}", path.display()))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::Config(format!(
                    "{}: tensor {key} has shape {:?}, expected {:?}",
                    path.display(),
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (mine, theirs) in [(&self.vars, &other.vars), (&self.buffers, &other.buffers)] {
            if mine.len() != theirs.len() {
                return Err(Error::InvalidState(
                    "parameter stores differ in layout".into(),
                ));
            }
            for (k, v) in mine {
                let src = theirs
                    .get(k)
                    .ok_or_else(|| Error::InvalidState(format!("parameter '{k}' missing")))?;
                v.set(&src.as_tensor().to_dtype(self.dtype)?)?;
            }
        }
        Ok(())
    }
}

pub fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Clone)]
pub struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        Ok(Linear {
            w: store.uniform(&format!("{name}.w"), &[inputs, outputs], bound)?,
            b: store.uniform(&format!("{name}.b"), &[outputs], bound)?,
        })
    }

    /// Applies to the last dimension of `x`, any leading shape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().unwrap();
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(self.w.as_tensor())?;
        let y = y.broadcast_add(self.b.as_tensor())?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.w.dims()[1];
        Ok(y.reshape(out_dims)?)
    }

    pub fn weight(&self) -> &Tensor {
        self.w.as_tensor()
    }
    pub fn bias(&self) -> &Tensor {
        self.b.as_tensor()
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Smooth non-negative link, computed stably as `relu(x) + ln(1 + e^{-|x|})`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let relu = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((relu + tail)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}

/// One LSTM layer with gate order `i, f, g, o`.
#[derive(Clone)]
pub struct Lstm {
    w_ih: Var,
    w_hh: Var,
    b: Var,
    hidden: usize,
}

pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.uniform(&format!("{name}.w_ih"), &[inputs, 4 * hidden], bound)?;
        let w_hh = store.uniform(&format!("{name}.w_hh"), &[hidden, 4 * hidden], bound)?;
        // forget gate bias starts at one
        let mut bias: Vec<f64> = (0..4 * hidden)
            .map(|_| store.rng.random_range(-bound..=bound))
            .collect();
        for v in &mut bias[hidden..2 * hidden] {
            *v += 1.0;
        }
        let b = store.insert(format!("{name}.b"), bias, &[4 * hidden], false)?;
        Ok(Lstm {
            w_ih,
            w_hh,
            b,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, batch: usize, dtype: DType, device: &Device) -> Result<LstmState> {
        let z = Tensor::zeros((batch, self.hidden), dtype, device)?;
        Ok(LstmState { h: z.clone(), c: z })
    }

    /// Input projection for a whole sequence `(B, T, In)`, hoisted out of the
    /// recurrence.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, i) = x.dims3()?;
        let y = x.reshape((b * t, i))?.matmul(self.w_ih.as_tensor())?;
        Ok(y.broadcast_add(self.b.as_tensor())?
            .reshape((b, t, 4 * self.hidden))?)
    }

    /// Advances one step from pre-projected gate inputs `(B, 4H)`.
    pub fn step_projected(&self, gates_x: &Tensor, state: &LstmState) -> Result<LstmState> {
        let h = self.hidden;
        let gates = (gates_x + state.h.matmul(self.w_hh.as_tensor())?)?;
        let i = sigmoid(&gates.narrow(1, 0, h)?)?;
        let f = sigmoid(&gates.narrow(1, h, h)?)?;
        let g = gates.narrow(1, 2 * h, h)?.tanh()?;
        let o = sigmoid(&gates.narrow(1, 3 * h, h)?)?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LstmState { h, c })
    }

    /// One step from a raw input `(B, In)`.
    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        let gx = x
            .matmul(self.w_ih.as_tensor())?
            .broadcast_add(self.b.as_tensor())?;
        self.step_projected(&gx, state)
    }

    /// Runs over `(B, T, In)`, returning all hidden states `(B, T, H)`.
    pub fn seq(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let gx = self.project(x)?;
        let mut state = self.zero_state(b, x.dtype(), x.device())?;
        let mut hs = Vec::with_capacity(t);
        for k in 0..t {
            state = self.step_projected(&gx.narrow(1, k, 1)?.squeeze(1)?, &state)?;
            hs.push(state.h.clone());
        }
        Ok(Tensor::stack(&hs, 1)?)
    }

    /// Final hidden state only.
    pub fn last(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let gx = self.project(x)?;
        let mut state = self.zero_state(b, x.dtype(), x.device())?;
        for k in 0..t {
            state = self.step_projected(&gx.narrow(1, k, 1)?.squeeze(1)?, &state)?;
        }
        Ok(state.h)
    }
}

#[derive(Clone)]
pub struct Conv2d {
    w: Var,
    b: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((inputs * kernel * kernel) as f64).sqrt();
        Ok(Conv2d {
            w: store.uniform(
                &format!("{name}.w"),
                &[outputs, inputs, kernel, kernel],
                bound,
            )?,
            b: store.uniform(&format!("{name}.b"), &[outputs], bound)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.w.as_tensor(), self.padding, self.stride, 1, 1)?;
        let c = self.b.dims()[0];
        Ok(y.broadcast_add(&self.b.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Batch normalization over `(B, C, H, W)` with running statistics.
#[derive(Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    mean: Var,
    var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            mean: store.buffer(&format!("{name}.mean"), &[channels], 0.0)?,
            var: store.buffer(&format!("{name}.var"), &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            let m = self.momentum;
            let n = (x.elem_count() / c) as f64;
            let unbiased = (var.detach().flatten_all()? * (n / (n - 1.0).max(1.0)))?;
            self.mean.set(
                &((self.mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?,
            )?;
            self.var
                .set(&((self.var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            (mean, var)
        } else {
            (
                self.mean.as_tensor().reshape((1, c, 1, 1))?,
                self.var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let xn = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Adam over a fixed set of variables, with optional global-norm clipping.
/// Several optimizers may step from one shared gradient store.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: Option<f64>,
    t: u64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, clip: Option<f64>) -> Result<Self> {
        let zeros = |v: &Var| v.as_tensor().zeros_like();
        let m = vars
            .iter()
            .map(zeros)
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = vars
            .iter()
            .map(zeros)
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Adam {
            vars,
            m,
            v,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Applies one update from `grads`; variables without a gradient are
    /// left alone. Returns the pre-clip gradient norm over this optimizer's
    /// variables.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let norm = grad_norm(grads, &self.vars)?;
        if !norm.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite gradient norm {norm}"
            )));
        }
        let scale = match self.clip {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients keep their autograd history; storing them in the
            // moments would otherwise chain every step's graph together.
            let g = g.detach();
            let g = if scale != 1.0 { (g * scale)? } else { g };
            let m = ((&self.m[k] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[k] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.m[k] = m;
            self.v[k] = v;
        }
        Ok(norm)
    }

    /// Backpropagates `loss` and applies one update.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}

pub fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(total.sqrt())
}

/// Mean over every element.
pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_all()?)
}

/// Sum over the last dimension, keeping it.
pub fn sum_last_keep(x: &Tensor) -> Result<Tensor> {
    Ok(x.sum_keepdim(D::Minus1)?)
}
