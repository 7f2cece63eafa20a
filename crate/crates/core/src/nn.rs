//! Tensor building blocks shared by the network modules.
//!
//! All tensors are NCHW. Parameters live in a [`ParamStore`] that initializes
//! them from a seeded ChaCha8 stream, so two stores built with the same seed
//! and the same layer construction order hold identical weights.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Shape, Tensor, Var, D};
use candle_nn::init::{FanInOut, NonLinearity, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone)]
struct SeededBackend {
    vars: Arc<Mutex<HashMap<String, Var>>>,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

impl SeededBackend {
    fn init_tensor(&self, shape: &Shape, init: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().unwrap();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Randn { mean, stdev } => {
                (0..n).map(|_| mean + stdev * Distribution::<f64>::sample(&StandardNormal, &mut *rng)).collect()
            }
            Init::Kaiming { dist, fan, non_linearity } => {
                let fan = fan.for_shape(shape);
                let std = non_linearity.gain() / (fan as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    NormalOrUniform::Normal => {
                        (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut *rng)).collect()
                    }
                }
            }
        };
        Tensor::from_vec(values, shape.clone(), dev)?.to_dtype(dtype)
    }
}

impl SimpleBackend for SeededBackend {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        if let Some(v) = self.vars.lock().unwrap().get(name) {
            if v.shape() != &s {
                candle_core::bail!("parameter {name} has shape {:?}, requested {:?}", v.shape(), s);
            }
            return Ok(v.as_tensor().clone());
        }
        let var = Var::from_tensor(&self.init_tensor(&s, h, dtype, dev)?)?;
        let t = var.as_tensor().clone();
        self.vars.lock().unwrap().insert(name.to_string(), var);
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.vars.lock().unwrap().get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.lock().unwrap().contains_key(name)
    }
}

/// Named, trainable parameters with deterministic initialization.
#[derive(Clone)]
pub struct ParamStore {
    backend: SeededBackend,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            backend: SeededBackend {
                vars: Arc::new(Mutex::new(HashMap::new())),
                rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            },
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.backend.clone()), self.dtype, self.device.clone())
    }

    /// Parameters sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let map = self.backend.vars.lock().unwrap();
        let sorted: BTreeMap<_, _> = map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        sorted.into_iter().collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars().iter().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameters by name. Every stored parameter must be present
    /// with a matching shape.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let map = self.backend.vars.lock().unwrap();
        for (name, var) in map.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != var.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !map.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }
}

/// 2D convolution with Kaiming-uniform weights and zero bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        Self::with_bias_init(in_c, out_c, kernel, stride, 0.0, vb)
    }

    /// As [`Conv2d::new`] with every bias entry starting at `bias`.
    pub fn with_bias_init(in_c: usize, out_c: usize, kernel: usize, stride: usize, bias: f64, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints(
            (out_c, in_c, kernel, kernel),
            "weight",
            Init::Kaiming {
                dist: NormalOrUniform::Uniform,
                fan: FanInOut::FanIn,
                non_linearity: NonLinearity::ReLU,
            },
        )?;
        let bias = vb.get_with_hints(out_c, "bias", Init::Const(bias))?;
        Ok(Self { weight, bias, padding: kernel / 2, stride })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, padding: usize, stride: usize) -> Self {
        Self { weight, bias, padding, stride }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.dim(0).unwrap_or(0)
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Dense layer acting on the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(in_d: usize, out_d: usize, vb: VarBuilder) -> Result<Self> {
        let bound = 1.0 / (in_d as f64).sqrt();
        let weight = vb.get_with_hints((out_d, in_d), "weight", Init::Uniform { lo: -bound, up: bound })?;
        let bias = vb.get_with_hints(out_d, "bias", Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// 3D convolution over `(B, C, T, H, W)` with "same" padding, built from one
/// 2D convolution per temporal tap.
#[derive(Debug, Clone)]
pub struct Conv3d {
    weight: Tensor,
    bias: Tensor,
    kernel: (usize, usize),
}

impl Conv3d {
    /// `kernel` is `(temporal, spatial)`; both must be odd.
    pub fn new(in_c: usize, out_c: usize, kernel: (usize, usize), vb: VarBuilder) -> Result<Self> {
        if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
            return Err(Error::config("conv3d kernel sizes must be odd"));
        }
        let weight = vb.get_with_hints(
            (out_c, in_c, kernel.0, kernel.1, kernel.1),
            "weight",
            Init::Kaiming {
                dist: NormalOrUniform::Uniform,
                fan: FanInOut::FanIn,
                non_linearity: NonLinearity::ReLU,
            },
        )?;
        let bias = vb.get_with_hints(out_c, "bias", Init::Const(0.0))?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, _, kt, kh, kw) = weight.dims5()?;
        if kh != kw || kt % 2 == 0 || kh % 2 == 0 {
            return Err(Error::shape("conv3d kernel must be odd and square in space"));
        }
        Ok(Self { weight, bias, kernel: (kt, kh) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _c, t, h, w) = x.dims5()?;
        let (kt, ks) = self.kernel;
        let half = kt / 2;
        let out_c = self.bias.dim(0)?;
        let taps: Vec<Tensor> = (0..kt)
            .map(|k| self.weight.narrow(2, k, 1)?.squeeze(2))
            .collect::<candle_core::Result<_>>()?;
        let bias = self.bias.reshape((1, out_c, 1, 1))?;
        let mut frames = Vec::with_capacity(t);
        for ti in 0..t {
            let mut acc: Option<Tensor> = None;
            for (k, tap) in taps.iter().enumerate() {
                let src = ti as isize + k as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let frame = x.narrow(2, src as usize, 1)?.squeeze(2)?;
                let y = frame.conv2d(tap, ks / 2, 1, 1, 1)?;
                acc = Some(match acc {
                    Some(a) => (a + y)?,
                    None => y,
                });
            }
            let y = match acc {
                Some(a) => a,
                None => Tensor::zeros((b, out_c, h, w), x.dtype(), x.device())?,
            };
            frames.push(y.broadcast_add(&bias)?.unsqueeze(2)?);
        }
        Ok(Tensor::cat(&frames, 2)?)
    }
}

/// Row-stochastic matrix mapping `n_in` samples to `n_out` by linear
/// interpolation with half-pixel centers.
pub fn interpolation_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of an NCHW tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rw = Tensor::from_vec(interpolation_matrix(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let rh = Tensor::from_vec(interpolation_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    // (.., h, w) x (w, W) -> (.., h, W); then resize rows.
    let y = x.broadcast_matmul(&rw.t()?)?;
    let y = rh.broadcast_matmul(&y)?;
    Ok(y)
}

/// Average pooling by an integer factor (spatial dims must divide).
pub fn downsample_avg(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!("{h}x{w} is not divisible by {factor}")));
    }
    Ok(x.avg_pool2d(factor)?)
}

/// Scaled dot-product attention. `q: (B, Nq, E)`, `k, v: (B, Nk, E)`. `mask`
/// is `(B, Nk)` with 1 for usable keys. Returns `(output, weights)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let e = q.dim(D::Minus1)? as f64;
    let mut logits = (q.matmul(&k.t()?.contiguous()?)? / e.sqrt())?;
    if let Some(m) = mask {
        // Masked keys get a large negative logit (finite, so all-masked rows stay NaN-free).
        let penalty = ((m.unsqueeze(1)?.to_dtype(q.dtype())? - 1.0)? * 1e9)?;
        logits = logits.broadcast_add(&penalty)?;
    }
    let weights = candle_nn::ops::softmax_last_dim(&logits)?;
    Ok((weights.matmul(v)?, weights))
}

/// Single-head self/cross attention with learned projections.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl AttentionBlock {
    pub fn new(q_dim: usize, kv_dim: usize, embed: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            q: Linear::new(q_dim, embed, vb.pp("q"))?,
            k: Linear::new(kv_dim, embed, vb.pp("k"))?,
            v: Linear::new(kv_dim, embed, vb.pp("v"))?,
            out: Linear::new(embed, out_dim, vb.pp("out"))?,
        })
    }

    pub fn forward(&self, queries: &Tensor, keys: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let q = self.q.forward(queries)?;
        let k = self.k.forward(keys)?;
        let v = self.v.forward(keys)?;
        let (ctx, w) = attention(&q, &k, &v, mask)?;
        Ok((self.out.forward(&ctx)?, w))
    }
}

/// `(B, C, H, W)` -> `(B, H*W, C)` token layout.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(Error::shape(format!("{n} tokens cannot form a {h}x{w} map")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Adam optimizer whose moment estimates can be exported and restored.
pub struct Adam {
    vars: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, lr: f64) -> Result<Self> {
        let first = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<_>>()?;
        let second = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<_>>()?;
        Ok(Self { vars, first, second, step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let g = &g.detach();
            let m = ((&self.first[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.second[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    /// Moments keyed `m.<param>` / `v.<param>` plus the step count.
    pub fn state(&self) -> Result<(HashMap<String, Tensor>, usize)> {
        let mut out = HashMap::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.insert(format!("m.{name}"), self.first[i].copy()?);
            out.insert(format!("v.{name}"), self.second[i].copy()?);
        }
        Ok((out, self.step))
    }

    pub fn restore(&mut self, state: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let get = |key: String| -> Result<Tensor> {
                let t = state.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimizer slot {key}")))?;
                if t.shape() != var.shape() {
                    return Err(Error::Checkpoint(format!("optimizer slot {key} has the wrong shape")));
                }
                Ok(t.to_dtype(var.dtype())?)
            };
            self.first[i] = get(format!("m.{name}"))?;
            self.second[i] = get(format!("v.{name}"))?;
        }
        self.step = step;
        Ok(())
    }
}

/// FNV-1a over a byte slice; used for provenance tags and config hashes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
