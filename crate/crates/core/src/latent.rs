//! Spatial Gaussian latent, recurrent motion rollout and classification decode.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::NUM_CATEGORIES;
use crate::nn::{resize_bilinear, Conv2d};

/// Log-variance is clamped to this symmetric range.
pub const LOG_VAR_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentConfig {
    /// Latent channels d_z.
    pub channels: usize,
    /// Spatial downsampling of the latent (power of two).
    pub downsample: usize,
    /// Width of the dynamic and static split heads.
    pub split_channels: usize,
    /// Hidden width of the motion decoder head.
    pub decoder_hidden: usize,
    /// Hidden width of the classification/state head.
    pub head_hidden: usize,
    /// Initial bias of the log-variance projection.
    pub log_var_init: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self { channels: 16, downsample: 4, split_channels: 16, decoder_hidden: 32, head_hidden: 32, log_var_init: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentSource {
    /// Conditioned on backbone features.
    Posterior,
    /// Conditioned on the label-derived prior feature map.
    Prior,
    /// Fixed standard normal.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleMode {
    /// `sample = mean`.
    Deterministic,
    /// `sample = mean + exp(log_var / 2) * eps`.
    Sample,
}

/// Diagonal Gaussian over a `(B, d_z, h, w)` latent map.
#[derive(Debug, Clone)]
pub struct LatentField {
    pub mean: Tensor,
    pub log_var: Tensor,
    pub sample: Tensor,
    /// Noise used for `sample`; `None` in deterministic mode.
    pub eps: Option<Tensor>,
    pub source: LatentSource,
}

impl LatentField {
    pub fn deterministic(mean: Tensor, log_var: Tensor, source: LatentSource) -> Self {
        Self { sample: mean.clone(), mean, log_var, eps: None, source }
    }

    /// Reparameterized sample with explicit noise.
    pub fn with_noise(mean: Tensor, log_var: Tensor, eps: Tensor, source: LatentSource) -> Result<Self> {
        if eps.shape() != mean.shape() {
            return Err(Error::shape("noise shape differs from the latent"));
        }
        let sample = (&mean + (log_var.affine(0.5, 0.0)?.exp()? * &eps)?)?;
        Ok(Self { mean, log_var, sample, eps: Some(eps), source })
    }

    pub fn standard(like: &Tensor) -> Result<Self> {
        let zeros = like.zeros_like()?;
        Ok(Self::deterministic(zeros.clone(), zeros, LatentSource::Standard))
    }

    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.mean.dims4()?)
    }
}

/// Standard normal noise from a seeded stream.
pub fn standard_normal(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng, dtype: DType) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Features -> latent Gaussian. Two parallel heads give the dynamic and static
/// parts, which are concatenated, downsampled by strided convs and projected to
/// mean and log-variance.
pub struct LatentEncoder {
    dynamic: Conv2d,
    static_: Conv2d,
    down: Vec<Conv2d>,
    mean: Conv2d,
    log_var: Conv2d,
}

impl LatentEncoder {
    pub fn new(in_channels: usize, cfg: &LatentConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.downsample == 0 || !cfg.downsample.is_power_of_two() {
            return Err(Error::config("latent downsample must be a power of two"));
        }
        let s = cfg.split_channels;
        let hidden = 2 * s;
        let levels = cfg.downsample.trailing_zeros() as usize;
        let mut down = Vec::with_capacity(levels);
        for l in 0..levels {
            down.push(Conv2d::new(hidden, hidden, 3, 2, vb.pp(format!("down{l}")))?);
        }
        Ok(Self {
            dynamic: Conv2d::new(in_channels, s, 3, 1, vb.pp("dynamic"))?,
            static_: Conv2d::new(in_channels, s, 3, 1, vb.pp("static"))?,
            down,
            mean: Conv2d::new(hidden, cfg.channels, 1, 1, vb.pp("mean"))?,
            log_var: Conv2d::with_bias_init(hidden, cfg.channels, 1, 1, cfg.log_var_init, vb.pp("log_var"))?,
        })
    }

    /// Returns `(mean, log_var)` with the log-variance clamped.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.dynamic.forward(x)?.relu()?;
        let s = self.static_.forward(x)?.relu()?;
        let mut h = Tensor::cat(&[d, s], 1)?;
        for conv in &self.down {
            h = conv.forward(&h)?.relu()?;
        }
        let log_var = self.log_var.forward(&h)?.clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT)?;
        Ok((self.mean.forward(&h)?, log_var))
    }

    pub fn encode(&self, x: &Tensor, source: LatentSource, mode: SampleMode, rng: &mut ChaCha8Rng) -> Result<LatentField> {
        let (mean, log_var) = self.forward(x)?;
        match mode {
            SampleMode::Deterministic => Ok(LatentField::deterministic(mean, log_var, source)),
            SampleMode::Sample => {
                let eps = standard_normal(mean.dims4()?, rng, mean.dtype())?;
                LatentField::with_noise(mean, log_var, eps, source)
            }
        }
    }
}

/// Convolutional GRU on the latent map; its input is the previous step's
/// motion at latent resolution.
pub struct SpatialGru {
    update: Conv2d,
    reset: Conv2d,
    candidate: Conv2d,
}

/// Channels of the motion fed back into the recurrence.
const FEEDBACK_CHANNELS: usize = 2;

impl SpatialGru {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        let i = channels + FEEDBACK_CHANNELS;
        Ok(Self {
            update: Conv2d::new(i, channels, 3, 1, vb.pp("update"))?,
            reset: Conv2d::new(i, channels, 3, 1, vb.pp("reset"))?,
            candidate: Conv2d::new(i, channels, 3, 1, vb.pp("candidate"))?,
        })
    }

    pub fn from_convs(update: Conv2d, reset: Conv2d, candidate: Conv2d) -> Self {
        Self { update, reset, candidate }
    }

    /// `h' = (1 - z) * h + z * tanh(W [r * h, x])`.
    pub fn step(&self, h: &Tensor, x: &Tensor) -> Result<Tensor> {
        let hx = Tensor::cat(&[h, x], 1)?;
        let z = candle_nn::ops::sigmoid(&self.update.forward(&hx)?)?;
        let r = candle_nn::ops::sigmoid(&self.reset.forward(&hx)?)?;
        let cand = self.candidate.forward(&Tensor::cat(&[&(r * h)?, x], 1)?)?.tanh()?;
        let keep = z.affine(-1.0, 1.0)?;
        Ok(((keep * h)? + (z * cand)?)?)
    }
}

/// Latent state -> cumulative displacement at latent resolution.
#[derive(Clone)]
pub struct FlowDecoder {
    hidden: Conv2d,
    out: Conv2d,
}

impl FlowDecoder {
    pub fn new(channels: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(channels, hidden, 3, 1, vb.pp("hidden"))?,
            out: Conv2d::new(hidden, 2, 1, 1, vb.pp("out"))?,
        })
    }

    pub fn from_convs(hidden: Conv2d, out: Conv2d) -> Self {
        Self { hidden, out }
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.out.forward(&self.hidden.forward(z)?.relu()?)?)
    }
}

/// Per-step outputs of a rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Full-resolution displacement per step, each `(B, 2, H, W)`.
    pub motion: Vec<Tensor>,
    /// Latent state after each step.
    pub states: Vec<Tensor>,
    /// L2 norm of each state, for diagnostics.
    pub norms: Vec<f64>,
}

impl Rollout {
    /// Stacked `(B, T, 2, H, W)`.
    pub fn stacked(&self) -> Result<Tensor> {
        Ok(Tensor::stack(&self.motion, 1)?)
    }
}

/// Recurrent motion generator: `Z_{t+1} = SGRU(Z_t)`, `M_{t+1} = FSD(Z_{t+1})`.
pub struct MotionGenerator {
    pub gru: SpatialGru,
    pub decoder: FlowDecoder,
}

impl MotionGenerator {
    pub fn new(cfg: &LatentConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            gru: SpatialGru::new(cfg.channels, vb.pp("sgru"))?,
            decoder: FlowDecoder::new(cfg.channels, cfg.decoder_hidden, vb.pp("fsd"))?,
        })
    }

    /// One step: returns the next state and its low-resolution motion.
    pub fn step(&self, z: &Tensor, prev_motion: &Tensor, decoder: &FlowDecoder) -> Result<(Tensor, Tensor)> {
        let next = self.gru.step(z, prev_motion)?;
        let m = decoder.forward(&next)?;
        Ok((next, m))
    }

    pub fn rollout(&self, z0: &Tensor, steps: usize, out_h: usize, out_w: usize) -> Result<Rollout> {
        self.rollout_with(z0, steps, out_h, out_w, |_| &self.decoder)
    }

    /// Rollout with a caller-chosen flow decoder per step (1-based).
    pub fn rollout_with<'a>(
        &'a self,
        z0: &Tensor,
        steps: usize,
        out_h: usize,
        out_w: usize,
        decoder_for: impl Fn(usize) -> &'a FlowDecoder,
    ) -> Result<Rollout> {
        let (b, _, h, w) = z0.dims4()?;
        let mut z = z0.clone();
        let mut prev = Tensor::zeros((b, FEEDBACK_CHANNELS, h, w), z0.dtype(), z0.device())?;
        let mut out = Rollout { motion: Vec::with_capacity(steps), states: Vec::with_capacity(steps), norms: Vec::new() };
        for step in 1..=steps {
            let (next, m) = self.step(&z, &prev, decoder_for(step))?;
            let norm = next.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.sqrt();
            let mnorm = m.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            out.norms.push(norm);
            if !norm.is_finite() || !mnorm.is_finite() {
                return Err(Error::Numerical(format!(
                    "rollout produced non-finite values at step {step}; state norms so far {:?}",
                    out.norms
                )));
            }
            out.motion.push(resize_bilinear(&m, out_h, out_w)?);
            out.states.push(next.clone());
            z = next;
            prev = m;
        }
        Ok(out)
    }
}

/// Category logits and state logits from features, optionally fused with
/// the upsampled latent.
pub struct ClassStateHead {
    hidden: Conv2d,
    category: Conv2d,
    state: Conv2d,
}

impl ClassStateHead {
    pub fn new(in_channels: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(in_channels, hidden, 3, 1, vb.pp("hidden"))?,
            category: Conv2d::new(hidden, NUM_CATEGORIES, 1, 1, vb.pp("category"))?,
            state: Conv2d::new(hidden, 1, 1, 1, vb.pp("state"))?,
        })
    }

    /// `(B, N_C, H, W)` category logits and `(B, 1, H, W)` state logits.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.hidden.forward(x)?.relu()?;
        Ok((self.category.forward(&h)?, self.state.forward(&h)?))
    }
}

/// `[features, upsample(z0)]` along channels.
pub fn fuse_latent(features: &Tensor, z0: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = features.dims4()?;
    Ok(Tensor::cat(&[features, &resize_bilinear(z0, h, w)?], 1)?)
}

/// Category and state logits from the latent fused with skip features.
pub fn decode_cls_state(head: &ClassStateHead, z0: &LatentField, skip: &Tensor) -> Result<(Tensor, Tensor)> {
    head.forward(&fuse_latent(skip, &z0.sample)?)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn values(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    fn zero_conv(i: usize, o: usize) -> Conv2d {
        let dev = Device::Cpu;
        Conv2d::from_tensors(
            Tensor::zeros((o, i, 3, 3), DType::F64, &dev).unwrap(),
            Tensor::zeros(o, DType::F64, &dev).unwrap(),
            1,
            1,
        )
    }

    fn features(b: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data: Vec<f64> = (0..b * c * h * w).map(|i| ((i * 7919) % 97) as f64 / 48.0 - 1.0).collect();
        Tensor::from_vec(data, (b, c, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn deterministic_sample_is_mean() {
        let ps = ParamStore::new(0, DType::F64);
        let enc = LatentEncoder::new(8, &LatentConfig::default(), ps.builder()).unwrap();
        let z = enc
            .encode(&features(1, 8, 16, 16), LatentSource::Posterior, SampleMode::Deterministic, &mut seeded_rng(1))
            .unwrap();
        assert_eq!(z.dims().unwrap(), (1, 16, 4, 4));
        assert_eq!(values(&z.sample), values(&z.mean));
        assert!(z.eps.is_none());
        let lv = values(&z.log_var);
        assert!(lv.iter().all(|v| v.abs() <= LOG_VAR_LIMIT));
    }

    #[test]
    fn fixed_noise_seed_is_reproducible() {
        let ps = ParamStore::new(0, DType::F64);
        let enc = LatentEncoder::new(8, &LatentConfig::default(), ps.builder()).unwrap();
        let x = features(2, 8, 16, 16);
        let a = enc.encode(&x, LatentSource::Posterior, SampleMode::Sample, &mut seeded_rng(9)).unwrap();
        let b = enc.encode(&x, LatentSource::Posterior, SampleMode::Sample, &mut seeded_rng(9)).unwrap();
        assert_eq!(values(&a.sample), values(&b.sample));
        assert_ne!(values(&a.sample), values(&a.mean));
    }

    #[test]
    fn zero_noise_equals_deterministic() {
        let m = features(1, 2, 2, 2);
        let lv = (features(1, 2, 2, 2) * 3.0).unwrap();
        let z = LatentField::with_noise(m.clone(), lv.clone(), m.zeros_like().unwrap(), LatentSource::Prior).unwrap();
        assert_eq!(values(&z.sample), values(&m));
    }

    #[test]
    fn monte_carlo_mean_matches() {
        let dev = Device::Cpu;
        let mean = Tensor::new(&[[[[0.7f64]]]], &dev).unwrap();
        let log_var = Tensor::new(&[[[[0.4f64]]]], &dev).unwrap();
        let mut rng = seeded_rng(3);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let eps = standard_normal((1, 1, 1, 1), &mut rng, DType::F64).unwrap();
            let z = LatentField::with_noise(mean.clone(), log_var.clone(), eps, LatentSource::Posterior).unwrap();
            sum += values(&z.sample)[0];
        }
        let sigma = (0.4f64 / 2.0).exp();
        assert!((sum / n as f64 - 0.7).abs() < 3.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn zero_weight_gru_halves_state() {
        let gru = SpatialGru::from_convs(zero_conv(6, 4), zero_conv(6, 4), zero_conv(6, 4));
        let h = features(1, 4, 3, 3);
        let x = features(1, 2, 3, 3);
        let next = gru.step(&h, &x).unwrap();
        for (a, b) in values(&next).iter().zip(values(&h).iter()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn rollout_shapes() {
        let ps = ParamStore::new(2, DType::F64);
        let cfg = LatentConfig::default();
        let gen = MotionGenerator::new(&cfg, ps.builder()).unwrap();
        let r = gen.rollout(&features(2, 16, 4, 4), 5, 16, 16).unwrap();
        assert_eq!(r.motion.len(), 5);
        assert_eq!(r.stacked().unwrap().dims5().unwrap(), (2, 5, 2, 16, 16));
    }

    #[test]
    fn rollout_aborts_on_nan() {
        let ps = ParamStore::new(2, DType::F64);
        let gen = MotionGenerator::new(&LatentConfig::default(), ps.builder()).unwrap();
        let z = (features(1, 16, 4, 4) * f64::NAN).unwrap();
        match gen.rollout(&z, 5, 16, 16) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("step 1")),
            other => panic!("expected a numerical error, got {other:?}"),
        }
    }

    #[test]
    fn class_head_outputs_and_softmax() {
        let ps = ParamStore::new(4, DType::F64);
        let head = ClassStateHead::new(8 + 16, 32, ps.builder()).unwrap();
        let z = LatentField::standard(&Tensor::zeros((1, 16, 4, 4), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let (c, s) = decode_cls_state(&head, &z, &Tensor::zeros((1, 8, 16, 16), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(c.dims4().unwrap(), (1, 5, 16, 16));
        assert_eq!(s.dims4().unwrap(), (1, 1, 16, 16));
        assert!(values(&c).iter().all(|v| v.is_finite()));
        let p = candle_nn::ops::softmax(&(c + features(1, 5, 16, 16)).unwrap(), 1).unwrap();
        for v in values(&p.sum(1).unwrap()) {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }
}
