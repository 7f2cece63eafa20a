//! The assembled network and its four ablation switches.
//!
//! | switch              | on                                          | off                                 |
//! |---------------------|---------------------------------------------|-------------------------------------|
//! | `pattern_extractor` | label prior + prior latent, KL to it        | no prior                            |
//! | `pattern_generator` | recurrent rollout from the latent           | direct conv head predicting all steps |
//! | `latent_modeling`   | stochastic latent (sampled, learned variance) | deterministic latent (mean only)  |
//! | `pattern_fusion`    | category/state heads see `[B, up(z)]`       | heads see `B` only                  |
//!
//! A latent exists whenever any switch is on. With every switch off the model
//! is the plain backbone with direct heads and no KL term.

use candle_core::{DType, Module, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_registry, Backbone, BackboneConfig};
use crate::batch::{Batch, LabelBatch};
use crate::dataset::PredictionRecord;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, NUM_CATEGORIES};
use crate::latent::{fuse_latent, ClassStateHead, LatentConfig, LatentEncoder, LatentField, LatentSource, MotionGenerator, SampleMode};
use crate::nn::{Conv2d, ParamStore};
use crate::objective::{category_loss, motion_loss, pattern_loss, state_loss, LossParts};
use crate::prior::{PatternExtractor, PriorConfig, PriorFeature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Switches {
    pub pattern_extractor: bool,
    pub pattern_generator: bool,
    pub latent_modeling: bool,
    pub pattern_fusion: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self::full()
    }
}

impl Switches {
    pub const fn full() -> Self {
        Self { pattern_extractor: true, pattern_generator: true, latent_modeling: true, pattern_fusion: true }
    }

    pub const fn baseline() -> Self {
        Self { pattern_extractor: false, pattern_generator: false, latent_modeling: false, pattern_fusion: false }
    }

    pub const fn new(pe: bool, pg: bool, lm: bool, pf: bool) -> Self {
        Self { pattern_extractor: pe, pattern_generator: pg, latent_modeling: lm, pattern_fusion: pf }
    }

    pub fn has_latent(&self) -> bool {
        self.pattern_extractor || self.pattern_generator || self.latent_modeling || self.pattern_fusion
    }

    /// `P.E. P.G. L.M. P.F.` as check marks.
    pub fn marks(&self) -> [bool; 4] {
        [self.pattern_extractor, self.pattern_generator, self.latent_modeling, self.pattern_fusion]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub prior: PriorConfig,
    pub latent: LatentConfig,
    pub switches: Switches,
}

/// Network outputs in tensor form.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `(B, T, 2, H, W)` cumulative displacement.
    pub motion: Tensor,
    /// `(B, N_C, H, W)`.
    pub category_logits: Tensor,
    /// `(B, 1, H, W)`.
    pub state_logits: Tensor,
}

impl Prediction {
    /// Converts to per-sequence records with `T x H x W x 2` / `H x W x N_C` layout.
    pub fn to_records(&self) -> Result<Vec<PredictionRecord>> {
        let (b, t, _, h, w) = self.motion.dims5()?;
        let motion = self.motion.permute((0, 1, 3, 4, 2))?.contiguous()?.to_dtype(DType::F32)?;
        let motion: Vec<f32> = motion.flatten_all()?.to_vec1()?;
        let cls = self.category_logits.permute((0, 2, 3, 1))?.contiguous()?.to_dtype(DType::F32)?;
        let cls: Vec<f32> = cls.flatten_all()?.to_vec1()?;
        let st: Vec<f32> = self.state_logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let (m, n) = (t * h * w * 2, h * w);
        Ok((0..b)
            .map(|i| PredictionRecord {
                motion: motion[i * m..(i + 1) * m].to_vec(),
                category_logits: cls[i * n * NUM_CATEGORIES..(i + 1) * n * NUM_CATEGORIES].to_vec(),
                state_logits: st[i * n..(i + 1) * n].to_vec(),
            })
            .collect())
    }
}

/// Everything a training step needs.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub prediction: Prediction,
    pub features: Tensor,
    pub posterior: Option<LatentField>,
    pub prior: Option<LatentField>,
    pub prior_feature: Option<PriorFeature>,
    /// KL term, when the model has one.
    pub pattern: Option<Tensor>,
    pub used_teacher: bool,
}

impl TrainOutput {
    pub fn loss_parts(&self, labels: &LabelBatch) -> Result<LossParts> {
        Ok(LossParts {
            motion: motion_loss(&self.prediction.motion, labels)?,
            state: state_loss(&self.prediction.state_logits, labels)?,
            category: category_loss(&self.prediction.category_logits, labels)?,
            pattern: self.pattern.clone(),
        })
    }
}

/// Direct motion head predicting every step at once.
struct DirectHead {
    hidden: Conv2d,
    out: Conv2d,
    steps: usize,
}

impl DirectHead {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let y = self.out.forward(&self.hidden.forward(x)?.relu()?)?;
        Ok(y.reshape((b, self.steps, 2, h, w))?)
    }
}

pub struct PriorMotion {
    config: ModelConfig,
    spec: GridSpec,
    store: ParamStore,
    backbone: Box<dyn Backbone>,
    extractor: Option<PatternExtractor>,
    posterior_encoder: Option<LatentEncoder>,
    prior_encoder: Option<LatentEncoder>,
    generator: Option<MotionGenerator>,
    direct: Option<DirectHead>,
    heads: ClassStateHead,
}

impl PriorMotion {
    pub fn new(config: ModelConfig, spec: GridSpec, seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(seed, dtype);
        let vb = store.builder();
        let sw = config.switches;
        let f = config.latent.downsample;
        if spec.height() % f.max(config.prior.downsample) != 0 || spec.width() % f.max(config.prior.downsample) != 0 {
            return Err(Error::config("grid size must be divisible by the latent and prior downsampling"));
        }
        let backbone = backbone_registry(&config.backbone.name)?(&config.backbone, &spec, vb.pp("backbone"))?;
        let c = backbone.out_channels();
        let dz = config.latent.channels;
        let latent = sw.has_latent();
        let extractor = if sw.pattern_extractor {
            Some(PatternExtractor::new(&config.prior, c, spec.output_steps(), vb.pp("prior"))?)
        } else {
            None
        };
        let posterior_encoder = latent.then(|| LatentEncoder::new(c, &config.latent, vb.pp("posterior"))).transpose()?;
        let prior_encoder = extractor
            .as_ref()
            .map(|e| LatentEncoder::new(e.out_channels(), &config.latent, vb.pp("prior_latent")))
            .transpose()?;
        let (generator, direct) = if sw.pattern_generator {
            (Some(MotionGenerator::new(&config.latent, vb.pp("generator"))?), None)
        } else {
            let in_c = c + if latent { dz } else { 0 };
            let t = spec.output_steps();
            let hidden = config.latent.decoder_hidden;
            let head = DirectHead {
                hidden: Conv2d::new(in_c, hidden, 3, 1, vb.pp("direct.hidden"))?,
                out: Conv2d::new(hidden, 2 * t, 1, 1, vb.pp("direct.out"))?,
                steps: t,
            };
            (None, Some(head))
        };
        let head_in = c + if sw.pattern_fusion { dz } else { 0 };
        let heads = ClassStateHead::new(head_in, config.latent.head_hidden, vb.pp("heads"))?;
        Ok(Self { config, spec, store, backbone, extractor, posterior_encoder, prior_encoder, generator, direct, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn switches(&self) -> Switches {
        self.config.switches
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn extractor(&self) -> Option<&PatternExtractor> {
        self.extractor.as_ref()
    }

    pub fn generator(&self) -> Option<&MotionGenerator> {
        self.generator.as_ref()
    }

    pub fn features(&self, grids: &Tensor) -> Result<Tensor> {
        self.backbone.forward(grids)
    }

    /// Latent from an encoder; deterministic unless latent modeling is on.
    fn latent(&self, enc: &LatentEncoder, x: &Tensor, source: LatentSource, mode: SampleMode, rng: &mut ChaCha8Rng) -> Result<LatentField> {
        if self.config.switches.latent_modeling {
            enc.encode(x, source, mode, rng)
        } else {
            let (mean, _) = enc.forward(x)?;
            let zeros = mean.zeros_like()?;
            Ok(LatentField::deterministic(mean, zeros, source))
        }
    }

    /// Decodes motion, category and state from features and a latent sample.
    pub fn decode(&self, features: &Tensor, z: Option<&Tensor>) -> Result<Prediction> {
        let (_, _, h, w) = features.dims4()?;
        let t = self.spec.output_steps();
        let motion = match (&self.generator, &self.direct, z) {
            (Some(g), _, Some(z)) => g.rollout(z, t, h, w)?.stacked()?,
            (None, Some(d), Some(z)) => d.forward(&fuse_latent(features, z)?)?,
            (None, Some(d), None) => d.forward(features)?,
            _ => return Err(Error::shape("motion decoder needs a latent")),
        };
        let head_in = match z {
            Some(z) if self.config.switches.pattern_fusion => fuse_latent(features, z)?,
            _ => features.clone(),
        };
        let (category_logits, state_logits) = self.heads.forward(&head_in)?;
        Ok(Prediction { motion, category_logits, state_logits })
    }

    /// Training forward pass. `teacher` routes the prior-conditioned sample
    /// into the decoders when a prior exists.
    pub fn forward_train(&self, batch: &Batch, teacher: bool, rng: &mut ChaCha8Rng) -> Result<TrainOutput> {
        let features = self.features(&batch.grids)?;
        let posterior = match &self.posterior_encoder {
            Some(enc) => Some(self.latent(enc, &features, LatentSource::Posterior, SampleMode::Sample, rng)?),
            None => None,
        };
        let (prior_feature, prior) = match (&self.extractor, &self.prior_encoder) {
            (Some(ex), Some(enc)) => {
                let pf = ex.forward(&features, &batch.labels)?;
                let z = self.latent(enc, &pf.values, LatentSource::Prior, SampleMode::Sample, rng)?;
                (Some(pf), Some(z))
            }
            _ => (None, None),
        };
        let pattern = match (&posterior, &prior) {
            (Some(q), Some(p)) => Some(pattern_loss(q, p)?),
            (Some(q), None) if self.config.switches.latent_modeling => Some(pattern_loss(q, &LatentField::standard(&q.mean)?)?),
            _ => None,
        };
        let used_teacher = teacher && prior.is_some();
        let z = if used_teacher { prior.as_ref() } else { posterior.as_ref() };
        let prediction = self.decode(&features, z.map(|l| &l.sample))?;
        Ok(TrainOutput { prediction, features, posterior, prior, prior_feature, pattern, used_teacher })
    }

    /// Inference from occupancy alone.
    pub fn predict(&self, grids: &Tensor, mode: SampleMode, rng: &mut ChaCha8Rng) -> Result<Prediction> {
        let features = self.features(grids)?;
        let z = match &self.posterior_encoder {
            Some(enc) => Some(self.latent(enc, &features, LatentSource::Posterior, mode, rng)?),
            None => None,
        };
        self.decode(&features, z.as_ref().map(|l| &l.sample))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::grids_to_tensor;
    use crate::dataset::Sample;
    use crate::grid::{voxelize, OccupancyGrid, PointSequence, SceneLabels};
    use crate::latent::seeded_rng;

    fn tiny_spec() -> GridSpec {
        GridSpec::new([-4.0, 4.0], [-4.0, 4.0], [-3.0, 2.0], 0.5, 0.4, 0.2, 5, 5).unwrap()
    }

    fn tiny_config(sw: Switches) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.backbone.stem_channels = 4;
        cfg.backbone.pyramid_channels = [8, 8, 8];
        cfg.backbone.out_channels = 8;
        cfg.switches = sw;
        cfg
    }

    fn sample(spec: &GridSpec, shift: f32) -> Sample {
        let frames = (0..5).map(|k| vec![[k as f32 * 0.3 + shift, 0.5, -1.0], [-2.0, -2.0, 0.0]]).collect();
        let mut labels = SceneLabels::empty(5, spec.height(), spec.width());
        let cur = spec.voxel_of([1.2 + shift, 0.5, -1.0]).unwrap();
        let cell = cur.0 * spec.width() + cur.1;
        labels.valid[cell] = 1;
        labels.category[cell] = 1;
        labels.state[cell] = 1;
        labels.instance_id[cell] = 1;
        for t in 0..5 {
            labels.motion[(t * spec.cells() + cell) * 2] = 0.3 * (t + 1) as f32;
        }
        Sample { points: PointSequence::new(frames), labels }
    }

    #[test]
    fn every_switch_combination_runs() {
        let spec = tiny_spec();
        let s = sample(&spec, 0.0);
        let batch = Batch::from_samples(&[&s, &s], &spec, DType::F32).unwrap();
        for bits in 0..16u8 {
            let sw = Switches::new(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0, bits & 8 != 0);
            let model = PriorMotion::new(tiny_config(sw), spec.clone(), 1, DType::F32).unwrap();
            let out = model.forward_train(&batch, true, &mut seeded_rng(0)).unwrap();
            assert_eq!(out.prediction.motion.dims5().unwrap(), (2, 5, 2, 16, 16));
            assert_eq!(out.prediction.category_logits.dims4().unwrap(), (2, 5, 16, 16));
            assert_eq!(out.posterior.is_some(), sw.has_latent());
            assert_eq!(out.pattern.is_some(), sw.pattern_extractor || sw.latent_modeling);
            let parts = out.loss_parts(&batch.labels).unwrap();
            assert!(!parts.motion.term.no_supervision);
        }
    }

    #[test]
    fn prediction_ignores_labels_and_is_repeatable() {
        let spec = tiny_spec();
        let model = PriorMotion::new(tiny_config(Switches::full()), spec.clone(), 3, DType::F32).unwrap();
        let s = sample(&spec, 0.0);
        let grids: Vec<OccupancyGrid> = s.points.frames.iter().map(|f| voxelize(f, &spec)).collect();
        let x = grids_to_tensor(&[&grids], &spec, DType::F32).unwrap();
        let a = model.predict(&x, SampleMode::Deterministic, &mut seeded_rng(1)).unwrap().to_records().unwrap();
        let b = model.predict(&x, SampleMode::Deterministic, &mut seeded_rng(2)).unwrap().to_records().unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].motion.len(), 5 * 16 * 16 * 2);
    }

    #[test]
    fn grid_prior_depends_on_labels_only() {
        let spec = tiny_spec();
        let model = PriorMotion::new(tiny_config(Switches::full()), spec.clone(), 3, DType::F64).unwrap();
        let s1 = sample(&spec, 0.0);
        let mut s2 = s1.clone();
        s2.points = sample(&spec, 1.5).points;
        let b1 = Batch::from_samples(&[&s1], &spec, DType::F64).unwrap();
        let b2 = Batch::from_samples(&[&s2], &spec, DType::F64).unwrap();
        let ex = model.extractor().unwrap();
        let g1 = ex.grid_prior(&b1.labels).unwrap();
        let g2 = ex.grid_prior(&b2.labels).unwrap();
        let v = |t: &Tensor| -> Vec<f64> { t.flatten_all().unwrap().to_vec1().unwrap() };
        assert_eq!(v(&g1.fused), v(&g2.fused));
        let i1 = ex.instance_encoder().forward(&b1.labels.labels, DType::F64).unwrap();
        let i2 = ex.instance_encoder().forward(&b2.labels.labels, DType::F64).unwrap();
        assert_eq!(v(&i1.tokens.flatten_all().unwrap()), v(&i2.tokens.flatten_all().unwrap()));
    }

    #[test]
    fn baseline_has_no_latent_parameters() {
        let spec = tiny_spec();
        let base = PriorMotion::new(tiny_config(Switches::baseline()), spec.clone(), 0, DType::F32).unwrap();
        let full = PriorMotion::new(tiny_config(Switches::full()), spec, 0, DType::F32).unwrap();
        assert!(base.store().named_vars().iter().all(|(n, _)| !n.starts_with("posterior") && !n.starts_with("prior")));
        assert!(full.store().parameter_count() > base.store().parameter_count());
    }
}
