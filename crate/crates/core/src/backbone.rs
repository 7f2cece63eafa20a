//! Spatial feature extractors mapping stacked occupancy grids to a BEV feature map.
//!
//! Backbones consume a `(B, T_in, C, H, W)` occupancy tensor and return
//! `(B, C', H, W)`. They are looked up by name through [`backbone_registry`].

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, OccupancyGrid};
use crate::nn::{fnv1a, Conv2d};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub name: String,
    /// Output channels C'.
    pub out_channels: usize,
    /// Channels of the per-frame stem.
    pub stem_channels: usize,
    /// Channels at full, half and quarter resolution.
    pub pyramid_channels: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { name: "stpn_toy".into(), out_channels: 32, stem_channels: 16, pyramid_channels: [32, 64, 64] }
    }
}

/// Contract shared by all backbones.
pub trait Backbone: Send + Sync {
    fn name(&self) -> &str;

    fn out_channels(&self) -> usize;

    /// `(B, T_in, C, H, W)` occupancy -> `(B, C', H, W)` features.
    fn forward(&self, grids: &Tensor) -> Result<Tensor>;
}

/// BEV features with provenance.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// `(B, C', H, W)`.
    pub values: Tensor,
    pub backbone: String,
    /// FNV-1a hash of the occupancy bytes the features were computed from.
    pub input_hash: u64,
}

impl FeatureMap {
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.values.dims4()?)
    }
}

/// Stacks per-frame grids of one or more sequences into `(B, T_in, C, H, W)`.
pub fn grids_to_tensor(batch: &[&[OccupancyGrid]], spec: &GridSpec, dtype: DType) -> Result<Tensor> {
    let (t, h, w, c) = (spec.input_frames(), spec.height(), spec.width(), spec.channels());
    let mut data = Vec::with_capacity(batch.len() * t * c * h * w);
    for grids in batch {
        if grids.len() != t {
            return Err(Error::shape(format!("expected {t} grids, got {}", grids.len())));
        }
        for g in grids.iter() {
            if g.shape() != (h, w, c) {
                return Err(Error::shape(format!("grid shape {:?} vs spec {:?}", g.shape(), (h, w, c))));
            }
            // H x W x C -> C x H x W
            let cells = g.as_slice();
            for k in 0..c {
                for cell in 0..h * w {
                    data.push(cells[cell * c + k] as f32);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (batch.len(), t, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Runs a backbone on one sequence of grids.
pub fn extract_features(backbone: &dyn Backbone, grids: &[OccupancyGrid], spec: &GridSpec, dtype: DType) -> Result<FeatureMap> {
    let input = grids_to_tensor(&[grids], spec, dtype)?;
    let mut bytes = Vec::new();
    for g in grids {
        bytes.extend_from_slice(g.as_slice());
    }
    Ok(FeatureMap {
        values: backbone.forward(&input)?,
        backbone: backbone.name().to_string(),
        input_hash: fnv1a(&bytes),
    })
}

/// Per-frame shared conv stem, temporal fusion by concatenation and a 1x1
/// conv, then a three-level pyramid with stride-2 downsampling and additive
/// skip upsampling.
pub struct StpnToy {
    stem: [Conv2d; 2],
    fuse: Conv2d,
    level0: Conv2d,
    down1: Conv2d,
    level1: Conv2d,
    down2: Conv2d,
    level2: Conv2d,
    lateral2: Conv2d,
    lateral1: Conv2d,
    lateral0: Conv2d,
    merge1: Conv2d,
    head: Conv2d,
    stem_channels: usize,
    out_channels: usize,
}

impl StpnToy {
    pub fn new(cfg: &BackboneConfig, spec: &GridSpec, vb: VarBuilder) -> Result<Self> {
        if spec.height() % 4 != 0 || spec.width() % 4 != 0 {
            return Err(Error::config("stpn_toy needs H and W divisible by 4"));
        }
        let s = cfg.stem_channels;
        let [p0, p1, p2] = cfg.pyramid_channels;
        let c = spec.channels();
        let t = spec.input_frames();
        Ok(Self {
            stem: [Conv2d::new(c, s, 3, 1, vb.pp("stem0"))?, Conv2d::new(s, s, 3, 1, vb.pp("stem1"))?],
            fuse: Conv2d::new(s * t, p0, 1, 1, vb.pp("fuse"))?,
            level0: Conv2d::new(p0, p0, 3, 1, vb.pp("level0"))?,
            down1: Conv2d::new(p0, p1, 3, 2, vb.pp("down1"))?,
            level1: Conv2d::new(p1, p1, 3, 1, vb.pp("level1"))?,
            down2: Conv2d::new(p1, p2, 3, 2, vb.pp("down2"))?,
            level2: Conv2d::new(p2, p2, 3, 1, vb.pp("level2"))?,
            lateral2: Conv2d::new(p2, p1, 1, 1, vb.pp("lateral2"))?,
            lateral1: Conv2d::new(p1, p1, 1, 1, vb.pp("lateral1"))?,
            merge1: Conv2d::new(p1, p0, 3, 1, vb.pp("merge1"))?,
            lateral0: Conv2d::new(p0, p0, 1, 1, vb.pp("lateral0"))?,
            head: Conv2d::new(p0, cfg.out_channels, 3, 1, vb.pp("head"))?,
            stem_channels: s,
            out_channels: cfg.out_channels,
        })
    }
}

impl Backbone for StpnToy {
    fn name(&self) -> &str {
        "stpn_toy"
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn forward(&self, grids: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = grids.dims5()?;
        let x = grids.reshape((b * t, c, h, w))?;
        let x = self.stem[0].forward(&x)?.relu()?;
        let x = self.stem[1].forward(&x)?.relu()?;
        let x = x.reshape((b, t * self.stem_channels, h, w))?;
        let x = self.fuse.forward(&x)?.relu()?;
        let f0 = self.level0.forward(&x)?.relu()?;
        let f1 = self.level1.forward(&self.down1.forward(&f0)?.relu()?)?.relu()?;
        let f2 = self.level2.forward(&self.down2.forward(&f1)?.relu()?)?.relu()?;
        let u1 = (self.lateral2.forward(&f2)?.upsample_nearest2d(h / 2, w / 2)? + self.lateral1.forward(&f1)?)?;
        let u1 = self.merge1.forward(&u1.relu()?)?;
        let u0 = (u1.upsample_nearest2d(h, w)? + self.lateral0.forward(&f0)?)?.relu()?;
        Ok(self.head.forward(&u0)?)
    }
}

/// Debug backbone: raw occupancy of every frame projected to C' channels by a
/// 1x1 convolution.
pub struct IdentityProbe {
    proj: Conv2d,
    out_channels: usize,
}

impl IdentityProbe {
    pub fn new(cfg: &BackboneConfig, spec: &GridSpec, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(spec.input_frames() * spec.channels(), cfg.out_channels, 1, 1, vb.pp("proj"))?,
            out_channels: cfg.out_channels,
        })
    }
}

impl Backbone for IdentityProbe {
    fn name(&self) -> &str {
        "identity_probe"
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn forward(&self, grids: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = grids.dims5()?;
        Ok(self.proj.forward(&grids.reshape((b, t * c, h, w))?)?)
    }
}

pub type BackboneCtor = fn(&BackboneConfig, &GridSpec, VarBuilder) -> Result<Box<dyn Backbone>>;

pub const REGISTERED_BACKBONES: &[&str] = &["stpn_toy", "identity_probe"];

/// Looks up a backbone constructor by name.
pub fn backbone_registry(name: &str) -> Result<BackboneCtor> {
    match name {
        "stpn_toy" => Ok(|cfg, spec, vb| Ok(Box::new(StpnToy::new(cfg, spec, vb)?))),
        "identity_probe" => Ok(|cfg, spec, vb| Ok(Box::new(IdentityProbe::new(cfg, spec, vb)?))),
        other => Err(Error::config(format!(
            "unknown backbone {other:?} (registered: {})",
            REGISTERED_BACKBONES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::voxelize;
    use crate::nn::ParamStore;

    fn build(name: &str, spec: &GridSpec, seed: u64) -> (ParamStore, Box<dyn Backbone>) {
        let ps = ParamStore::new(seed, DType::F32);
        let cfg = BackboneConfig { name: name.into(), ..BackboneConfig::default() };
        let bb = backbone_registry(name).unwrap()(&cfg, spec, ps.builder().pp("backbone")).unwrap();
        (ps, bb)
    }

    #[test]
    fn registry_lookup() {
        assert!(backbone_registry("stpn_toy").is_ok());
        assert!(backbone_registry("identity_probe").is_ok());
        assert!(matches!(backbone_registry("resnet_xl"), Err(Error::Config(_))));
    }

    #[test]
    fn zero_grids_give_finite_features_of_the_right_shape() {
        let spec = GridSpec::desk();
        for name in REGISTERED_BACKBONES {
            let (_, bb) = build(name, &spec, 1);
            let grids = vec![OccupancyGrid::empty(&spec); 5];
            let f = extract_features(bb.as_ref(), &grids, &spec, DType::F32).unwrap();
            assert_eq!(f.dims().unwrap(), (1, 32, 64, 64));
            let v: Vec<f32> = f.values.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
            assert_eq!(f.backbone, *name);
        }
    }

    #[test]
    fn parameter_budget() {
        let (ps, _) = build("stpn_toy", &GridSpec::default(), 0);
        assert!(ps.parameter_count() <= 2_000_000, "{} params", ps.parameter_count());
    }

    #[test]
    fn deterministic_forward() {
        let spec = GridSpec::desk();
        let (_, bb) = build("stpn_toy", &spec, 5);
        let grids: Vec<OccupancyGrid> =
            (0..5).map(|k| voxelize(&[[k as f32, 1.0, 0.0], [-3.0, 2.0, -1.0]], &spec)).collect();
        let a = extract_features(bb.as_ref(), &grids, &spec, DType::F32).unwrap();
        let b = extract_features(bb.as_ref(), &grids, &spec, DType::F32).unwrap();
        let va: Vec<f32> = a.values.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = b.values.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        assert_eq!(a.input_hash, b.input_hash);
    }
}
