//! Experiment configuration loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Category, GridSpec};
use crate::model::ModelConfig;
use crate::nn::fnv1a;
use crate::objective::LossWeights;
use crate::sim::SceneConfig;

/// Step learning-rate schedule: `lr * gamma^(number of milestones <= epoch)`
/// with 0-based epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub learning_rate: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::toy()
    }
}

impl Schedule {
    pub fn full_scale() -> Self {
        Self { learning_rate: 0.0016, milestones: vec![10, 20, 30, 40], gamma: 0.5, epochs: 45, batch_size: 4 }
    }

    pub fn toy() -> Self {
        Self { learning_rate: 0.0016, milestones: vec![3, 5], gamma: 0.5, epochs: 8, batch_size: 4 }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.gamma.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.schedule.batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.gamma > 0.0) {
            return Err(Error::config("learning rate and gamma must be positive"));
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) {
            return Err(Error::config("every decay milestone must come before the last epoch"));
        }
        Ok(())
    }
}

/// Probability of decoding from the prior-conditioned latent. Constant at
/// `start` and annealed linearly to zero over the final `anneal_fraction` of
/// steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSchedule {
    pub start: f64,
    pub anneal_fraction: f64,
}

impl Default for TeacherSchedule {
    fn default() -> Self {
        Self { start: 0.5, anneal_fraction: 1.0 / 3.0 }
    }
}

impl TeacherSchedule {
    pub fn probability(&self, step: usize, total_steps: usize) -> f64 {
        let total = total_steps.max(1) as f64;
        let begin = total * (1.0 - self.anneal_fraction);
        let s = step as f64;
        if s < begin {
            self.start
        } else {
            (self.start * (total - s) / (total - begin).max(1.0)).max(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub schedule: Schedule,
    pub loss: LossWeights,
    pub teacher: TeacherSchedule,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// `"f32"` or `"f64"`.
    pub dtype: String,
    /// Evaluate the validation split after each epoch.
    pub validate_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: Schedule::toy(),
            loss: LossWeights::default(),
            teacher: TeacherSchedule::default(),
            max_steps: None,
            dtype: "f32".into(),
            validate_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn dtype(&self) -> Result<candle_core::DType> {
        match self.dtype.as_str() {
            "f32" => Ok(candle_core::DType::F32),
            "f64" => Ok(candle_core::DType::F64),
            other => Err(Error::config(format!("unsupported dtype {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        self.dtype()?;
        if !(0.0..=1.0).contains(&self.teacher.start) || !(0.0..=1.0).contains(&self.teacher.anneal_fraction) {
            return Err(Error::config("teacher probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Category withheld from the training split.
    pub mask_category: Option<Category>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 150, n_val: 10, n_test: 40, mask_category: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotConfig {
    /// Pixels per grid cell in quiver renderings.
    pub pixels_per_cell: u32,
    /// Draw every n-th cell's arrow.
    pub arrow_stride: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self { pixels_per_cell: 8, arrow_stride: 1 }
    }
}

/// Everything one experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub grid: GridSpec,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub plot: PlotConfig,
    /// Category reported separately by `evaluate`.
    pub focus_category: Option<Category>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            grid: GridSpec::desk(),
            scene: SceneConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            plot: PlotConfig::default(),
            focus_category: None,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        if self.data.mask_category == Some(Category::Background) {
            return Err(Error::config("the background category cannot be masked"));
        }
        Ok(())
    }

    /// Applies a command-line seed to training and scene generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.scene.rng_seed = seed;
        self
    }
}

/// Stable hash of the parts of a config that determine a training run.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig, grid: &GridSpec) -> Result<u64> {
    let text = serde_json::to_string(&(model, train, grid)).map_err(|e| Error::config(e.to_string()))?;
    Ok(fnv1a(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_schedule_steps() {
        let s = Schedule::full_scale();
        assert_eq!(s.lr_at(0), 0.0016);
        assert_eq!(s.lr_at(9), 0.0016);
        assert_eq!(s.lr_at(10), 0.0008);
        assert_eq!(s.lr_at(12), 0.0008);
        assert!((s.lr_at(41) - 0.0001).abs() < 1e-15);
        assert!(s.validate().is_ok());
        let bad = Schedule { milestones: vec![50], ..Schedule::full_scale() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn teacher_anneals_to_zero() {
        let t = TeacherSchedule::default();
        assert_eq!(t.probability(0, 300), 0.5);
        assert_eq!(t.probability(199, 300), 0.5);
        assert!((t.probability(250, 300) - 0.25).abs() < 1e-12);
        assert!(t.probability(299, 300) < 0.01);
    }

    #[test]
    fn toml_round_trip_and_errors() {
        let cfg = Config::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), cfg);
        assert!(matches!(Config::from_toml("[train]\nschedule = { batch_size = 0 }"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[data]\nmask_category = \"background\""), Err(Error::Config(_))));
        let part = Config::from_toml("[train]\nseed = 7\n[data]\nn_train = 8").unwrap();
        assert_eq!((part.train.seed, part.data.n_train), (7, 8));
    }
}
