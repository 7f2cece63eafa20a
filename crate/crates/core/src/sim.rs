//! Synthetic urban scenes with exact kinematic ground truth.
//!
//! Every random draw goes through `ChaCha8Rng` seeded from the config, so a
//! given seed yields bit-identical sequences on every platform. Objects are
//! rectangles moving under one of three motion models; points are sampled on
//! their perimeters (surface returns) plus static background clutter.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_dataset, Dataset, Sample};
use crate::error::{Error, Result};
use crate::grid::{
    rasterize_labels, Category, GridSpec, GroundTruthObject, GroundTruthScene, PointSequence, Pose,
    SceneLabels,
};

/// Height of the ground plane in the sensor frame (m).
const GROUND_Z: f64 = -1.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeedRanges {
    pub car: [f64; 2],
    pub pedestrian: [f64; 2],
    pub bike: [f64; 2],
    pub others: [f64; 2],
}

impl Default for SpeedRanges {
    fn default() -> Self {
        Self { car: [0.5, 10.0], pedestrian: [0.3, 1.8], bike: [1.0, 7.0], others: [0.1, 1.0] }
    }
}

impl SpeedRanges {
    pub fn for_category(&self, c: Category) -> [f64; 2] {
        match c {
            Category::Car => self.car,
            Category::Pedestrian => self.pedestrian,
            Category::Bike => self.bike,
            Category::Others | Category::Background => self.others,
        }
    }
}

/// Declarative scene generator settings (also the `[sim]` table of a config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_cars: usize,
    pub n_pedestrians: usize,
    pub n_bikes: usize,
    pub n_others: usize,
    pub speed_ranges: SpeedRanges,
    /// Probability that an object is parked / standing still.
    pub stationary_fraction: f64,
    /// Relative frequency of constant-velocity, constant-turn and stop-and-go motion.
    pub motion_model_weights: [f64; 3],
    /// Perimeter returns per square metre of footprint.
    pub point_density: f64,
    /// Static background returns per square metre of grid area.
    pub clutter_density: f64,
    /// Fraction of returns randomly removed from every frame.
    pub sparsity_factor: f64,
    pub noise_sigma: f64,
    pub max_placement_retries: usize,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_cars: 4,
            n_pedestrians: 3,
            n_bikes: 2,
            n_others: 2,
            speed_ranges: SpeedRanges::default(),
            stationary_fraction: 0.25,
            motion_model_weights: [0.6, 0.3, 0.1],
            point_density: 20.0,
            clutter_density: 0.03,
            sparsity_factor: 0.0,
            noise_sigma: 0.02,
            max_placement_retries: 200,
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.point_density) || !finite_nonneg(self.clutter_density) {
            return Err(Error::config("densities must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.sparsity_factor) {
            return Err(Error::config("sparsity_factor must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.stationary_fraction) {
            return Err(Error::config("stationary_fraction must lie in [0, 1]"));
        }
        if !finite_nonneg(self.noise_sigma) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if self.motion_model_weights.iter().any(|&w| !finite_nonneg(w))
            || self.motion_model_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config("motion_model_weights must be >= 0 with a positive sum"));
        }
        for c in &Category::ALL[1..] {
            let [lo, hi] = self.speed_ranges.for_category(*c);
            if !(finite_nonneg(lo) && finite_nonneg(hi) && lo <= hi) {
                return Err(Error::config(format!("bad speed range for {c:?}")));
            }
        }
        Ok(())
    }

    fn count(&self, c: Category) -> usize {
        match c {
            Category::Car => self.n_cars,
            Category::Pedestrian => self.n_pedestrians,
            Category::Bike => self.n_bikes,
            Category::Others => self.n_others,
            Category::Background => 0,
        }
    }

    fn set_count(&mut self, c: Category, n: usize) {
        match c {
            Category::Car => self.n_cars = n,
            Category::Pedestrian => self.n_pedestrians = n,
            Category::Bike => self.n_bikes = n,
            Category::Others => self.n_others = n,
            Category::Background => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MotionModel {
    ConstantVelocity,
    /// Constant speed with a fixed yaw rate (rad/s).
    ConstantTurn { yaw_rate: f64 },
    /// Linear speed ramp between cruising and standing still, starting at
    /// `switch_time` seconds relative to the current frame.
    StopAndGo { switch_time: f64, ramp: f64, starting: bool },
}

/// Closed-form kinematics shared by all motion models.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Kinematics {
    origin: Pose,
    speed: f64,
    model: MotionModel,
}

impl Kinematics {
    /// Arc length travelled from time 0 to `t` (negative for the past).
    fn distance(&self, t: f64) -> f64 {
        let v = self.speed;
        match self.model {
            MotionModel::ConstantVelocity | MotionModel::ConstantTurn { .. } => v * t,
            MotionModel::StopAndGo { switch_time, ramp, starting } => {
                let path = |t: f64| -> f64 {
                    let u = (t - switch_time).clamp(0.0, ramp);
                    let after = (t - switch_time - ramp).max(0.0);
                    if starting {
                        v * u * u / (2.0 * ramp) + v * after
                    } else {
                        v * (t.min(switch_time)) + v * (u - u * u / (2.0 * ramp))
                    }
                };
                path(t) - path(0.0)
            }
        }
    }

    fn pose_at(&self, t: f64) -> Pose {
        let o = self.origin;
        match self.model {
            MotionModel::ConstantTurn { yaw_rate } if yaw_rate.abs() > 1e-9 => {
                let h = o.heading + yaw_rate * t;
                let r = self.speed / yaw_rate;
                Pose::new(
                    o.x + r * (h.sin() - o.heading.sin()),
                    o.y - r * (h.cos() - o.heading.cos()),
                    h,
                )
            }
            _ => {
                let s = self.distance(t);
                Pose::new(o.x + s * o.heading.cos(), o.y + s * o.heading.sin(), o.heading)
            }
        }
    }
}

/// A simulated object with its poses over the input frames and the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub instance_id: i32,
    pub category: Category,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub speed: f64,
    pub motion_model: MotionModel,
    /// One pose per input frame; the last one is the current frame.
    pub history: Vec<Pose>,
    /// One pose per future step.
    pub future: Vec<Pose>,
}

impl ObjectTrack {
    pub fn current(&self) -> Pose {
        *self.history.last().expect("tracks have at least one frame")
    }

    /// Whether a world point lies inside the footprint at input frame `frame`,
    /// allowing `tol` metres of slack.
    pub fn contains(&self, frame: usize, px: f64, py: f64, tol: f64) -> bool {
        let (lx, ly) = self.history[frame].to_local(px, py);
        lx.abs() <= self.length / 2.0 + tol && ly.abs() <= self.width / 2.0 + tol
    }

    fn ground_truth(&self) -> GroundTruthObject {
        GroundTruthObject {
            instance_id: self.instance_id,
            category: self.category,
            length: self.length,
            width: self.width,
            current: self.current(),
            future: self.future.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSequence {
    pub points: PointSequence,
    pub labels: SceneLabels,
    pub tracks: Vec<ObjectTrack>,
}

fn footprint(category: Category, rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    match category {
        Category::Car => (rng.random_range(3.8..4.8), rng.random_range(1.7..2.0), 1.5),
        Category::Pedestrian => (rng.random_range(0.5..0.8), rng.random_range(0.5..0.8), 1.7),
        Category::Bike => (rng.random_range(1.6..1.9), rng.random_range(0.5..0.7), 1.2),
        // Opaque catch-all class: small boxes.
        Category::Others | Category::Background => {
            (rng.random_range(0.8..1.2), rng.random_range(0.8..1.2), 0.8)
        }
    }
}

fn pick_model(cfg: &SceneConfig, speed: f64, rng: &mut ChaCha8Rng) -> MotionModel {
    let w = cfg.motion_model_weights;
    let u = rng.random::<f64>() * w.iter().sum::<f64>();
    if u < w[0] || speed == 0.0 {
        MotionModel::ConstantVelocity
    } else if u < w[0] + w[1] {
        // Lateral acceleration at most 2 m/s^2 and yaw rate at most 0.4 rad/s keeps
        // footprints from skipping cells between frames.
        let max_rate = (2.0 / speed.max(1e-3)).min(0.4);
        MotionModel::ConstantTurn { yaw_rate: rng.random_range(-max_rate..=max_rate) }
    } else {
        MotionModel::StopAndGo {
            switch_time: rng.random_range(-1.0..2.0),
            ramp: rng.random_range(1.5..3.0),
            starting: rng.random_bool(0.5),
        }
    }
}

fn sample_perimeter(
    track: &ObjectTrack,
    pose: Pose,
    n: usize,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<[f32; 3]>,
) {
    let (l, w) = (track.length, track.width);
    let perim = 2.0 * (l + w);
    for _ in 0..n {
        let s = rng.random::<f64>() * perim;
        let (lx, ly) = if s < l {
            (s - l / 2.0, -w / 2.0)
        } else if s < l + w {
            (l / 2.0, s - l - w / 2.0)
        } else if s < 2.0 * l + w {
            (l / 2.0 - (s - l - w), w / 2.0)
        } else {
            (-l / 2.0, w / 2.0 - (s - 2.0 * l - w))
        };
        let (x, y) = pose.to_world(lx, ly);
        let z = GROUND_Z + rng.random::<f64>() * track.height;
        out.push([
            (x + noise.sample(rng)) as f32,
            (y + noise.sample(rng)) as f32,
            (z + noise.sample(rng)) as f32,
        ]);
    }
}

/// Generates one sequence. Deterministic given `config.rng_seed`.
pub fn generate_sequence(config: &SceneConfig, spec: &GridSpec) -> Result<GeneratedSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let dt = spec.frame_interval();
    let n_in = spec.input_frames();
    let [x0, x1] = spec.x_range();
    let [y0, y1] = spec.y_range();
    let edge = 1.0_f64.min((x1 - x0) / 4.0).min((y1 - y0) / 4.0);

    let mut tracks: Vec<ObjectTrack> = Vec::new();
    for category in &Category::ALL[1..] {
        for _ in 0..config.count(*category) {
            let (length, width, height) = footprint(*category, &mut rng);
            let radius = 0.5 * (length * length + width * width).sqrt();
            let mut placed = None;
            for _ in 0..config.max_placement_retries.max(1) {
                let x = rng.random_range(x0 + edge..x1 - edge);
                let y = rng.random_range(y0 + edge..y1 - edge);
                let clear = tracks.iter().all(|t| {
                    let p = t.current();
                    let r = 0.5 * (t.length * t.length + t.width * t.width).sqrt();
                    (p.x - x).hypot(p.y - y) > radius + r + 0.3
                });
                if clear {
                    placed = Some((x, y));
                    break;
                }
            }
            let (x, y) = placed.ok_or_else(|| {
                Error::Data(format!(
                    "could not place {category:?} #{} after {} retries",
                    tracks.len() + 1,
                    config.max_placement_retries
                ))
            })?;
            let heading = rng.random_range(-PI..PI);
            let [lo, hi] = config.speed_ranges.for_category(*category);
            let speed = if rng.random_bool(config.stationary_fraction) {
                0.0
            } else {
                rng.random_range(lo..=hi)
            };
            let model = pick_model(config, speed, &mut rng);
            let kin = Kinematics { origin: Pose::new(x, y, heading), speed, model };
            let history = (0..n_in).map(|k| kin.pose_at((k as f64 - (n_in - 1) as f64) * dt)).collect();
            let future = (1..=spec.output_steps()).map(|k| kin.pose_at(k as f64 * dt)).collect();
            tracks.push(ObjectTrack {
                instance_id: tracks.len() as i32 + 1,
                category: *category,
                length,
                width,
                height,
                speed,
                motion_model: model,
                history,
                future,
            });
        }
    }

    let area = (x1 - x0) * (y1 - y0);
    let n_clutter = (config.clutter_density * area).round() as usize;
    let clutter: Vec<[f64; 3]> = (0..n_clutter)
        .map(|_| {
            [
                rng.random_range(x0..x1),
                rng.random_range(y0..y1),
                GROUND_Z + rng.random::<f64>() * 2.5,
            ]
        })
        .collect();

    let mut frames = Vec::with_capacity(n_in);
    for k in 0..n_in {
        let mut pts = Vec::new();
        for t in &tracks {
            let n = (config.point_density * t.length * t.width).round().max(1.0) as usize;
            sample_perimeter(t, t.history[k], n, &noise, &mut rng, &mut pts);
        }
        for c in &clutter {
            pts.push([
                (c[0] + noise.sample(&mut rng)) as f32,
                (c[1] + noise.sample(&mut rng)) as f32,
                (c[2] + noise.sample(&mut rng)) as f32,
            ]);
        }
        if config.sparsity_factor > 0.0 {
            pts.retain(|_| !rng.random_bool(config.sparsity_factor));
        }
        frames.push(pts);
    }

    let points = PointSequence::new(frames);
    let scene = GroundTruthScene {
        objects: tracks.iter().map(ObjectTrack::ground_truth).collect(),
        current_points: points.current().to_vec(),
        coverage_margin: 3.0 * config.noise_sigma,
    };
    let labels = rasterize_labels(&scene, spec)?;
    Ok(GeneratedSequence { points, labels, tracks })
}

/// Paths of the three splits written by [`make_benchmark`].
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Builds train/val/test datasets in memory. With `mask_category` set, the
/// training split contains no objects of that category.
pub fn build_benchmark(
    config: &SceneConfig,
    spec: &GridSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    mask_category: Option<Category>,
) -> Result<BenchmarkSplits> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::config("benchmark split sizes must be > 0"));
    }
    if mask_category == Some(Category::Background) {
        return Err(Error::config("background cannot be masked"));
    }
    config.validate()?;
    let split = |stream: u64, n: usize, cfg: &SceneConfig| -> Result<Dataset> {
        let mut seeds = ChaCha8Rng::seed_from_u64(config.rng_seed);
        seeds.set_stream(stream);
        let mut ds = Dataset::new(spec.clone());
        for _ in 0..n {
            let seq_cfg = SceneConfig { rng_seed: seeds.next_u64(), ..cfg.clone() };
            let g = generate_sequence(&seq_cfg, spec)?;
            ds.samples.push(Sample { points: g.points, labels: g.labels });
        }
        Ok(ds)
    };
    let mut train_cfg = config.clone();
    if let Some(c) = mask_category {
        train_cfg.set_count(c, 0);
    }
    Ok(BenchmarkSplits {
        train: split(1, n_train, &train_cfg)?,
        val: split(2, n_val, config)?,
        test: split(3, n_test, config)?,
    })
}

/// Generates the three splits and writes them as `train.pmds`, `val.pmds`
/// and `test.pmds` under `out_dir`.
pub fn make_benchmark(
    config: &SceneConfig,
    spec: &GridSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    mask_category: Option<Category>,
    out_dir: impl AsRef<Path>,
) -> Result<BenchmarkFiles> {
    let splits = build_benchmark(config, spec, n_train, n_val, n_test, mask_category)?;
    let dir = out_dir.as_ref();
    let files = BenchmarkFiles {
        train: dir.join("train.pmds"),
        val: dir.join("val.pmds"),
        test: dir.join("test.pmds"),
    };
    write_dataset(&files.train, &splits.train)?;
    write_dataset(&files.val, &splits.val)?;
    write_dataset(&files.test, &splits.test)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn only(category: Category, n: usize) -> SceneConfig {
        let mut cfg = SceneConfig {
            n_cars: 0,
            n_pedestrians: 0,
            n_bikes: 0,
            n_others: 0,
            clutter_density: 0.0,
            ..SceneConfig::default()
        };
        cfg.set_count(category, n);
        cfg
    }

    #[test]
    fn empty_config_gives_empty_scene() {
        let spec = GridSpec::desk();
        let g = generate_sequence(&only(Category::Car, 0), &spec).unwrap();
        assert!(g.points.frames.iter().all(Vec::is_empty));
        assert_eq!(g.labels, SceneLabels::empty(5, 64, 64));
        assert!(g.tracks.is_empty());
    }

    #[test]
    fn car_at_five_metres_per_second() {
        let spec = GridSpec::desk();
        let mut cfg = only(Category::Car, 1);
        cfg.speed_ranges.car = [5.0, 5.0];
        cfg.stationary_fraction = 0.0;
        cfg.motion_model_weights = [1.0, 0.0, 0.0];
        let g = generate_sequence(&cfg, &spec).unwrap();
        let cells: Vec<usize> = (0..g.labels.cells()).filter(|&c| g.labels.category[c] == 1).collect();
        assert!(!cells.is_empty());
        for c in cells {
            let [dx, dy] = g.labels.final_motion(c);
            assert!(((dx as f64).hypot(dy as f64) - 5.0).abs() < 1e-5);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = GridSpec::desk();
        let cfg = SceneConfig { rng_seed: 42, sparsity_factor: 0.2, ..SceneConfig::default() };
        let a = generate_sequence(&cfg, &spec).unwrap();
        let b = generate_sequence(&cfg, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_sequence(&SceneConfig { rng_seed: 43, ..cfg }, &spec).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn crowded_scene_fails_placement() {
        let spec = GridSpec::new([-2.0, 2.0], [-2.0, 2.0], [-3.0, 2.0], 0.25, 0.4, 0.2, 5, 5).unwrap();
        let cfg = SceneConfig { n_cars: 20, max_placement_retries: 10, ..only(Category::Car, 0) };
        assert!(matches!(generate_sequence(&cfg, &spec), Err(Error::Data(_))));
    }

    #[test]
    fn rejects_invalid_config() {
        let spec = GridSpec::desk();
        for cfg in [
            SceneConfig { sparsity_factor: 1.5, ..SceneConfig::default() },
            SceneConfig { point_density: -1.0, ..SceneConfig::default() },
            SceneConfig { motion_model_weights: [0.0; 3], ..SceneConfig::default() },
        ] {
            assert!(matches!(generate_sequence(&cfg, &spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn points_lie_on_their_objects() {
        let spec = GridSpec::desk();
        let cfg = SceneConfig { clutter_density: 0.0, rng_seed: 7, ..SceneConfig::default() };
        let g = generate_sequence(&cfg, &spec).unwrap();
        let tol = 5.0 * cfg.noise_sigma;
        for (k, frame) in g.points.frames.iter().enumerate() {
            for p in frame {
                let inside = g.tracks.iter().any(|t| t.contains(k, p[0] as f64, p[1] as f64, tol));
                assert!(inside, "point {p:?} in frame {k} outside every footprint");
            }
        }
    }

    #[test]
    fn tracks_are_continuous() {
        let spec = GridSpec::desk();
        for seed in 0..20 {
            let g = generate_sequence(&SceneConfig { rng_seed: seed, ..SceneConfig::default() }, &spec).unwrap();
            for t in &g.tracks {
                let poses: Vec<Pose> = t.history.iter().chain(&t.future).copied().collect();
                for w in poses.windows(2) {
                    let step = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
                    assert!(step <= t.speed * spec.frame_interval() + 1e-9);
                }
            }
        }
    }

    #[test]
    fn stop_and_go_distance_is_continuous() {
        for starting in [false, true] {
            let kin = Kinematics {
                origin: Pose::new(0.0, 0.0, 0.0),
                speed: 4.0,
                model: MotionModel::StopAndGo { switch_time: 0.3, ramp: 2.0, starting },
            };
            assert_eq!(kin.distance(0.0), 0.0);
            let mut prev = kin.distance(-1.0);
            for i in -99..400 {
                let d = kin.distance(i as f64 * 0.01);
                assert!(d >= prev - 1e-12 && d - prev <= 4.0 * 0.01 + 1e-12);
                prev = d;
            }
        }
    }

    #[test]
    fn masking_background_is_rejected() {
        let r = build_benchmark(&SceneConfig::default(), &GridSpec::desk(), 1, 1, 1, Some(Category::Background));
        assert!(matches!(r, Err(Error::Config(_))));
        let r = build_benchmark(&SceneConfig::default(), &GridSpec::desk(), 0, 1, 1, None);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
