//! Canonical grid types, voxelization and ground-truth rasterization.
//!
//! Cell `(i, j, k)` indexes x, y and z bins respectively. Dense maps are stored
//! row-major with `i` outermost, so a BEV map of shape `H x W` is addressed as
//! `i * W + j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of semantic categories, background included.
pub const NUM_CATEGORIES: usize = 5;

/// Per-step speed below which a cell is labelled static (m/s).
pub const STATIC_SPEED: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Background = 0,
    Car = 1,
    Pedestrian = 2,
    Bike = 3,
    Others = 4,
}

impl Category {
    pub const ALL: [Category; NUM_CATEGORIES] = [
        Category::Background,
        Category::Car,
        Category::Pedestrian,
        Category::Bike,
        Category::Others,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        Self::ALL.get(idx).copied()
    }

    /// Short label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Category::Background => "Bg",
            Category::Car => "car",
            Category::Pedestrian => "Ped.",
            Category::Bike => "Bike",
            Category::Others => "Others",
        }
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "background" | "bg" => Ok(Category::Background),
            "car" => Ok(Category::Car),
            "pedestrian" | "ped" => Ok(Category::Pedestrian),
            "bike" => Ok(Category::Bike),
            "others" | "other" => Ok(Category::Others),
            other => Err(Error::config(format!("unknown category {other:?}"))),
        }
    }
}

/// Spatial extent, resolution and temporal layout of the BEV grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec", into = "RawGridSpec")]
pub struct GridSpec {
    x_range: [f64; 2],
    y_range: [f64; 2],
    z_range: [f64; 2],
    xy_resolution: f64,
    z_resolution: f64,
    frame_interval: f64,
    input_frames: usize,
    output_steps: usize,
    height: usize,
    width: usize,
    channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawGridSpec {
    x_range: [f64; 2],
    y_range: [f64; 2],
    z_range: [f64; 2],
    xy_resolution: f64,
    z_resolution: f64,
    frame_interval: f64,
    input_frames: usize,
    output_steps: usize,
}

impl TryFrom<RawGridSpec> for GridSpec {
    type Error = Error;

    fn try_from(raw: RawGridSpec) -> Result<Self> {
        GridSpec::new(
            raw.x_range,
            raw.y_range,
            raw.z_range,
            raw.xy_resolution,
            raw.z_resolution,
            raw.frame_interval,
            raw.input_frames,
            raw.output_steps,
        )
    }
}

impl From<GridSpec> for RawGridSpec {
    fn from(s: GridSpec) -> Self {
        RawGridSpec {
            x_range: s.x_range,
            y_range: s.y_range,
            z_range: s.z_range,
            xy_resolution: s.xy_resolution,
            z_resolution: s.z_resolution,
            frame_interval: s.frame_interval,
            input_frames: s.input_frames,
            output_steps: s.output_steps,
        }
    }
}

impl Default for GridSpec {
    /// 64 m x 64 m x 5 m at 0.25 m x 0.25 m x 0.4 m, five input frames and
    /// five 0.2 s output steps.
    fn default() -> Self {
        GridSpec::new([-32.0, 32.0], [-32.0, 32.0], [-3.0, 2.0], 0.25, 0.4, 0.2, 5, 5)
            .expect("default grid spec is valid")
    }
}

impl GridSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x_range: [f64; 2],
        y_range: [f64; 2],
        z_range: [f64; 2],
        xy_resolution: f64,
        z_resolution: f64,
        frame_interval: f64,
        input_frames: usize,
        output_steps: usize,
    ) -> Result<Self> {
        let all = [
            x_range[0],
            x_range[1],
            y_range[0],
            y_range[1],
            z_range[0],
            z_range[1],
            xy_resolution,
            z_resolution,
            frame_interval,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("grid spec values must be finite"));
        }
        if xy_resolution <= 0.0 || z_resolution <= 0.0 || frame_interval <= 0.0 {
            return Err(Error::config("resolutions and frame interval must be positive"));
        }
        for (name, r) in [("x", x_range), ("y", y_range), ("z", z_range)] {
            if r[0] >= r[1] {
                return Err(Error::config(format!("{name} range must be increasing")));
            }
        }
        if input_frames == 0 || output_steps == 0 {
            return Err(Error::config("input_frames and output_steps must be >= 1"));
        }
        let height = ((x_range[1] - x_range[0]) / xy_resolution).round() as usize;
        let width = ((y_range[1] - y_range[0]) / xy_resolution).round() as usize;
        // 12.5 bins for the default z extent round up to 13.
        let channels = ((z_range[1] - z_range[0]) / z_resolution - 1e-9).ceil() as usize;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::config("grid has a zero-sized axis"));
        }
        Ok(GridSpec {
            x_range,
            y_range,
            z_range,
            xy_resolution,
            z_resolution,
            frame_interval,
            input_frames,
            output_steps,
            height,
            width,
            channels,
        })
    }

    /// Smaller grid used for desk-scale training: 32 m x 32 m at 0.5 m cells.
    pub fn desk() -> Self {
        GridSpec::new([-16.0, 16.0], [-16.0, 16.0], [-3.0, 2.0], 0.5, 0.4, 0.2, 5, 5)
            .expect("desk grid spec is valid")
    }

    pub fn x_range(&self) -> [f64; 2] {
        self.x_range
    }
    pub fn y_range(&self) -> [f64; 2] {
        self.y_range
    }
    pub fn z_range(&self) -> [f64; 2] {
        self.z_range
    }
    pub fn xy_resolution(&self) -> f64 {
        self.xy_resolution
    }
    pub fn z_resolution(&self) -> f64 {
        self.z_resolution
    }
    pub fn frame_interval(&self) -> f64 {
        self.frame_interval
    }
    pub fn input_frames(&self) -> usize {
        self.input_frames
    }
    pub fn output_steps(&self) -> usize {
        self.output_steps
    }
    /// Cells along x.
    pub fn height(&self) -> usize {
        self.height
    }
    /// Cells along y.
    pub fn width(&self) -> usize {
        self.width
    }
    /// Height bins along z.
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
    /// Seconds covered by the prediction horizon.
    pub fn horizon_seconds(&self) -> f64 {
        self.output_steps as f64 * self.frame_interval
    }

    /// Metric center of BEV cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_range[0] + (i as f64 + 0.5) * self.xy_resolution,
            self.y_range[0] + (j as f64 + 0.5) * self.xy_resolution,
        )
    }

    /// Voxel index of a point, or `None` when it falls outside the grid.
    pub fn voxel_of(&self, p: [f32; 3]) -> Option<(usize, usize, usize)> {
        let bin = |v: f32, lo: f64, res: f64, n: usize| -> Option<usize> {
            let v = v as f64;
            if !v.is_finite() {
                return None;
            }
            let idx = ((v - lo) / res).floor();
            (idx >= 0.0 && idx < n as f64).then_some(idx as usize)
        };
        Some((
            bin(p[0], self.x_range[0], self.xy_resolution, self.height)?,
            bin(p[1], self.y_range[0], self.xy_resolution, self.width)?,
            bin(p[2], self.z_range[0], self.z_resolution, self.channels)?,
        ))
    }
}

/// Input frames of 3D points in a shared, ego-centered reference frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSequence {
    pub frames: Vec<Vec<[f32; 3]>>,
}

impl PointSequence {
    pub fn new(frames: Vec<Vec<[f32; 3]>>) -> Self {
        Self { frames }
    }

    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        if self.frames.len() != spec.input_frames() {
            return Err(Error::shape(format!(
                "expected {} frames, got {}",
                spec.input_frames(),
                self.frames.len()
            )));
        }
        if self.frames.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite point coordinate".into()));
        }
        Ok(())
    }

    /// The most recent frame, which labels are defined against.
    pub fn current(&self) -> &[[f32; 3]] {
        self.frames.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Binary `H x W x C` voxel occupancy of one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    height: usize,
    width: usize,
    channels: usize,
    cells: Vec<u8>,
    dropped: usize,
}

impl OccupancyGrid {
    pub fn empty(spec: &GridSpec) -> Self {
        Self {
            height: spec.height(),
            width: spec.width(),
            channels: spec.channels(),
            cells: vec![0; spec.cells() * spec.channels()],
            dropped: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.cells[(i * self.width + j) * self.channels + k] != 0
    }

    fn set(&mut self, i: usize, j: usize, k: usize) {
        self.cells[(i * self.width + j) * self.channels + k] = 1;
    }

    /// Raw `H x W x C` cell values (0 or 1).
    pub fn as_slice(&self) -> &[u8] {
        &self.cells
    }

    /// Points that fell outside the grid (or were non-finite).
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }

    /// `H x W` map marking columns with any occupied height bin.
    pub fn bev(&self) -> Vec<u8> {
        self.cells
            .chunks_exact(self.channels)
            .map(|col| col.iter().any(|&c| c != 0) as u8)
            .collect()
    }
}

/// Bins one frame of points into the grid. Points outside the extent are
/// dropped and counted, never an error.
pub fn voxelize(points: &[[f32; 3]], spec: &GridSpec) -> OccupancyGrid {
    let mut grid = OccupancyGrid::empty(spec);
    for &p in points {
        match spec.voxel_of(p) {
            Some((i, j, k)) => grid.set(i, j, k),
            None => grid.dropped += 1,
        }
    }
    grid
}

/// Voxelizes every frame of a sequence.
pub fn voxelize_sequence(seq: &PointSequence, spec: &GridSpec) -> Vec<OccupancyGrid> {
    seq.frames.iter().map(|f| voxelize(f, spec)).collect()
}

/// Ground-truth motion, category, state and instance maps for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLabels {
    steps: usize,
    height: usize,
    width: usize,
    /// `T x H x W x 2`, metres from the current frame to each future step.
    pub motion: Vec<f32>,
    /// `H x W` category indices.
    pub category: Vec<u8>,
    /// `H x W`, 1 = moving.
    pub state: Vec<u8>,
    /// `H x W`, 0 = no instance.
    pub instance_id: Vec<i32>,
    /// `H x W`, 1 = occupied in the current frame.
    pub valid: Vec<u8>,
}

impl SceneLabels {
    pub fn empty(steps: usize, height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            steps,
            height,
            width,
            motion: vec![0.0; steps * n * 2],
            category: vec![0; n],
            state: vec![0; n],
            instance_id: vec![0; n],
            valid: vec![0; n],
        }
    }

    /// Assembles labels from raw buffers, checking every length.
    pub fn from_parts(
        steps: usize,
        height: usize,
        width: usize,
        motion: Vec<f32>,
        category: Vec<u8>,
        state: Vec<u8>,
        instance_id: Vec<i32>,
        valid: Vec<u8>,
    ) -> Result<Self> {
        let n = height * width;
        if motion.len() != steps * n * 2
            || category.len() != n
            || state.len() != n
            || instance_id.len() != n
            || valid.len() != n
        {
            return Err(Error::shape("label buffer lengths disagree with T x H x W"));
        }
        Ok(Self {
            steps,
            height,
            width,
            motion,
            category,
            state,
            instance_id,
            valid,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Displacement of `cell` at future step `step` (0-based, so step 0 is
    /// one frame interval ahead).
    pub fn motion_at(&self, step: usize, cell: usize) -> [f32; 2] {
        let o = (step * self.cells() + cell) * 2;
        [self.motion[o], self.motion[o + 1]]
    }

    fn set_motion(&mut self, step: usize, cell: usize, d: [f32; 2]) {
        let o = (step * self.cells() + cell) * 2;
        self.motion[o] = d[0];
        self.motion[o + 1] = d[1];
    }

    /// Displacement at the last step of the horizon.
    pub fn final_motion(&self, cell: usize) -> [f32; 2] {
        self.motion_at(self.steps - 1, cell)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v != 0).count()
    }

    /// Valid cells labelled with `category`.
    pub fn count_category(&self, category: Category) -> usize {
        self.category
            .iter()
            .zip(&self.valid)
            .filter(|(&c, &v)| v != 0 && c as usize == category.index())
            .count()
    }
}

/// A rigid-body pose on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    /// Expresses a world point in this pose's local frame.
    pub fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let dx = px - self.x;
        let dy = py - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
    }
}

/// One labelled object as seen by the rasterizer: its footprint, pose at the
/// current frame and poses at each future step.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    pub instance_id: i32,
    pub category: Category,
    pub length: f64,
    pub width: f64,
    pub current: Pose,
    pub future: Vec<Pose>,
}

impl GroundTruthObject {
    /// Whether a cell square centred at `(cx, cy)` touches the footprint
    /// dilated by `margin`.
    fn covers(&self, cx: f64, cy: f64, half_cell: f64, margin: f64) -> bool {
        let (lx, ly) = self.current.to_local(cx, cy);
        let dx = (lx.abs() - self.length / 2.0).max(0.0);
        let dy = (ly.abs() - self.width / 2.0).max(0.0);
        // Cell square rotated into the object frame is bounded by half_cell * sqrt(2).
        let reach = half_cell * std::f64::consts::SQRT_2 + margin;
        dx * dx + dy * dy <= reach * reach
    }

    /// Rigid displacement of world point `(px, py)` from the current pose to
    /// future step `step`.
    pub fn displacement(&self, px: f64, py: f64, step: usize) -> (f64, f64) {
        let (lx, ly) = self.current.to_local(px, py);
        let (fx, fy) = self.future[step].to_world(lx, ly);
        (fx - px, fy - py)
    }
}

/// Everything the rasterizer needs from a simulated (or converted) scene.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthScene {
    pub objects: Vec<GroundTruthObject>,
    /// Points of the current (last input) frame.
    pub current_points: Vec<[f32; 3]>,
    /// Footprint dilation absorbing sensor noise, metres.
    pub coverage_margin: f64,
}

/// Rasterizes per-object ground truth onto the occupied cells of the current
/// frame. Overlaps resolve to the smallest instance id.
pub fn rasterize_labels(scene: &GroundTruthScene, spec: &GridSpec) -> Result<SceneLabels> {
    let steps = spec.output_steps();
    let (h, w) = (spec.height(), spec.width());
    for obj in &scene.objects {
        if obj.future.len() != steps {
            return Err(Error::shape(format!(
                "object {} has {} future poses, expected {steps}",
                obj.instance_id,
                obj.future.len()
            )));
        }
        if obj.instance_id <= 0 || obj.category == Category::Background {
            return Err(Error::Data(format!(
                "object {} needs a positive id and a foreground category",
                obj.instance_id
            )));
        }
    }
    let mut objects: Vec<&GroundTruthObject> = scene.objects.iter().collect();
    objects.sort_by_key(|o| o.instance_id);

    let mut labels = SceneLabels::empty(steps, h, w);
    labels.valid = voxelize(&scene.current_points, spec).bev();
    let half_cell = spec.xy_resolution() / 2.0;
    let dt = spec.frame_interval();

    for cell in 0..h * w {
        if labels.valid[cell] == 0 {
            continue;
        }
        let (cx, cy) = spec.cell_center(cell / w, cell % w);
        let Some(obj) = objects
            .iter()
            .find(|o| o.covers(cx, cy, half_cell, scene.coverage_margin))
        else {
            continue;
        };
        labels.category[cell] = obj.category as u8;
        labels.instance_id[cell] = obj.instance_id;
        let mut moving = false;
        for step in 0..steps {
            let (dx, dy) = obj.displacement(cx, cy, step);
            let d = [dx as f32, dy as f32];
            // Judge against the stored f32 value so the static invariant holds exactly.
            let norm = ((d[0] as f64).powi(2) + (d[1] as f64).powi(2)).sqrt();
            if norm > STATIC_SPEED * (step + 1) as f64 * dt {
                moving = true;
            }
            labels.set_motion(step, cell, d);
        }
        labels.state[cell] = moving as u8;
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_dimensions() {
        let s = GridSpec::default();
        assert_eq!((s.height(), s.width(), s.channels()), (256, 256, 13));
        assert_eq!(s.input_frames(), 5);
        assert_eq!(s.output_steps(), 5);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(GridSpec::new([1.0, 0.0], [0.0, 1.0], [0.0, 1.0], 0.1, 0.1, 0.2, 5, 5).is_err());
        assert!(GridSpec::new([0.0, 1.0], [0.0, 1.0], [0.0, 1.0], 0.0, 0.1, 0.2, 5, 5).is_err());
        assert!(GridSpec::new([0.0, 1.0], [0.0, 1.0], [0.0, 1.0], 0.1, -0.1, 0.2, 5, 5).is_err());
        assert!(GridSpec::new([0.0, 1.0], [0.0, 1.0], [0.0, 1.0], 0.1, 0.1, 0.2, 0, 5).is_err());
    }

    #[test]
    fn spec_serde_validates() {
        let s = GridSpec::desk();
        let txt = serde_json::to_string(&s).unwrap();
        let back: GridSpec = serde_json::from_str(&txt).unwrap();
        assert_eq!(back, s);
        let bad = txt.replace("\"xy_resolution\":0.5", "\"xy_resolution\":-0.5");
        assert!(serde_json::from_str::<GridSpec>(&bad).is_err());
    }

    #[test]
    fn corner_points() {
        let s = GridSpec::default();
        let g = voxelize(&[[-32.0, -32.0, -3.0]], &s);
        assert!(g.get(0, 0, 0));
        assert_eq!(s.voxel_of([0.0, 0.0, 0.0]), Some((128, 128, 7)));
        assert_eq!(s.voxel_of([31.99, 31.99, 1.99]), Some((255, 255, 12)));
    }

    #[test]
    fn out_of_range_points_are_counted() {
        let s = GridSpec::default();
        let pts = [[32.0, 0.0, 0.0], [0.0, -32.01, 0.0], [0.0, 0.0, 2.5], [f32::NAN, 0.0, 0.0], [1.0, 1.0, 0.0]];
        let g = voxelize(&pts, &s);
        assert_eq!(g.dropped(), 4);
        assert_eq!(g.occupied_count(), 1);
    }

    #[test]
    fn empty_scene_rasterizes_to_zero() {
        let s = GridSpec::desk();
        let l = rasterize_labels(&GroundTruthScene::default(), &s).unwrap();
        assert_eq!(l, SceneLabels::empty(5, 64, 64));
    }

    fn car_scene(spec: &GridSpec, speed: f64) -> GroundTruthScene {
        let dt = spec.frame_interval();
        let obj = GroundTruthObject {
            instance_id: 1,
            category: Category::Car,
            length: 4.0,
            width: 2.0,
            current: Pose::new(0.0, 0.0, 0.0),
            future: (1..=5).map(|k| Pose::new(speed * dt * k as f64, 0.0, 0.0)).collect(),
        };
        let mut pts = Vec::new();
        for a in 0..40 {
            for b in 0..20 {
                pts.push([-1.9 + a as f32 * 0.095, -0.9 + b as f32 * 0.09, 0.5]);
            }
        }
        GroundTruthScene { objects: vec![obj], current_points: pts, coverage_margin: 0.05 }
    }

    #[test]
    fn translating_car_labels() {
        let s = GridSpec::desk();
        let l = rasterize_labels(&car_scene(&s, 1.0), &s).unwrap();
        let cells: Vec<usize> = (0..l.cells()).filter(|&c| l.valid[c] != 0).collect();
        assert!(!cells.is_empty());
        for &c in &cells {
            assert_eq!(l.category[c], 1);
            assert_eq!(l.state[c], 1);
            assert_eq!(l.instance_id[c], 1);
            for t in 0..5 {
                let m = l.motion_at(t, c);
                assert!((m[0] as f64 - 0.2 * (t + 1) as f64).abs() < 1e-6);
                assert!(m[1].abs() < 1e-6);
            }
        }
    }

    #[test]
    fn stationary_pedestrian_is_static() {
        let s = GridSpec::desk();
        let mut scene = car_scene(&s, 0.0);
        scene.objects[0].category = Category::Pedestrian;
        let l = rasterize_labels(&scene, &s).unwrap();
        for c in (0..l.cells()).filter(|&c| l.valid[c] != 0) {
            assert_eq!(l.category[c], 2);
            assert_eq!(l.state[c], 0);
            assert_eq!(l.final_motion(c), [0.0, 0.0]);
        }
    }

    #[test]
    fn overlap_goes_to_smallest_id() {
        let s = GridSpec::desk();
        let mut scene = car_scene(&s, 1.0);
        let mut other = scene.objects[0].clone();
        other.instance_id = 7;
        other.category = Category::Bike;
        // Insert the larger id first; ordering must not matter.
        scene.objects.insert(0, other);
        let l = rasterize_labels(&scene, &s).unwrap();
        assert!(l.instance_id.iter().all(|&id| id == 0 || id == 1));
    }

    #[test]
    fn rotating_object_uses_rigid_displacement() {
        let obj = GroundTruthObject {
            instance_id: 1,
            category: Category::Car,
            length: 4.0,
            width: 2.0,
            current: Pose::new(1.0, 2.0, 0.3),
            future: vec![Pose::new(1.0, 2.0, 0.3 + std::f64::consts::FRAC_PI_2)],
        };
        // A point 1 m ahead of the car rotates by 90 degrees about its center.
        let (px, py) = obj.current.to_world(1.0, 0.0);
        let (dx, dy) = obj.displacement(px, py, 0);
        let (ex, ey) = obj.future[0].to_world(1.0, 0.0);
        assert!((px + dx - ex).abs() < 1e-12 && (py + dy - ey).abs() < 1e-12);
    }
}
