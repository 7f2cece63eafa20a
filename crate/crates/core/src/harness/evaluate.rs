//! Batched inference over a dataset, metric reports, and two rule baselines
//! (zero motion and constant velocity).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backbone::grids_to_tensor;
use crate::dataset::{Dataset, PredictionRecord};
use crate::error::{Error, Result};
use crate::grid::{voxelize_sequence, GridSpec, OccupancyGrid, PointSequence, SceneLabels, NUM_CATEGORIES};
use crate::latent::{seeded_rng, SampleMode};
use crate::metrics::{evaluate_predictions, MetricReport, ReportOptions};
use crate::model::PriorMotion;

/// Sequences per inference batch.
pub const EVAL_BATCH: usize = 4;

/// Runs the model on every sequence of `ds`.
pub fn predict_dataset(model: &PriorMotion, ds: &Dataset, mode: SampleMode, seed: u64) -> Result<Vec<PredictionRecord>> {
    if ds.spec != *model.spec() {
        return Err(Error::config("dataset grid does not match the model grid"));
    }
    let spec = model.spec();
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(EVAL_BATCH) {
        let grids: Vec<Vec<OccupancyGrid>> = chunk.iter().map(|s| voxelize_sequence(&s.points, spec)).collect();
        let refs: Vec<&[OccupancyGrid]> = grids.iter().map(Vec::as_slice).collect();
        let x = grids_to_tensor(&refs, spec, model.dtype())?;
        let pred = model.predict(&x, mode, &mut rng)?;
        out.extend(pred.to_records()?);
    }
    Ok(out)
}

pub fn labels_of(ds: &Dataset) -> Vec<SceneLabels> {
    ds.samples.iter().map(|s| s.labels.clone()).collect()
}

/// Deterministic-mode evaluation.
pub fn evaluate_model(model: &PriorMotion, ds: &Dataset, opts: ReportOptions) -> Result<MetricReport> {
    let preds = predict_dataset(model, ds, SampleMode::Deterministic, 0)?;
    evaluate_predictions(&preds, &labels_of(ds), &ds.spec, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleBaseline {
    /// Zero motion everywhere.
    Static,
    /// Per-object velocity from the input frames, extrapolated linearly.
    ConstantVelocity,
}

impl std::str::FromStr for RuleBaseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "constant_velocity" | "cv" => Ok(Self::ConstantVelocity),
            other => Err(Error::config(format!("unknown baseline {other:?} (static, constant_velocity)"))),
        }
    }
}

pub fn rule_predictions(baseline: RuleBaseline, ds: &Dataset) -> Vec<PredictionRecord> {
    ds.samples
        .iter()
        .map(|s| match baseline {
            RuleBaseline::Static => zero_record(&ds.spec),
            RuleBaseline::ConstantVelocity => constant_velocity(&s.points, &ds.spec),
        })
        .collect()
}

pub fn evaluate_rule(baseline: RuleBaseline, ds: &Dataset, opts: ReportOptions) -> Result<MetricReport> {
    evaluate_predictions(&rule_predictions(baseline, ds), &labels_of(ds), &ds.spec, opts)
}

fn zero_record(spec: &GridSpec) -> PredictionRecord {
    let n = spec.cells();
    PredictionRecord {
        motion: vec![0.0; spec.output_steps() * n * 2],
        category_logits: vec![0.0; n * NUM_CATEGORIES],
        state_logits: vec![-1.0; n],
    }
}

/// A connected group of occupied BEV cells in one frame with the bounding-box
/// center of its points.
struct Cluster {
    cells: Vec<usize>,
    points: Vec<[f64; 2]>,
    center: [f64; 2],
    /// Per axis, whether the low and high sides touch the grid border.
    clipped: [[bool; 2]; 2],
}

/// Width of the band of extreme points averaged into a reference point.
const EDGE_BAND: f64 = 0.15;

impl Cluster {
    /// Mean of the points lying furthest along `u`.
    fn extreme(&self, u: [f64; 2]) -> [f64; 2] {
        let dot = |p: &[f64; 2]| p[0] * u[0] + p[1] * u[1];
        let top = self.points.iter().map(dot).fold(f64::NEG_INFINITY, f64::max);
        let band: Vec<&[f64; 2]> = self.points.iter().filter(|p| dot(p) >= top - EDGE_BAND).collect();
        let n = band.len() as f64;
        [band.iter().map(|p| p[0]).sum::<f64>() / n, band.iter().map(|p| p[1]).sum::<f64>() / n]
    }
}

/// 8-connected components of a frame's BEV occupancy.
fn clusters(points: &[[f32; 3]], spec: &GridSpec) -> Vec<Cluster> {
    let (h, w) = (spec.height(), spec.width());
    let mut cell_points: HashMap<usize, Vec<[f64; 2]>> = HashMap::new();
    for p in points {
        if let Some((i, j, _)) = spec.voxel_of(*p) {
            cell_points.entry(i * w + j).or_default().push([p[0] as f64, p[1] as f64]);
        }
    }
    let mut label = vec![usize::MAX; h * w];
    let mut keys: Vec<usize> = cell_points.keys().copied().collect();
    keys.sort_unstable();
    let mut out = Vec::new();
    for &start in &keys {
        if label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut stack = vec![start];
        label[start] = id;
        let mut cells = Vec::new();
        while let Some(c) = stack.pop() {
            cells.push(c);
            let (i, j) = ((c / w) as isize, (c % w) as isize);
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (ni, nj) = (i + di, j + dj);
                    if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                        continue;
                    }
                    let n = ni as usize * w + nj as usize;
                    if label[n] == usize::MAX && cell_points.contains_key(&n) {
                        label[n] = id;
                        stack.push(n);
                    }
                }
            }
        }
        let points: Vec<[f64; 2]> = cells.iter().flat_map(|c| cell_points[c].iter().copied()).collect();
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &points {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let res = spec.xy_resolution();
        let range = [spec.x_range(), spec.y_range()];
        let clipped = [0, 1].map(|d| [lo[d] - range[d][0] < res, range[d][1] - hi[d] < res]);
        out.push(Cluster { cells, points, center: [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0], clipped });
    }
    out
}

/// Association gate: metres a cluster may move between consecutive frames
/// beyond the current velocity estimate.
const GATE: f64 = 3.0;

fn constant_velocity(points: &PointSequence, spec: &GridSpec) -> PredictionRecord {
    let mut rec = zero_record(spec);
    let dt = spec.frame_interval();
    let frames: Vec<Vec<Cluster>> = points.frames.iter().map(|f| clusters(f, spec)).collect();
    let Some((current, history)) = frames.split_last() else { return rec };
    let n = spec.cells();
    for c in current {
        // Walk back through the history, matching the nearest cluster to the
        // position predicted by the running velocity estimate.
        let mut matched = vec![(0.0f64, c)];
        let mut v = [0.0f64; 2];
        for (back, frame) in history.iter().rev().enumerate() {
            let t = -((back + 1) as f64) * dt;
            let last = matched.last().unwrap().1;
            let guess = [last.center[0] - v[0] * dt, last.center[1] - v[1] * dt];
            let best = frame
                .iter()
                .map(|k| (k, (k.center[0] - guess[0]).hypot(k.center[1] - guess[1])))
                .filter(|(_, d)| *d <= GATE)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let Some((k, _)) = best else { break };
            matched.push((t, k));
            v = track_velocity(&matched);
        }
        if matched.len() > 1 {
            v = refine_velocity(&matched, v);
        }
        for &cell in &c.cells {
            for step in 0..spec.output_steps() {
                let tau = (step + 1) as f64 * dt;
                let o = (step * n + cell) * 2;
                rec.motion[o] = (v[0] * tau) as f32;
                rec.motion[o + 1] = (v[1] * tau) as f32;
            }
            let moving = (v[0].hypot(v[1])) > crate::grid::STATIC_SPEED;
            rec.state_logits[cell] = if moving { 1.0 } else { -1.0 };
        }
    }
    rec
}

/// Velocity of a matched track. Objects cut by the grid border are followed
/// through the points furthest from the cut.
fn track_velocity(matched: &[(f64, &Cluster)]) -> [f64; 2] {
    let mut u = [0.0f64; 2];
    for d in 0..2 {
        let low = matched.iter().any(|(_, k)| k.clipped[d][0]);
        let high = matched.iter().any(|(_, k)| k.clipped[d][1]);
        u[d] = low as u8 as f64 - high as u8 as f64;
    }
    let track: Vec<(f64, [f64; 2])> = if u == [0.0, 0.0] {
        matched.iter().map(|(t, k)| (*t, k.center)).collect()
    } else {
        matched.iter().map(|(t, k)| (*t, k.extreme(u))).collect()
    };
    fit_velocity(&track)
}

/// Pairs further apart than this are ignored during registration.
const MATCH_RADIUS: f64 = 0.3;
const REGISTRATION_ITERS: usize = 15;

/// Translation taking `from` onto `to`, refined from `init` by trimmed
/// nearest-neighbour registration.
fn register(from: &[[f64; 2]], to: &[[f64; 2]], init: [f64; 2]) -> [f64; 2] {
    let mut d = init;
    for _ in 0..REGISTRATION_ITERS {
        let mut sum = [0.0; 2];
        let mut n = 0usize;
        for p in from {
            let q = [p[0] + d[0], p[1] + d[1]];
            let near = to
                .iter()
                .map(|r| ([r[0] - q[0], r[1] - q[1]], (r[0] - q[0]).hypot(r[1] - q[1])))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((r, _)) = near.filter(|x| x.1 <= MATCH_RADIUS) {
                sum[0] += r[0];
                sum[1] += r[1];
                n += 1;
            }
        }
        if n == 0 {
            return init;
        }
        let step = [sum[0] / n as f64, sum[1] / n as f64];
        d = [d[0] + step[0], d[1] + step[1]];
        if step[0].hypot(step[1]) < 1e-6 {
            break;
        }
    }
    d
}

/// Velocity from registering every matched cluster onto the current one.
fn refine_velocity(matched: &[(f64, &Cluster)], v: [f64; 2]) -> [f64; 2] {
    let current = &matched[0].1.points;
    let track: Vec<(f64, [f64; 2])> = matched
        .iter()
        .map(|(t, k)| {
            let d = if *t == 0.0 { [0.0; 2] } else { register(&k.points, current, [-v[0] * t, -v[1] * t]) };
            (*t, [-d[0], -d[1]])
        })
        .collect();
    fit_velocity(&track)
}

/// Least-squares slope of positions against time.
fn fit_velocity(track: &[(f64, [f64; 2])]) -> [f64; 2] {
    let n = track.len() as f64;
    if track.len() < 2 {
        return [0.0, 0.0];
    }
    let mt = track.iter().map(|p| p.0).sum::<f64>() / n;
    let mut out = [0.0; 2];
    for (d, slot) in out.iter_mut().enumerate() {
        let mx = track.iter().map(|p| p.1[d]).sum::<f64>() / n;
        let num: f64 = track.iter().map(|p| (p.0 - mt) * (p.1[d] - mx)).sum();
        let den: f64 = track.iter().map(|p| (p.0 - mt).powi(2)).sum();
        *slot = num / den;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_sequence, SceneConfig};

    #[test]
    fn velocity_fit_is_exact_on_a_line() {
        let track = vec![(0.0, [1.0, 2.0]), (-0.2, [0.0, 2.2]), (-0.4, [-1.0, 2.4])];
        let v = fit_velocity(&track);
        assert!((v[0] - 5.0).abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn clusters_split_separated_objects() {
        let spec = GridSpec::desk();
        let pts = [[0.1f32, 0.1, 0.0], [0.6, 0.1, 0.0], [5.0, 5.0, 0.0]];
        let cs = clusters(&pts, &spec);
        assert_eq!(cs.len(), 2);
        assert_eq!(cs.iter().map(|c| c.cells.len()).sum::<usize>(), 3);
    }

    #[test]
    fn static_baseline_is_exact_on_static_scenes() {
        let spec = GridSpec::desk();
        let cfg = SceneConfig { stationary_fraction: 1.0, ..SceneConfig::default() };
        let g = generate_sequence(&cfg, &spec).unwrap();
        let ds = Dataset { spec: spec.clone(), samples: vec![crate::dataset::Sample { points: g.points, labels: g.labels }] };
        let r = evaluate_rule(RuleBaseline::Static, &ds, ReportOptions::default()).unwrap();
        let s = r.groups.static_.unwrap();
        assert!(s.mean < 1e-9 && s.median < 1e-9, "{s:?}");
    }
}
