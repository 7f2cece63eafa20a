//! Evaluation metrics: speed-group displacement errors, classification
//! accuracy, generalization index, instance stability and distance buckets.
//!
//! Displacement errors are L2 distances at the final step of the horizon.
//! Groups and buckets that contain no cells are reported as `None`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::PredictionRecord;
use crate::error::{Error, Result};
use crate::grid::{Category, GridSpec, SceneLabels, NUM_CATEGORIES, STATIC_SPEED};

/// Upper bound (inclusive) of the slow group in m/s.
pub const SLOW_SPEED: f64 = 5.0;

/// Distance bucket edges in metres; buckets are `[0, 10)`, `[10, 20)`, `[20, inf)`.
pub const DISTANCE_EDGES: [f64; 2] = [10.0, 20.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SpeedGroup {
    Static,
    Slow,
    Fast,
}

impl SpeedGroup {
    pub const ALL: [SpeedGroup; 3] = [SpeedGroup::Static, SpeedGroup::Slow, SpeedGroup::Fast];

    pub fn of_speed(speed: f64) -> Self {
        if speed <= STATIC_SPEED {
            SpeedGroup::Static
        } else if speed <= SLOW_SPEED {
            SpeedGroup::Slow
        } else {
            SpeedGroup::Fast
        }
    }

    /// Group of a cell from its final-step displacement over `horizon` seconds.
    pub fn of_displacement(d: [f32; 2], horizon: f64) -> Self {
        let (x, y) = (d[0] as f64, d[1] as f64);
        Self::of_speed((x * x + y * y).sqrt() / horizon)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            SpeedGroup::Static => "static",
            SpeedGroup::Slow => "slow",
            SpeedGroup::Fast => "fast",
        }
    }
}

/// Distance bucket index of a point at `distance` metres from the origin.
pub fn distance_bucket(distance: f64) -> usize {
    DISTANCE_EDGES.iter().filter(|&&e| distance >= e).count()
}

pub fn bucket_label(bucket: usize) -> &'static str {
    ["0-10m", "10-20m", "20m+"][bucket]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

impl ErrorStats {
    /// `None` for an empty slice. Sorts its input.
    pub fn from_errors(errors: &mut [f64]) -> Option<Self> {
        if errors.is_empty() {
            return None;
        }
        errors.sort_by(f64::total_cmp);
        let n = errors.len();
        let median = if n % 2 == 1 { errors[n / 2] } else { 0.5 * (errors[n / 2 - 1] + errors[n / 2]) };
        let mean = errors.iter().sum::<f64>() / n as f64;
        Some(Self { mean, median, count: n })
    }
}

/// Mean/median final-step error per speed group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupErrors {
    pub static_: Option<ErrorStats>,
    pub slow: Option<ErrorStats>,
    pub fast: Option<ErrorStats>,
}

impl GroupErrors {
    pub fn get(&self, g: SpeedGroup) -> Option<ErrorStats> {
        match g {
            SpeedGroup::Static => self.static_,
            SpeedGroup::Slow => self.slow,
            SpeedGroup::Fast => self.fast,
        }
    }

    fn from_buckets(mut errors: [Vec<f64>; 3]) -> Self {
        Self {
            static_: ErrorStats::from_errors(&mut errors[0]),
            slow: ErrorStats::from_errors(&mut errors[1]),
            fast: ErrorStats::from_errors(&mut errors[2]),
        }
    }
}

fn check_pair(pred: &PredictionRecord, labels: &SceneLabels) -> Result<()> {
    let n = labels.cells();
    if pred.motion.len() != labels.motion.len()
        || pred.category_logits.len() != n * NUM_CATEGORIES
        || pred.state_logits.len() != n
    {
        return Err(Error::shape("prediction and labels differ in shape"));
    }
    Ok(())
}

fn check_all(preds: &[PredictionRecord], labels: &[SceneLabels]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} label sets", preds.len(), labels.len())));
    }
    preds.iter().zip(labels).try_for_each(|(p, l)| check_pair(p, l))
}

/// Predicted displacement of `cell` at the final step.
pub fn predicted_final(pred: &PredictionRecord, labels: &SceneLabels, cell: usize) -> [f64; 2] {
    let o = ((labels.steps() - 1) * labels.cells() + cell) * 2;
    [pred.motion[o] as f64, pred.motion[o + 1] as f64]
}

/// L2 error of `cell` at step `step`.
fn cell_error(pred: &PredictionRecord, labels: &SceneLabels, step: usize, cell: usize) -> f64 {
    let o = (step * labels.cells() + cell) * 2;
    let dx = pred.motion[o] as f64 - labels.motion[o] as f64;
    let dy = pred.motion[o + 1] as f64 - labels.motion[o + 1] as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Per-group final-step errors over valid cells accepted by `filter`.
pub fn group_errors_where(
    preds: &[PredictionRecord],
    labels: &[SceneLabels],
    horizon: f64,
    filter: impl Fn(&SceneLabels, usize) -> bool,
) -> Result<GroupErrors> {
    check_all(preds, labels)?;
    let mut buckets: [Vec<f64>; 3] = Default::default();
    for (p, l) in preds.iter().zip(labels) {
        let last = l.steps() - 1;
        for cell in 0..l.cells() {
            if l.valid[cell] == 0 || !filter(l, cell) {
                continue;
            }
            let g = SpeedGroup::of_displacement(l.final_motion(cell), horizon);
            buckets[g.index()].push(cell_error(p, l, last, cell));
        }
    }
    Ok(GroupErrors::from_buckets(buckets))
}

pub fn group_errors(preds: &[PredictionRecord], labels: &[SceneLabels], horizon: f64) -> Result<GroupErrors> {
    group_errors_where(preds, labels, horizon, |_, _| true)
}

/// Mean error per future step over all valid cells.
pub fn per_step_errors(preds: &[PredictionRecord], labels: &[SceneLabels]) -> Result<Vec<Option<f64>>> {
    check_all(preds, labels)?;
    let steps = labels.first().map(|l| l.steps()).unwrap_or(0);
    let mut sums = vec![0.0; steps];
    let mut count = 0usize;
    for (p, l) in preds.iter().zip(labels) {
        for cell in (0..l.cells()).filter(|&c| l.valid[c] != 0) {
            count += 1;
            for (s, sum) in sums.iter_mut().enumerate() {
                *sum += cell_error(p, l, s, cell);
            }
        }
    }
    Ok(sums.into_iter().map(|s| (count > 0).then(|| s / count as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    /// Overall accuracy over valid cells.
    pub oa: Option<f64>,
    /// Mean recall over classes present in the ground truth.
    pub mca: Option<f64>,
    pub per_class: [Option<f64>; NUM_CATEGORIES],
    pub support: [usize; NUM_CATEGORIES],
    /// Accuracy of the moving/static state on valid cells.
    pub state_accuracy: Option<f64>,
}

pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn classification_scores(preds: &[PredictionRecord], labels: &[SceneLabels]) -> Result<ClassScores> {
    check_all(preds, labels)?;
    let mut support = [0usize; NUM_CATEGORIES];
    let mut hits = [0usize; NUM_CATEGORIES];
    let mut state_hits = 0usize;
    for (p, l) in preds.iter().zip(labels) {
        for cell in (0..l.cells()).filter(|&c| l.valid[c] != 0) {
            let truth = l.category[cell] as usize;
            support[truth] += 1;
            if argmax(&p.category_logits[cell * NUM_CATEGORIES..(cell + 1) * NUM_CATEGORIES]) == truth {
                hits[truth] += 1;
            }
            if (p.state_logits[cell] > 0.0) == (l.state[cell] != 0) {
                state_hits += 1;
            }
        }
    }
    let total: usize = support.iter().sum();
    let mut per_class = [None; NUM_CATEGORIES];
    for c in 0..NUM_CATEGORIES {
        if support[c] > 0 {
            per_class[c] = Some(hits[c] as f64 / support[c] as f64);
        }
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ClassScores {
        oa: (total > 0).then(|| hits.iter().sum::<usize>() as f64 / total as f64),
        mca: (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64),
        per_class,
        support,
        state_accuracy: (total > 0).then(|| state_hits as f64 / total as f64),
    })
}

/// Fast-group error of the full-data model over that of the mask-trained
/// model, in percent. Higher is better.
pub fn generalization_index(full_error: f64, masked_error: f64) -> Result<f64> {
    if !(full_error.is_finite() && masked_error.is_finite()) || full_error < 0.0 || masked_error <= 0.0 {
        return Err(Error::Numerical(format!(
            "generalization index undefined for errors {full_error} / {masked_error}"
        )));
    }
    Ok(full_error / masked_error * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    /// Unweighted mean of per-instance variances.
    pub mean_variance: f64,
    pub instances: usize,
}

/// Variance of predicted final-step displacement over each instance's valid
/// cells, averaged over instances. With `category`, only instances of that
/// class count.
pub fn stability(
    preds: &[PredictionRecord],
    labels: &[SceneLabels],
    category: Option<Category>,
) -> Result<Option<StabilityStats>> {
    check_all(preds, labels)?;
    let mut total = 0.0;
    let mut instances = 0usize;
    for (p, l) in preds.iter().zip(labels) {
        let mut members: BTreeMap<i32, Vec<[f64; 2]>> = BTreeMap::new();
        for cell in 0..l.cells() {
            let id = l.instance_id[cell];
            if id <= 0 || l.valid[cell] == 0 {
                continue;
            }
            if category.is_some_and(|c| l.category[cell] as usize != c.index()) {
                continue;
            }
            members.entry(id).or_default().push(predicted_final(p, l, cell));
        }
        for ds in members.values() {
            total += instance_variance(ds);
            instances += 1;
        }
    }
    Ok((instances > 0).then(|| StabilityStats { mean_variance: total / instances as f64, instances }))
}

/// `(1/|D|) sum ||d - mean||^2`.
pub fn instance_variance(ds: &[[f64; 2]]) -> f64 {
    let n = ds.len() as f64;
    let mx = ds.iter().map(|d| d[0]).sum::<f64>() / n;
    let my = ds.iter().map(|d| d[1]).sum::<f64>() / n;
    ds.iter().map(|d| (d[0] - mx).powi(2) + (d[1] - my).powi(2)).sum::<f64>() / n
}

/// Per-group errors split by distance of the cell center from the origin.
pub fn distance_buckets(
    preds: &[PredictionRecord],
    labels: &[SceneLabels],
    spec: &GridSpec,
) -> Result<[GroupErrors; 3]> {
    check_all(preds, labels)?;
    let horizon = spec.horizon_seconds();
    let mut out = [GroupErrors::default(); 3];
    for (b, slot) in out.iter_mut().enumerate() {
        *slot = group_errors_where(preds, labels, horizon, |l, cell| {
            let (x, y) = spec.cell_center(cell / l.width(), cell % l.width());
            distance_bucket((x * x + y * y).sqrt()) == b
        })?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequences: usize,
    pub valid_cells: usize,
    pub groups: GroupErrors,
    pub per_step: Vec<Option<f64>>,
    pub classification: ClassScores,
    /// Over all instances.
    pub stability: Option<StabilityStats>,
    /// Restricted to one category, when requested.
    pub stability_category: Option<(Category, Option<StabilityStats>)>,
    pub distance: [GroupErrors; 3],
    /// Per-group errors on cells of one category, when requested (used by the
    /// generalization protocol).
    pub category_groups: Option<(Category, GroupErrors)>,
    pub generalization_index: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Category for the restricted stability and per-group error entries.
    pub focus: Option<Category>,
}

pub fn evaluate_predictions(
    preds: &[PredictionRecord],
    labels: &[SceneLabels],
    spec: &GridSpec,
    opts: ReportOptions,
) -> Result<MetricReport> {
    let horizon = spec.horizon_seconds();
    let category_groups = match opts.focus {
        Some(c) => Some((c, group_errors_where(preds, labels, horizon, |l, cell| l.category[cell] as usize == c.index())?)),
        None => None,
    };
    let stability_category = match opts.focus {
        Some(c) => Some((c, stability(preds, labels, Some(c))?)),
        None => None,
    };
    Ok(MetricReport {
        sequences: labels.len(),
        valid_cells: labels.iter().map(SceneLabels::valid_count).sum(),
        groups: group_errors(preds, labels, horizon)?,
        per_step: per_step_errors(preds, labels)?,
        classification: classification_scores(preds, labels)?,
        stability: stability(preds, labels, None)?,
        stability_category,
        distance: distance_buckets(preds, labels, spec)?,
        category_groups,
        generalization_index: None,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn group_row(out: &mut String, label: &str, g: &GroupErrors) {
    let _ = write!(out, "{label:<14}");
    for grp in SpeedGroup::ALL {
        let s = g.get(grp);
        let _ = write!(out, " {:>9} {:>9}", fmt_opt(s.map(|s| s.mean)), fmt_opt(s.map(|s| s.median)));
    }
    out.push('\n');
}

impl MetricReport {
    /// Human-readable tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "sequences {}  valid cells {}", self.sequences, self.valid_cells);
        let _ = writeln!(
            out,
            "{:<14} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "", "static", "", "slow", "", "fast", ""
        );
        let _ = writeln!(
            out,
            "{:<14} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "", "mean", "median", "mean", "median", "mean", "median"
        );
        group_row(&mut out, "all", &self.groups);
        for (b, g) in self.distance.iter().enumerate() {
            group_row(&mut out, bucket_label(b), g);
        }
        if let Some((c, g)) = &self.category_groups {
            group_row(&mut out, c.label(), g);
        }
        let cls = &self.classification;
        let _ = writeln!(out, "OA {}  MCA {}  state acc {}", fmt_opt(cls.oa), fmt_opt(cls.mca), fmt_opt(cls.state_accuracy));
        for c in Category::ALL {
            let _ = write!(out, "{} {}  ", c.label(), fmt_opt(cls.per_class[c.index()]));
        }
        out.push('\n');
        let _ = writeln!(out, "stability {}", fmt_opt(self.stability.map(|s| s.mean_variance)));
        if let Some((c, s)) = &self.stability_category {
            let _ = writeln!(out, "stability ({}) {}", c.label(), fmt_opt(s.map(|s| s.mean_variance)));
        }
        if let Some(gi) = self.generalization_index {
            let _ = writeln!(out, "GI {gi:.1}%");
        }
        let steps: Vec<String> = self.per_step.iter().map(|v| fmt_opt(*v)).collect();
        let _ = writeln!(out, "per-step mean error {}", steps.join(" "));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(labels: &SceneLabels) -> PredictionRecord {
        PredictionRecord {
            motion: vec![0.0; labels.motion.len()],
            category_logits: vec![0.0; labels.cells() * NUM_CATEGORIES],
            state_logits: vec![0.0; labels.cells()],
        }
    }

    fn set_final(p: &mut PredictionRecord, l: &SceneLabels, cell: usize, d: [f32; 2]) {
        let o = ((l.steps() - 1) * l.cells() + cell) * 2;
        p.motion[o] = d[0];
        p.motion[o + 1] = d[1];
    }

    #[test]
    fn speed_group_thresholds() {
        assert_eq!(SpeedGroup::of_speed(0.0), SpeedGroup::Static);
        assert_eq!(SpeedGroup::of_speed(0.2), SpeedGroup::Static);
        assert_eq!(SpeedGroup::of_speed(0.2000001), SpeedGroup::Slow);
        assert_eq!(SpeedGroup::of_speed(5.0), SpeedGroup::Slow);
        assert_eq!(SpeedGroup::of_speed(5.0001), SpeedGroup::Fast);
        assert_eq!(SpeedGroup::of_displacement([3.0, 4.0], 1.0), SpeedGroup::Slow);
    }

    #[test]
    fn static_cell_error_is_hypotenuse() {
        let mut l = SceneLabels::empty(5, 4, 4);
        l.valid[5] = 1;
        let mut p = record(&l);
        set_final(&mut p, &l, 5, [0.3, 0.4]);
        let g = group_errors(&[p], &[l], 1.0).unwrap();
        let s = g.static_.unwrap();
        assert!((s.mean - 0.5).abs() < 1e-7);
        assert_eq!(s.count, 1);
        assert!(g.slow.is_none() && g.fast.is_none());
    }

    #[test]
    fn perfect_prediction_scores() {
        let mut l = SceneLabels::empty(2, 3, 3);
        for c in 0..9 {
            l.valid[c] = 1;
            l.category[c] = (c % 3) as u8;
        }
        l.motion[(9 + 4) * 2] = 6.0;
        let mut p = record(&l);
        p.motion.clone_from(&l.motion);
        for c in 0..9 {
            p.category_logits[c * NUM_CATEGORIES + c % 3] = 5.0;
            p.state_logits[c] = -1.0;
        }
        let g = group_errors(&[p.clone()], &[l.clone()], 1.0).unwrap();
        for grp in [g.static_, g.fast] {
            let s = grp.unwrap();
            assert_eq!((s.mean, s.median), (0.0, 0.0));
        }
        let c = classification_scores(&[p], &[l]).unwrap();
        assert_eq!((c.oa, c.mca), (Some(1.0), Some(1.0)));
        assert_eq!(c.per_class[3], None);
    }

    #[test]
    fn oa_and_mca_arithmetic() {
        let mut l = SceneLabels::empty(1, 10, 10);
        for c in 0..100 {
            l.valid[c] = 1;
            l.category[c] = if c < 90 { 1 } else { 2 };
        }
        let mut p = record(&l);
        for c in 0..100 {
            let guess = if c < 95 { 1 } else { 2 };
            p.category_logits[c * NUM_CATEGORIES + guess] = 1.0;
        }
        let s = classification_scores(&[p], &[l]).unwrap();
        assert!((s.oa.unwrap() - 0.95).abs() < 1e-12);
        assert!((s.mca.unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn generalization_index_values() {
        assert!((generalization_index(0.2579, 0.3159).unwrap() - 81.6).abs() < 0.1);
        assert!((generalization_index(0.1969, 0.2278).unwrap() - 86.4).abs() < 0.1);
        assert_eq!(generalization_index(0.3, 0.3).unwrap(), 100.0);
        assert!(generalization_index(0.3, 0.0).is_err());
    }

    #[test]
    fn stability_cases() {
        let mut l = SceneLabels::empty(1, 2, 2);
        for c in 0..3 {
            l.valid[c] = 1;
            l.category[c] = 1;
        }
        l.instance_id[0] = 1;
        l.instance_id[1] = 1;
        l.instance_id[2] = 2;
        let mut p = record(&l);
        set_final(&mut p, &l, 0, [1.0, 0.0]);
        set_final(&mut p, &l, 1, [0.0, 1.0]);
        set_final(&mut p, &l, 2, [4.0, 4.0]);
        let s = stability(&[p.clone()], &[l.clone()], None).unwrap().unwrap();
        assert_eq!(s.instances, 2);
        assert!((s.mean_variance - 0.25).abs() < 1e-12);
        assert_eq!(instance_variance(&[[1.0, 0.0], [0.0, 1.0]]), 0.5);
        assert_eq!(instance_variance(&[[3.0, 2.0]]), 0.0);
        assert!(stability(&[p], &[l], Some(Category::Bike)).unwrap().is_none());
    }

    #[test]
    fn distance_bucket_boundaries() {
        assert_eq!(distance_bucket((36.0f64 + 64.0).sqrt()), 1);
        assert_eq!(distance_bucket(9.999), 0);
        assert_eq!(distance_bucket(20.0), 2);
    }

    #[test]
    fn buckets_partition_valid_cells() {
        let spec = GridSpec::desk();
        let mut l = SceneLabels::empty(5, 64, 64);
        for c in (0..64 * 64).step_by(7) {
            l.valid[c] = 1;
        }
        let p = record(&l);
        let b = distance_buckets(&[p], &[l.clone()], &spec).unwrap();
        let total: usize = b.iter().map(|g| g.static_.map_or(0, |s| s.count)).sum();
        assert_eq!(total, l.valid_count());
    }

    #[test]
    fn empty_report_renders() {
        let spec = GridSpec::desk();
        let l = SceneLabels::empty(5, 64, 64);
        let r = evaluate_predictions(&[record(&l)], &[l], &spec, ReportOptions::default()).unwrap();
        assert!(r.groups.static_.is_none());
        assert!(r.to_text().contains("OA -"));
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
