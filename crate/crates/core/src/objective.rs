//! Multi-task training loss: motion regression, state, category and the KL
//! consistency between the feature-conditioned and prior-conditioned latents.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::batch::LabelBatch;
use crate::error::{Error, Result};
use crate::metrics::SpeedGroup;

/// Bounds of the per-group reweighting factor.
pub const GROUP_WEIGHT_RANGE: (f64, f64) = (0.1, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub motion: f64,
    pub state: f64,
    pub category: f64,
    pub pattern: f64,
    /// Fraction of all training steps over which the pattern weight ramps
    /// linearly from 0 to its full value.
    pub kl_warmup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { motion: 1.0, state: 1.0, category: 1.0, pattern: 0.1, kl_warmup: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.motion, self.state, self.category, self.pattern, self.kl_warmup];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if self.kl_warmup > 1.0 {
            return Err(Error::config("loss.kl_warmup is a fraction of training and must be <= 1"));
        }
        Ok(())
    }

    /// Pattern weight after warm-up at `step` (0-based) of `total_steps`.
    pub fn pattern_at(&self, step: usize, total_steps: usize) -> f64 {
        let ramp = self.kl_warmup * total_steps as f64;
        if ramp <= 0.0 {
            return self.pattern;
        }
        self.pattern * ((step + 1) as f64 / ramp).min(1.0)
    }
}

/// One scalar loss term with its bookkeeping.
#[derive(Debug, Clone)]
pub struct LossTerm {
    /// Scalar tensor.
    pub value: Tensor,
    /// Set when the valid mask was empty and the term is a constant zero.
    pub no_supervision: bool,
}

#[derive(Debug, Clone)]
pub struct MotionLoss {
    pub term: LossTerm,
    /// Unweighted mean smooth-L1 per speed group; `None` for absent groups.
    pub by_group: [Option<f64>; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub motion: f64,
    pub state: f64,
    pub category: f64,
    pub pattern: f64,
    /// Pattern weight used for this step (after warm-up).
    pub pattern_weight: f64,
    pub motion_by_group: [Option<f64>; 3],
    pub no_supervision: bool,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn zero_like(t: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), t.dtype(), t.device())?)
}

/// Elementwise smooth-L1 with threshold 1.
pub fn smooth_l1(diff: &Tensor) -> Result<Tensor> {
    let a = diff.abs()?;
    let quad = (a.sqr()? * 0.5)?;
    let lin = (&a - 0.5)?;
    let below = a.lt(1.0)?;
    Ok(below.where_cond(&quad, &lin)?)
}

/// Per-cell weights from speed-group frequency: `N / (G * n_g)` clamped to
/// the configured range, zero on invalid cells. `N` counts valid cells, `G`
/// non-empty groups.
pub fn group_weights(groups: &[Option<SpeedGroup>]) -> Vec<f64> {
    let mut counts = [0usize; 3];
    for g in groups.iter().flatten() {
        counts[g.index()] += 1;
    }
    let n: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count();
    let (lo, hi) = GROUP_WEIGHT_RANGE;
    groups
        .iter()
        .map(|g| match g {
            Some(g) => (n as f64 / (present as f64 * counts[g.index()] as f64)).clamp(lo, hi),
            None => 0.0,
        })
        .collect()
}

/// Smooth-L1 over x/y summed, averaged over valid cells and all steps with
/// speed-group reweighting. `pred` is `(B, T, 2, H, W)`.
pub fn motion_loss(pred: &Tensor, labels: &LabelBatch) -> Result<MotionLoss> {
    if pred.dims() != labels.motion.dims() {
        return Err(Error::shape(format!("motion prediction {:?} vs labels {:?}", pred.dims(), labels.motion.dims())));
    }
    let (b, t, _, h, w) = pred.dims5()?;
    let weights = group_weights(&labels.groups);
    let denom: f64 = weights.iter().sum::<f64>() * t as f64;
    // (B, T, H, W) per-cell loss
    let per_cell = smooth_l1(&(pred - &labels.motion)?)?.sum(2)?;
    let mut by_group = [None; 3];
    if denom > 0.0 {
        let detached: Vec<f64> = per_cell.to_dtype(DType::F64)?.mean(1)?.flatten_all()?.to_vec1()?;
        let mut sums = [(0.0, 0usize); 3];
        for (v, g) in detached.iter().zip(&labels.groups) {
            if let Some(g) = g {
                sums[g.index()].0 += v;
                sums[g.index()].1 += 1;
            }
        }
        for (slot, (s, n)) in by_group.iter_mut().zip(sums) {
            *slot = (n > 0).then(|| s / n as f64);
        }
    } else {
        return Ok(MotionLoss { term: LossTerm { value: zero_like(pred)?, no_supervision: true }, by_group });
    }
    let wt = Tensor::from_vec(weights, (b, 1, h, w), pred.device())?.to_dtype(pred.dtype())?;
    let value = (per_cell.broadcast_mul(&wt)?.sum_all()? / denom)?;
    Ok(MotionLoss { term: LossTerm { value, no_supervision: false }, by_group })
}

fn masked_mean(per_cell: &Tensor, valid: &Tensor) -> Result<LossTerm> {
    let n = scalar(&valid.sum_all()?)?;
    if n == 0.0 {
        return Ok(LossTerm { value: zero_like(per_cell)?, no_supervision: true });
    }
    Ok(LossTerm { value: ((per_cell * valid)?.sum_all()? / n)?, no_supervision: false })
}

/// Binary cross-entropy with logits over valid cells. `logits` is `(B, 1, H, W)`.
pub fn state_loss(logits: &Tensor, labels: &LabelBatch) -> Result<LossTerm> {
    if logits.dims() != labels.state.dims() {
        return Err(Error::shape("state logits do not match labels"));
    }
    // max(x, 0) - x*y + log(1 + exp(-|x|))
    let per_cell = ((logits.relu()? - (logits * &labels.state)?)? + logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?;
    masked_mean(&per_cell, &labels.valid)
}

/// Categorical cross-entropy over valid cells. `logits` is `(B, N_C, H, W)`.
pub fn category_loss(logits: &Tensor, labels: &LabelBatch) -> Result<LossTerm> {
    if logits.dims() != labels.category_onehot.dims() {
        return Err(Error::shape("category logits do not match labels"));
    }
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let picked = logp.gather(&labels.category.unsqueeze(1)?, 1)?.neg()?;
    masked_mean(&picked, &labels.valid)
}

/// Closed-form `KL(N(mu1, var1) || N(mu2, var2))` per element from means and
/// log-variances.
pub fn gaussian_kl(mu1: &Tensor, lv1: &Tensor, mu2: &Tensor, lv2: &Tensor) -> Result<Tensor> {
    let term1 = ((lv2 - lv1)? * 0.5)?;
    let num = (lv1.exp()? + (mu1 - mu2)?.sqr()?)?;
    let term2 = (num / (lv2.exp()? * 2.0)?)?;
    Ok(((term1 + term2)? - 0.5)?)
}

/// Mean KL from the feature-conditioned latent to the prior-conditioned one.
pub fn pattern_loss(posterior: &crate::latent::LatentField, prior: &crate::latent::LatentField) -> Result<Tensor> {
    if posterior.mean.dims() != prior.mean.dims() {
        return Err(Error::shape("latent shapes differ"));
    }
    Ok(gaussian_kl(&posterior.mean, &posterior.log_var, &prior.mean, &prior.log_var)?.mean_all()?)
}

/// Scalar loss terms prior to weighting.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub motion: MotionLoss,
    pub state: LossTerm,
    pub category: LossTerm,
    /// Absent when no latent is compared against a prior.
    pub pattern: Option<Tensor>,
}

/// Weighted sum of the parts. `pattern_weight` overrides `weights.pattern`
/// (used for warm-up).
pub fn total_loss(parts: &LossParts, weights: &LossWeights, pattern_weight: f64) -> Result<(Tensor, LossReport)> {
    let mut total = ((&parts.motion.term.value * weights.motion)?
        + (&parts.state.value * weights.state)?
        + (&parts.category.value * weights.category)?)?;
    let mut pattern = 0.0;
    if let Some(p) = &parts.pattern {
        total = (total + (p * pattern_weight)?)?;
        pattern = scalar(p)?;
    }
    let mut report = LossReport::combine(
        scalar(&parts.motion.term.value)?,
        scalar(&parts.state.value)?,
        scalar(&parts.category.value)?,
        pattern,
        weights,
        pattern_weight,
    );
    report.motion_by_group = parts.motion.by_group;
    report.no_supervision = parts.motion.term.no_supervision || parts.state.no_supervision || parts.category.no_supervision;
    Ok((total, report))
}

impl LossReport {
    pub fn combine(motion: f64, state: f64, category: f64, pattern: f64, weights: &LossWeights, pattern_weight: f64) -> Self {
        Self {
            total: weights.motion * motion + weights.state * state + weights.category * category + pattern_weight * pattern,
            motion,
            state,
            category,
            pattern,
            pattern_weight,
            motion_by_group: [None; 3],
            no_supervision: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.motion, self.state, self.category, self.pattern].iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSpec, SceneLabels};
    use crate::latent::{LatentField, LatentSource};
    use candle_core::Device;

    fn spec() -> GridSpec {
        GridSpec::new([-2.0, 2.0], [-2.0, 2.0], [-3.0, 2.0], 0.5, 0.4, 0.2, 5, 5).unwrap()
    }

    fn one_cell_labels() -> LabelBatch {
        let mut l = SceneLabels::empty(5, 8, 8);
        l.valid[10] = 1;
        l.category[10] = 1;
        LabelBatch::new(&[&l], &spec(), DType::F64).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn smooth_l1_closed_form() {
        let lb = one_cell_labels();
        let mut data = vec![0f64; 5 * 2 * 64];
        for t in 0..5 {
            data[(t * 2) * 64 + 10] = 0.5;
        }
        let pred = Tensor::from_vec(data, (1, 5, 2, 8, 8), &Device::Cpu).unwrap();
        let m = motion_loss(&pred, &lb).unwrap();
        assert!((val(&m.term.value) - 0.125).abs() < 1e-12);
        assert!(!m.term.no_supervision);
        assert!(val(&motion_loss(&lb.motion, &lb).unwrap().term.value).abs() < 1e-15);
        let big = smooth_l1(&Tensor::new(&[3.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(big.to_vec1::<f64>().unwrap(), vec![2.5, 1.5]);
    }

    #[test]
    fn empty_mask_gives_zero_and_flag() {
        let lb = LabelBatch::new(&[&SceneLabels::empty(5, 8, 8)], &spec(), DType::F64).unwrap();
        let pred = (lb.motion.ones_like().unwrap() * 3.0).unwrap();
        let m = motion_loss(&pred, &lb).unwrap();
        assert!(m.term.no_supervision);
        assert_eq!(val(&m.term.value), 0.0);
        let s = state_loss(&lb.state.ones_like().unwrap(), &lb).unwrap();
        assert!(s.no_supervision && val(&s.value) == 0.0);
        let c = category_loss(&lb.category_onehot, &lb).unwrap();
        assert!(c.no_supervision && val(&c.value) == 0.0);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let lb = one_cell_labels();
        let uniform = lb.category_onehot.zeros_like().unwrap();
        assert!((val(&category_loss(&uniform, &lb).unwrap().value) - 5f64.ln()).abs() < 1e-12);
        let confident = ((&lb.category_onehot * 40.0).unwrap() - 20.0).unwrap();
        assert!(val(&category_loss(&confident, &lb).unwrap().value) < 1e-3);
        let state_logits = (lb.state.ones_like().unwrap() * -20.0).unwrap();
        assert!(val(&state_loss(&state_logits, &lb).unwrap().value) < 1e-3);
        let zero = lb.state.zeros_like().unwrap();
        assert!((val(&state_loss(&zero, &lb).unwrap().value) - 2f64.ln()).abs() < 1e-12);
    }

    fn field(mu: f64, lv: f64) -> LatentField {
        let dev = Device::Cpu;
        let m = Tensor::full(mu, (1, 2, 2, 2), &dev).unwrap();
        let l = Tensor::full(lv, (1, 2, 2, 2), &dev).unwrap();
        LatentField::deterministic(m, l, LatentSource::Posterior)
    }

    #[test]
    fn kl_closed_forms() {
        assert!(val(&pattern_loss(&field(0.3, -0.7), &field(0.3, -0.7)).unwrap()).abs() < 1e-12);
        assert!((val(&pattern_loss(&field(1.0, 0.0), &field(0.0, 0.0)).unwrap()) - 0.5).abs() < 1e-12);
        let expected = 0.5f64.ln() + 2.0 - 0.5;
        let got = val(&pattern_loss(&field(0.0, 4f64.ln()), &field(0.0, 0.0)).unwrap());
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn total_loss_arithmetic() {
        let r = LossReport::combine(0.5, 0.2, 0.3, 1.0, &LossWeights::default(), 0.1);
        assert!((r.total - 1.1).abs() < 1e-12);
        assert_eq!(LossReport::combine(0.0, 0.0, 0.0, 0.0, &LossWeights::default(), 0.1).total, 0.0);
        let r = LossReport::combine(0.5, 0.2, 0.3, 7.0, &LossWeights::default(), 0.0);
        assert!((r.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_ramp() {
        let w = LossWeights::default();
        assert!((w.pattern_at(0, 100) - 0.01).abs() < 1e-12);
        assert!((w.pattern_at(9, 100) - 0.1).abs() < 1e-12);
        assert_eq!(w.pattern_at(50, 100), 0.1);
        let none = LossWeights { kl_warmup: 0.0, ..w };
        assert_eq!(none.pattern_at(0, 100), 0.1);
    }

    #[test]
    fn group_weights_balance() {
        use SpeedGroup::*;
        let g = vec![Some(Static), Some(Static), Some(Static), Some(Fast), None];
        let w = group_weights(&g);
        assert!((w[0] - 4.0 / 6.0).abs() < 1e-12);
        assert!((w[3] - 2.0).abs() < 1e-12);
        assert_eq!(w[4], 0.0);
        let mut many = vec![Some(Static); 1000];
        many.push(Some(Fast));
        assert_eq!(group_weights(&many)[1000], 10.0);
    }
}
