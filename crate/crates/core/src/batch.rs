//! Conversion of samples into model-ready tensors.

use candle_core::{DType, Device, Tensor};

use crate::backbone::grids_to_tensor;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::grid::{voxelize_sequence, GridSpec, SceneLabels, NUM_CATEGORIES};
use crate::metrics::SpeedGroup;

/// Ground truth of a batch in tensor form.
#[derive(Debug, Clone)]
pub struct LabelBatch {
    /// `(B, T, 2, H, W)`.
    pub motion: Tensor,
    /// `(B, H, W)` u32 class indices.
    pub category: Tensor,
    /// `(B, N_C, H, W)`.
    pub category_onehot: Tensor,
    /// `(B, 1, H, W)` in {0, 1}.
    pub state: Tensor,
    /// `(B, 1, H, W)` in {0, 1}.
    pub valid: Tensor,
    /// Speed group of every cell (`None` for invalid cells), `B * H * W`.
    pub groups: Vec<Option<SpeedGroup>>,
    pub labels: Vec<SceneLabels>,
}

impl LabelBatch {
    pub fn new(labels: &[&SceneLabels], spec: &GridSpec, dtype: DType) -> Result<Self> {
        let (t, h, w) = (spec.output_steps(), spec.height(), spec.width());
        let n = h * w;
        let b = labels.len();
        let dev = Device::Cpu;
        let mut motion = Vec::with_capacity(b * t * 2 * n);
        let mut category = Vec::with_capacity(b * n);
        let mut onehot = vec![0f32; b * NUM_CATEGORIES * n];
        let mut state = Vec::with_capacity(b * n);
        let mut valid = Vec::with_capacity(b * n);
        let mut groups = Vec::with_capacity(b * n);
        let horizon = spec.horizon_seconds();
        for (bi, l) in labels.iter().enumerate() {
            if (l.steps(), l.height(), l.width()) != (t, h, w) {
                return Err(Error::shape("labels do not match the grid spec"));
            }
            for step in 0..t {
                for d in 0..2 {
                    for cell in 0..n {
                        motion.push(l.motion_at(step, cell)[d]);
                    }
                }
            }
            for cell in 0..n {
                let c = l.category[cell] as usize;
                category.push(c as u32);
                onehot[(bi * NUM_CATEGORIES + c) * n + cell] = 1.0;
                state.push(l.state[cell] as f32);
                valid.push(l.valid[cell] as f32);
                groups.push((l.valid[cell] != 0).then(|| SpeedGroup::of_displacement(l.final_motion(cell), horizon)));
            }
        }
        Ok(Self {
            motion: Tensor::from_vec(motion, (b, t, 2, h, w), &dev)?.to_dtype(dtype)?,
            category: Tensor::from_vec(category, (b, h, w), &dev)?,
            category_onehot: Tensor::from_vec(onehot, (b, NUM_CATEGORIES, h, w), &dev)?.to_dtype(dtype)?,
            state: Tensor::from_vec(state, (b, 1, h, w), &dev)?.to_dtype(dtype)?,
            valid: Tensor::from_vec(valid, (b, 1, h, w), &dev)?.to_dtype(dtype)?,
            groups,
            labels: labels.iter().map(|l| (*l).clone()).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

/// Occupancy input plus labels for a set of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, T_in, C, H, W)`.
    pub grids: Tensor,
    pub labels: LabelBatch,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], spec: &GridSpec, dtype: DType) -> Result<Self> {
        let grids: Vec<_> = samples.iter().map(|s| voxelize_sequence(&s.points, spec)).collect();
        let refs: Vec<&[_]> = grids.iter().map(Vec::as_slice).collect();
        let labels: Vec<&SceneLabels> = samples.iter().map(|s| &s.labels).collect();
        Ok(Self {
            grids: grids_to_tensor(&refs, spec, dtype)?,
            labels: LabelBatch::new(&labels, spec, dtype)?,
        })
    }
}
