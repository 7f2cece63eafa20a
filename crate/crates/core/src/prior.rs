//! Label-conditioned pattern extractor.
//!
//! Builds a prior feature map from ground-truth motion, category and state
//! maps plus per-instance motion tracks. It runs only at training time: the
//! output conditions the prior latent that the KL consistency term pulls the
//! feature-conditioned latent toward.
//!
//! Grid path: a local branch (3D conv over the motion sequence, 2D conv over
//! category/state) and a global branch (temporal then spatial self-attention on
//! a downsampled grid) merged by a per-channel sigmoid gate.
//! Instance path: sampled cells, one-hot class and mean motion per instance fed
//! through an LSTM; grid queries cross-attend to the resulting tokens.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{LSTMConfig, VarBuilder, LSTM, RNN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::LabelBatch;
use crate::error::{Error, Result};
use crate::grid::{SceneLabels, NUM_CATEGORIES};
use crate::nn::{
    downsample_avg, fnv1a, from_tokens, resize_bilinear, to_tokens, AttentionBlock, Conv2d, Conv3d, Linear,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Spatial downsampling of the global branch.
    pub downsample: usize,
    /// Attention embedding width.
    pub embed: usize,
    /// Output channels of the 3D conv in the local motion branch.
    pub local_motion_channels: usize,
    /// Maximum number of instance tokens per scene.
    pub max_instances: usize,
    /// Cells sampled per instance.
    pub cells_per_instance: usize,
    pub token_dim: usize,
    /// Channels of the prior feature map.
    pub out_channels: usize,
    /// Sinusoidal position encoding in the spatial attention.
    pub position_encoding: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            downsample: 4,
            embed: 32,
            local_motion_channels: 8,
            max_instances: 32,
            cells_per_instance: 8,
            token_dim: 32,
            out_channels: 32,
            position_encoding: true,
        }
    }
}

/// Grid-level prior: local and global features, gate and their mix.
#[derive(Debug, Clone)]
pub struct GridPrior {
    pub local_motion: Tensor,
    pub local_cls_state: Tensor,
    pub local: Tensor,
    pub global: Tensor,
    /// `(B, C')` gate in (0, 1).
    pub rho: Tensor,
    pub fused: Tensor,
}

/// Per-instance input rows and recurrent tokens.
#[derive(Debug, Clone)]
pub struct InstanceTokens {
    /// `(B, N_ins, N*d_pos + N_C + T*d_M)`.
    pub rows: Tensor,
    /// `(B, N_ins, D_tok)`.
    pub tokens: Tensor,
    /// Validity per row, `B x N_ins`.
    pub valid: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct PriorFeature {
    /// `(B, C'', H, W)`.
    pub values: Tensor,
    pub grid: GridPrior,
    pub instances: InstanceTokens,
    /// Per batch item, `(H*W, n_valid)` attention weights; `None` when the
    /// scene had no instances and the null embedding was used.
    pub attention: Vec<Option<Tensor>>,
}

/// Width of one instance row: positions, one-hot class and flattened motion.
pub fn instance_row_width(cells_per_instance: usize, steps: usize) -> usize {
    cells_per_instance * 2 + NUM_CATEGORIES + steps * 2
}

/// Convex per-channel mix `rho * global + (1 - rho) * local`; `rho` is `(B, C)`.
pub fn gated_mix(global: &Tensor, local: &Tensor, rho: &Tensor) -> Result<Tensor> {
    let (b, c) = rho.dims2()?;
    let rho = rho.reshape((b, c, 1, 1))?;
    let one_minus = rho.affine(-1.0, 1.0)?;
    Ok((global.broadcast_mul(&rho)? + local.broadcast_mul(&one_minus)?)?)
}

/// 2D sinusoidal position encoding, `(h*w, dim)`.
fn position_encoding(h: usize, w: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let quarter = (dim / 4).max(1);
    let mut data = vec![0f32; h * w * dim];
    for i in 0..h {
        for j in 0..w {
            let row = &mut data[(i * w + j) * dim..(i * w + j + 1) * dim];
            for f in 0..quarter {
                let freq = 1.0 / 100f32.powf(f as f32 / quarter as f32);
                let slots = [(i as f32 * freq).sin(), (i as f32 * freq).cos(), (j as f32 * freq).sin(), (j as f32 * freq).cos()];
                for (s, v) in slots.iter().enumerate() {
                    if let Some(x) = row.get_mut(s * quarter + f) {
                        *x = *v;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (h * w, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

pub struct LocalBranch {
    motion_conv: Conv3d,
    motion_proj: Conv2d,
    cls_state_conv: Conv2d,
    combine: Conv2d,
}

impl LocalBranch {
    fn new(cfg: &PriorConfig, steps: usize, out: usize, vb: VarBuilder) -> Result<Self> {
        let m = cfg.local_motion_channels;
        Ok(Self {
            motion_conv: Conv3d::new(2, m, (3, 3), vb.pp("motion_conv"))?,
            motion_proj: Conv2d::new(m * steps, out, 1, 1, vb.pp("motion_proj"))?,
            cls_state_conv: Conv2d::new(NUM_CATEGORIES + 1, out, 3, 1, vb.pp("cls_state_conv"))?,
            combine: Conv2d::new(2 * out, out, 1, 1, vb.pp("combine"))?,
        })
    }

    /// `motion: (B, T, 2, H, W)`, `category: (B, N_C, H, W)`, `state: (B, 1, H, W)`.
    /// Returns the motion, category/state and combined local features.
    pub fn forward(&self, motion: &Tensor, category: &Tensor, state: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, t, two, h, w) = motion.dims5()?;
        if two != 2 || category.dims4()? != (b, NUM_CATEGORIES, h, w) || state.dims4()? != (b, 1, h, w) {
            return Err(Error::shape("local branch inputs disagree in shape"));
        }
        // T is the depth axis of the 3D convolution.
        let x = motion.permute((0, 2, 1, 3, 4))?.contiguous()?;
        let fm = self.motion_conv.forward(&x)?.relu()?;
        let m = fm.dim(1)?;
        let fm = self.motion_proj.forward(&fm.reshape((b, m * t, h, w))?)?;
        let fcs = self.cls_state_conv.forward(&Tensor::cat(&[category, state], 1)?)?;
        let local = self.combine.forward(&Tensor::cat(&[&fm, &fcs], 1)?.relu()?)?;
        Ok((fm, fcs, local))
    }
}

/// Temporal self-attention applied independently at each location.
pub struct TemporalAttention {
    embed: Linear,
    step_embedding: Tensor,
    attn: AttentionBlock,
}

impl TemporalAttention {
    fn new(steps: usize, embed: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            embed: Linear::new(2, embed, vb.pp("embed"))?,
            step_embedding: vb.get_with_hints((steps, embed), "step_embedding", candle_nn::Init::Randn { mean: 0.0, stdev: 0.02 })?,
            attn: AttentionBlock::new(embed, embed, embed, embed, vb.pp("attn"))?,
        })
    }

    /// `(N, T, 2)` sequences -> `(N, E)` pooled features and `(N, T, T)` weights.
    pub fn forward(&self, seq: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = seq.dim(1)?;
        let x = self.embed.forward(seq)?.broadcast_add(&self.step_embedding.narrow(0, 0, t)?)?;
        let (a, w) = self.attn.forward(&x, &x, None)?;
        Ok(((x + a)?.mean(1)?, w))
    }
}

/// Spatial self-attention over downsampled grid tokens.
pub struct SpatialAttention {
    input: Linear,
    attn: AttentionBlock,
    output: Linear,
}

impl SpatialAttention {
    fn new(in_dim: usize, embed: usize, out: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            input: Linear::new(in_dim, embed, vb.pp("input"))?,
            attn: AttentionBlock::new(embed, embed, embed, embed, vb.pp("attn"))?,
            output: Linear::new(embed, out, vb.pp("output"))?,
        })
    }

    /// `(B, N, in_dim)` tokens, optional `(N, E)` position encoding.
    pub fn forward_tokens(&self, tokens: &Tensor, pos: Option<&Tensor>) -> Result<Tensor> {
        let mut x = self.input.forward(tokens)?;
        if let Some(p) = pos {
            x = x.broadcast_add(p)?;
        }
        let (a, _) = self.attn.forward(&x, &x, None)?;
        Ok(self.output.forward(&(x + a)?.relu()?)?)
    }
}

pub struct GlobalBranch {
    tsa: TemporalAttention,
    ssa: SpatialAttention,
    downsample: usize,
    embed: usize,
    position_encoding: bool,
}

impl GlobalBranch {
    fn new(cfg: &PriorConfig, steps: usize, out: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            tsa: TemporalAttention::new(steps, cfg.embed, vb.pp("tsa"))?,
            ssa: SpatialAttention::new(cfg.embed + NUM_CATEGORIES + 1, cfg.embed, out, vb.pp("ssa"))?,
            downsample: cfg.downsample,
            embed: cfg.embed,
            position_encoding: cfg.position_encoding,
        })
    }

    pub fn temporal(&self) -> &TemporalAttention {
        &self.tsa
    }

    pub fn spatial(&self) -> &SpatialAttention {
        &self.ssa
    }

    pub fn forward(&self, motion: &Tensor, category: &Tensor, state: &Tensor) -> Result<Tensor> {
        let (b, t, _, h, w) = motion.dims5()?;
        let f = self.downsample;
        let m = downsample_avg(&motion.reshape((b, t * 2, h, w))?, f)?;
        let (hd, wd) = (h / f, w / f);
        // (B, T*2, h, w) -> (B*h*w, T, 2)
        let seq = m
            .reshape((b, t, 2, hd * wd))?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .reshape((b * hd * wd, t, 2))?;
        let (fm, _) = self.tsa.forward(&seq)?;
        let fm = fm.reshape((b, hd, wd, self.embed))?.permute((0, 3, 1, 2))?.contiguous()?;
        let cat = downsample_avg(category, f)?;
        let st = downsample_avg(state, f)?;
        let tokens = to_tokens(&Tensor::cat(&[&fm, &cat, &st], 1)?)?;
        let pos = if self.position_encoding {
            Some(position_encoding(hd, wd, self.embed, tokens.dtype())?)
        } else {
            None
        };
        let out = self.ssa.forward_tokens(&tokens, pos.as_ref())?;
        resize_bilinear(&from_tokens(&out, hd, wd)?, h, w)
    }
}

/// Instance tokens from ground-truth labels.
pub struct InstanceEncoder {
    lstm: LSTM,
    max_instances: usize,
    cells: usize,
    token_dim: usize,
}

/// Motion fed to the recurrent encoder is scaled by this factor.
const MOTION_INPUT_SCALE: f64 = 0.2;

impl InstanceEncoder {
    fn new(cfg: &PriorConfig, vb: VarBuilder) -> Result<Self> {
        let in_dim = cfg.cells_per_instance * 2 + NUM_CATEGORIES + 2;
        Ok(Self {
            lstm: candle_nn::lstm(in_dim, cfg.token_dim, LSTMConfig::default(), vb.pp("lstm"))?,
            max_instances: cfg.max_instances,
            cells: cfg.cells_per_instance,
            token_dim: cfg.token_dim,
        })
    }

    /// Builds the instance rows of one scene: up to `max_instances` rows, each
    /// `cells` sampled positions in [-1, 1], the one-hot category, and the mean
    /// displacement per future step.
    pub fn rows(&self, labels: &SceneLabels) -> (Vec<Vec<f32>>, usize) {
        let (h, w, t) = (labels.height(), labels.width(), labels.steps());
        let mut members: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for cell in 0..h * w {
            let id = labels.instance_id[cell];
            if id > 0 && labels.valid[cell] != 0 {
                members.entry(id).or_default().push(cell);
            }
        }
        let id_bytes: Vec<u8> = labels.instance_id.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&id_bytes));
        let mut ids: Vec<i32> = members.keys().copied().collect();
        if ids.len() > self.max_instances {
            // Partial Fisher-Yates keeps the draw independent of container order.
            for i in 0..self.max_instances {
                let j = rng.random_range(i..ids.len());
                ids.swap(i, j);
            }
            ids.truncate(self.max_instances);
            ids.sort_unstable();
        }
        let width = instance_row_width(self.cells, t);
        let mut rows = Vec::with_capacity(ids.len());
        for id in &ids {
            let cells = &members[id];
            let mut row = Vec::with_capacity(width);
            for _ in 0..self.cells {
                let cell = cells[rng.random_range(0..cells.len())];
                row.push(((cell / w) as f32 + 0.5) / h as f32 * 2.0 - 1.0);
                row.push(((cell % w) as f32 + 0.5) / w as f32 * 2.0 - 1.0);
            }
            let mut onehot = [0f32; NUM_CATEGORIES];
            onehot[labels.category[cells[0]] as usize] = 1.0;
            row.extend_from_slice(&onehot);
            for step in 0..t {
                let mut mean = [0f64; 2];
                for &c in cells {
                    let m = labels.motion_at(step, c);
                    mean[0] += m[0] as f64;
                    mean[1] += m[1] as f64;
                }
                row.push((mean[0] / cells.len() as f64) as f32);
                row.push((mean[1] / cells.len() as f64) as f32);
            }
            rows.push(row);
        }
        (rows, t)
    }

    pub fn forward(&self, labels: &[SceneLabels], dtype: DType) -> Result<InstanceTokens> {
        let b = labels.len();
        let steps = labels.first().map(|l| l.steps()).unwrap_or(1);
        let width = instance_row_width(self.cells, steps);
        let static_w = self.cells * 2 + NUM_CATEGORIES;
        let mut flat = vec![0f32; b * self.max_instances * width];
        let mut valid = vec![vec![false; self.max_instances]; b];
        for (bi, l) in labels.iter().enumerate() {
            let (rows, _) = self.rows(l);
            for (r, row) in rows.iter().enumerate() {
                valid[bi][r] = true;
                let o = (bi * self.max_instances + r) * width;
                flat[o..o + width].copy_from_slice(row);
            }
        }
        let dev = Device::Cpu;
        let rows = Tensor::from_vec(flat, (b, self.max_instances, width), &dev)?.to_dtype(dtype)?;
        let n = b * self.max_instances;
        let flat_rows = rows.reshape((n, width))?;
        let static_part = flat_rows.narrow(1, 0, static_w)?;
        let motion = (flat_rows.narrow(1, static_w, steps * 2)?.reshape((n, steps, 2))? * MOTION_INPUT_SCALE)?;
        let seq = Tensor::cat(&[&static_part.unsqueeze(1)?.repeat((1, steps, 1))?, &motion], 2)?;
        let states = self.lstm.seq(&seq)?;
        let last = states.last().ok_or_else(|| Error::shape("empty motion sequence"))?;
        let tokens = last.h().reshape((b, self.max_instances, self.token_dim))?;
        Ok(InstanceTokens { rows, tokens, valid })
    }
}

/// Grid queries attend to instance tokens; the concatenation
/// `[B, P_R, attended]` is projected to the prior channels.
pub struct Integrator {
    cross: AttentionBlock,
    null_embedding: Tensor,
    project: Conv2d,
    embed: usize,
}

impl Integrator {
    fn new(feat: usize, grid: usize, cfg: &PriorConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            cross: AttentionBlock::new(feat, cfg.token_dim, cfg.embed, cfg.embed, vb.pp("cross"))?,
            null_embedding: vb.get_with_hints(cfg.embed, "null_embedding", candle_nn::Init::Randn { mean: 0.0, stdev: 0.02 })?,
            project: Conv2d::new(feat + grid + cfg.embed, cfg.out_channels, 1, 1, vb.pp("project"))?,
            embed: cfg.embed,
        })
    }

    pub fn forward(&self, features: &Tensor, grid: &Tensor, inst: &InstanceTokens) -> Result<(Tensor, Vec<Option<Tensor>>)> {
        let (b, _, h, w) = features.dims4()?;
        let queries = to_tokens(features)?;
        let mut attended = Vec::with_capacity(b);
        let mut weights = Vec::with_capacity(b);
        for bi in 0..b {
            let keep: Vec<u32> = inst.valid[bi].iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i as u32).collect();
            if keep.is_empty() {
                let null = self.null_embedding.reshape((1, 1, self.embed))?.repeat((1, h * w, 1))?;
                attended.push(null);
                weights.push(None);
                continue;
            }
            let idx = Tensor::from_vec(keep.clone(), keep.len(), &Device::Cpu)?;
            let keys = inst.tokens.get(bi)?.index_select(&idx, 0)?.unsqueeze(0)?;
            let (ctx, wts) = self.cross.forward(&queries.get(bi)?.unsqueeze(0)?, &keys, None)?;
            attended.push(ctx);
            weights.push(Some(wts.squeeze(0)?));
        }
        let attended = from_tokens(&Tensor::cat(&attended, 0)?, h, w)?;
        let out = self.project.forward(&Tensor::cat(&[features, grid, &attended], 1)?)?;
        Ok((out, weights))
    }
}

/// Complete label-conditioned extractor.
pub struct PatternExtractor {
    local: LocalBranch,
    global: GlobalBranch,
    gate: Linear,
    instances: InstanceEncoder,
    integrate: Integrator,
    out_channels: usize,
}

impl PatternExtractor {
    pub fn new(cfg: &PriorConfig, feature_channels: usize, steps: usize, vb: VarBuilder) -> Result<Self> {
        if cfg.downsample == 0 || cfg.max_instances == 0 || cfg.cells_per_instance == 0 {
            return Err(Error::config("prior sizes must be positive"));
        }
        let c = feature_channels;
        Ok(Self {
            local: LocalBranch::new(cfg, steps, c, vb.pp("local"))?,
            global: GlobalBranch::new(cfg, steps, c, vb.pp("global"))?,
            gate: Linear::new(2 * c, c, vb.pp("gate"))?,
            instances: InstanceEncoder::new(cfg, vb.pp("instances"))?,
            integrate: Integrator::new(c, c, cfg, vb.pp("integrate"))?,
            out_channels: cfg.out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn local_branch(&self) -> &LocalBranch {
        &self.local
    }

    pub fn global_branch(&self) -> &GlobalBranch {
        &self.global
    }

    pub fn instance_encoder(&self) -> &InstanceEncoder {
        &self.instances
    }

    pub fn integrator(&self) -> &Integrator {
        &self.integrate
    }

    /// Gate from globally pooled features of both branches, `(B, C')`.
    pub fn gate(&self, global: &Tensor, local: &Tensor) -> Result<Tensor> {
        let pooled = Tensor::cat(&[global.mean((2, 3))?, local.mean((2, 3))?], 1)?;
        Ok(candle_nn::ops::sigmoid(&self.gate.forward(&pooled)?)?)
    }

    pub fn grid_prior(&self, labels: &LabelBatch) -> Result<GridPrior> {
        let (fm, fcs, local) = self.local.forward(&labels.motion, &labels.category_onehot, &labels.state)?;
        let global = self.global.forward(&labels.motion, &labels.category_onehot, &labels.state)?;
        let rho = self.gate(&global, &local)?;
        let fused = gated_mix(&global, &local, &rho)?;
        Ok(GridPrior { local_motion: fm, local_cls_state: fcs, local, global, rho, fused })
    }

    /// Prior feature map from backbone features and ground truth.
    pub fn forward(&self, features: &Tensor, labels: &LabelBatch) -> Result<PriorFeature> {
        let grid = self.grid_prior(labels)?;
        let instances = self.instances.forward(&labels.labels, features.dtype())?;
        let (values, attention) = self.integrate.forward(features, &grid.fused, &instances)?;
        Ok(PriorFeature { values, grid, instances, attention })
    }
}

/// Sum over the last axis, used by tests that check attention normalization.
pub fn row_sums(weights: &Tensor) -> Result<Vec<f64>> {
    Ok(weights.sum(D::Minus1)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}
