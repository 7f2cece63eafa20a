//! Grid-based, class-agnostic motion prediction from voxelized point sequences.
//!
//! The pipeline voxelizes a short history of point clouds into BEV occupancy
//! grids, extracts features with a pluggable backbone, and decodes per-cell
//! future displacement, category and motion state. During training a
//! label-conditioned prior (built from ground-truth motion, category, state and
//! instance tracks) supervises a spatial Gaussian latent through a KL term;
//! motion is rolled out autoregressively from that latent with a convolutional
//! GRU.
//!
//! Modules, bottom-up:
//! - [`grid`]: grid spec, voxelization, label rasterization
//! - [`dataset`]: the PMDS/PMDP binary containers
//! - [`sim`]: synthetic scene generator
//! - [`backbone`]: BEV feature extractors
//! - [`prior`]: the label-conditioned pattern extractor
//! - [`latent`]: latent encoder, spatial GRU rollout, classification decode
//! - [`model`]: the assembled network with ablation switches
//! - [`objective`]: multi-task loss
//! - [`metrics`]: evaluation suite
//! - [`harness`]: training, evaluation, ablation, checkpoints and plots

pub mod backbone;
pub mod batch;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod harness;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod prior;
pub mod sim;

pub use backbone::{Backbone, FeatureMap};
pub use dataset::{read_dataset, write_dataset, Dataset, Sample};
pub use error::{Error, Result};
pub use grid::{voxelize, Category, GridSpec, OccupancyGrid, PointSequence, SceneLabels};
pub use latent::LatentField;
pub use metrics::MetricReport;
pub use model::{ModelConfig, PriorMotion, Switches};
pub use objective::{LossReport, LossWeights};
pub use sim::{generate_sequence, make_benchmark, SceneConfig};
