//! Training, evaluation and experiment drivers.
pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod plot;
pub mod predict;
pub mod train;
