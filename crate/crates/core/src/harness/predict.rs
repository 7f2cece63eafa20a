//! Checkpoint inference written as a prediction file.

use std::path::Path;

use crate::dataset::{read_dataset, write_predictions, PredictionFile};
use crate::error::Result;
use crate::harness::checkpoint::load_checkpoint;
use crate::harness::evaluate::predict_dataset;
use crate::latent::SampleMode;

/// Runs `checkpoint` over the dataset at `data` and writes the predictions to
/// `out`. Returns the number of sequences written.
pub fn predict_to_file(checkpoint: &Path, data: &Path, out: &Path, mode: SampleMode, seed: u64) -> Result<usize> {
    let model = load_checkpoint(checkpoint)?.build_model()?;
    let ds = read_dataset(data)?;
    let records = predict_dataset(&model, &ds, mode, seed)?;
    let n = records.len();
    write_predictions(out, &PredictionFile { spec: ds.spec, records })?;
    Ok(n)
}
