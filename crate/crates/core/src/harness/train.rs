//! Training loop with a step learning-rate schedule, KL warm-up, teacher-path
//! annealing, line-delimited logs, per-epoch checkpoints and exact resume.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta, RunConfig};
use crate::harness::evaluate::evaluate_model;
use crate::metrics::{ReportOptions, SpeedGroup};
use crate::model::PriorMotion;
use crate::nn::Adam;
use crate::objective::{total_loss, LossReport};

/// Stream offset separating the per-step noise RNG from the shuffle RNG.
const NOISE_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub teacher: bool,
    pub loss: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub static_mean: Option<f64>,
    pub slow_mean: Option<f64>,
    pub fast_mean: Option<f64>,
    pub oa: Option<f64>,
    pub stability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub validation: Option<ValidationSummary>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: u64,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepLog),
    Epoch(&'a EpochLog),
}

pub struct Trainer {
    model: PriorMotion,
    optimizer: Adam,
    run: RunConfig,
    config_hash: u64,
    epoch: usize,
}

fn check_spec(run: &RunConfig, ds: &Dataset, what: &str) -> Result<()> {
    if ds.spec != run.grid {
        return Err(Error::config(format!("{what} dataset grid does not match the configured grid")));
    }
    if ds.is_empty() {
        return Err(Error::Data(format!("{what} dataset is empty")));
    }
    Ok(())
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.train.validate()?;
        let model = PriorMotion::new(run.model.clone(), run.grid.clone(), run.train.seed, run.train.dtype()?)?;
        let optimizer = Adam::new(model.store().named_vars(), run.train.schedule.learning_rate)?;
        let config_hash = run.hash()?;
        Ok(Self { model, optimizer, run, config_hash, epoch: 0 })
    }

    /// Continues from a checkpoint written by [`Trainer::train_until`].
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.meta.config.clone())?;
        if t.config_hash != ck.meta.config_hash {
            return Err(Error::Checkpoint("configuration hash changed since the checkpoint".into()));
        }
        t.model.store().load(&ck.params)?;
        let opt = ck
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        t.optimizer.restore(opt, ck.meta.step)?;
        t.epoch = ck.meta.epoch;
        Ok(t)
    }

    pub fn model(&self) -> &PriorMotion {
        &self.model
    }

    pub fn into_model(self) -> PriorMotion {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps_taken(&self) -> usize {
        self.optimizer.steps_taken()
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    /// Optimizer steps of the whole run (schedule epochs, capped by `max_steps`).
    pub fn total_steps(&self, n_samples: usize) -> usize {
        let per_epoch = n_samples.div_ceil(self.run.train.schedule.batch_size);
        let all = per_epoch * self.run.train.schedule.epochs;
        self.run.train.max_steps.map_or(all, |m| m.min(all))
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.epoch,
            step: self.optimizer.steps_taken(),
            config: self.run.clone(),
            config_hash: self.config_hash,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.optimizer), &self.checkpoint_meta())
    }

    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.run.train.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Trains until `until_epoch` epochs are complete (or `max_steps` is hit),
    /// appending to `record` and, with `out_dir`, to `train_log.jsonl` and
    /// per-epoch checkpoints.
    pub fn train_until(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        until_epoch: usize,
        out_dir: Option<&Path>,
        record: &mut RunRecord,
    ) -> Result<()> {
        check_spec(&self.run, train, "training")?;
        if let Some(v) = val {
            check_spec(&self.run, v, "validation")?;
        }
        let started = Instant::now();
        record.config_hash = self.config_hash;
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let f = OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let sched = self.run.train.schedule.clone();
        let total = self.total_steps(train.len());
        let dtype = self.model.dtype();
        let until = until_epoch.min(sched.epochs);
        while self.epoch < until && self.optimizer.steps_taken() < total {
            let epoch = self.epoch;
            self.optimizer.lr = sched.lr_at(epoch);
            let order = self.epoch_order(epoch, train.len());
            let mut loss_sum = 0.0;
            let mut n_steps = 0;
            for chunk in order.chunks(sched.batch_size) {
                let step = self.optimizer.steps_taken();
                if step >= total {
                    break;
                }
                let samples: Vec<&Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
                let batch = Batch::from_samples(&samples, &self.run.grid, dtype)?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.run.train.seed);
                rng.set_stream(NOISE_STREAM_BASE + step as u64);
                let teacher = rng.random::<f64>() < self.run.train.teacher.probability(step, total);
                let out = self.model.forward_train(&batch, teacher, &mut rng)?;
                let parts = out.loss_parts(&batch.labels)?;
                let pw = self.run.train.loss.pattern_at(step, total);
                let (loss, report) = total_loss(&parts, &self.run.train.loss, pw)?;
                if !report.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch}, step {step}: {}",
                        serde_json::to_string(&report).unwrap_or_default()
                    )));
                }
                let grads = loss.backward()?;
                self.optimizer.step(&grads)?;
                loss_sum += report.total;
                n_steps += 1;
                let entry = StepLog { epoch, step, lr: self.optimizer.lr, teacher: out.used_teacher, loss: report };
                if let Some(w) = log.as_mut() {
                    write_line(w, &LogLine::Step(&entry))?;
                }
                log::debug!("epoch {epoch} step {step} loss {:.5}", entry.loss.total);
                record.steps.push(entry);
            }
            if n_steps == 0 {
                break;
            }
            self.epoch += 1;
            let validation = match val {
                Some(v) if self.run.train.validate_each_epoch => Some(summarize(&self.model, v)?),
                _ => None,
            };
            let checkpoint = match out_dir {
                Some(dir) => {
                    let p = dir.join("checkpoints").join(format!("epoch_{:03}.safetensors", self.epoch));
                    self.save(&p)?;
                    record.checkpoints.push(p.clone());
                    Some(p)
                }
                None => None,
            };
            let entry = EpochLog {
                epoch,
                steps: n_steps,
                mean_loss: if n_steps > 0 { loss_sum / n_steps as f64 } else { f64::NAN },
                validation,
                checkpoint,
            };
            log::info!("epoch {epoch} mean loss {:.5} ({} steps)", entry.mean_loss, n_steps);
            if let Some(w) = log.as_mut() {
                write_line(w, &LogLine::Epoch(&entry))?;
            }
            record.epochs.push(entry);
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        record.wall_clock_secs += started.elapsed().as_secs_f64();
        Ok(())
    }
}

fn write_line(w: &mut BufWriter<File>, line: &LogLine) -> Result<()> {
    serde_json::to_writer(&mut *w, line).map_err(|e| Error::Io(e.into()))?;
    w.write_all(b"\n")?;
    Ok(())
}

fn summarize(model: &PriorMotion, ds: &Dataset) -> Result<ValidationSummary> {
    let r = evaluate_model(model, ds, ReportOptions::default())?;
    let mean = |g: SpeedGroup| r.groups.get(g).map(|s| s.mean);
    Ok(ValidationSummary {
        static_mean: mean(SpeedGroup::Static),
        slow_mean: mean(SpeedGroup::Slow),
        fast_mean: mean(SpeedGroup::Fast),
        oa: r.classification.oa,
        stability: r.stability.map(|s| s.mean_variance),
    })
}

/// Trains a fresh model over the full schedule.
pub fn train(run: RunConfig, train: &Dataset, val: Option<&Dataset>, out_dir: Option<&Path>) -> Result<(PriorMotion, RunRecord)> {
    let mut trainer = Trainer::new(run)?;
    let mut record = RunRecord::default();
    let epochs = trainer.run.train.schedule.epochs;
    trainer.train_until(train, val, epochs, out_dir, &mut record)?;
    Ok((trainer.into_model(), record))
}
