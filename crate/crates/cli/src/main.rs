//! Command line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use priormotion::dataset::read_predictions;
use priormotion::harness::ablate::{ablation_rows, category_fast_mean, generalization_markdown, masked_generalization, run_ablation, AblationTable};
use priormotion::harness::checkpoint::{load_checkpoint, RunConfig};
use priormotion::harness::config::Config;
use priormotion::harness::evaluate::{evaluate_model, evaluate_rule, RuleBaseline};
use priormotion::harness::plot::{plot_ablation, plot_predictions, plot_report};
use priormotion::harness::predict::predict_to_file;
use priormotion::harness::train::{RunRecord, Trainer};
use priormotion::latent::SampleMode;
use priormotion::metrics::{generalization_index, ReportOptions};
use priormotion::sim::{build_benchmark, make_benchmark, BenchmarkSplits};
use priormotion::{read_dataset, Category, Dataset, Error, MetricReport, Result};

#[derive(Parser, Debug)]
#[command(name = "priormotion", version, about = "Grid motion prediction with label-derived priors")]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and scene seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic train/val/test splits.
    GenerateData {
        /// Leave this category out of the training split.
        #[arg(long)]
        mask_category: Option<Category>,
    },
    /// Train a model on a generated split directory.
    Train {
        /// Directory holding train.pmds and val.pmds.
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint or a rule baseline on a dataset file.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// `static` or `constant_velocity`.
        #[arg(long, conflicts_with = "checkpoint")]
        baseline: Option<RuleBaseline>,
        /// Checkpoint trained without the focus category; adds the
        /// generalization index to the report.
        #[arg(long, requires = "checkpoint")]
        masked_checkpoint: Option<PathBuf>,
        /// Category reported separately.
        #[arg(long)]
        focus: Option<Category>,
    },
    /// Train and evaluate the module-switch ablation grid.
    Ablate {
        /// Split directory; generated from the configuration when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated row names (Baseline, a..f); all rows by default.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        /// Also run the masked-category generalization protocol on this category.
        #[arg(long)]
        generalization: Option<Category>,
    },
    /// Write model predictions for a dataset file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample the latent instead of using its mean.
        #[arg(long)]
        sample: bool,
    },
    /// Render a prediction file, metric report or ablation table.
    Plot {
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn read_split(dir: &Path, name: &str) -> Result<Dataset> {
    read_dataset(dir.join(format!("{name}.pmds")))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out_dir.as_path();
    std::fs::create_dir_all(out)?;
    match &cli.command {
        Command::GenerateData { mask_category } => {
            let d = &cfg.data;
            let mask = mask_category.or(d.mask_category);
            let files = make_benchmark(&cfg.scene, &cfg.grid, d.n_train, d.n_val, d.n_test, mask, out)?;
            log::info!("wrote {}, {}, {}", files.train.display(), files.val.display(), files.test.display());
        }
        Command::Train { data, resume, epochs } => {
            let train = read_split(data, "train")?;
            let val = read_split(data, "val")?;
            let mut trainer = match resume {
                Some(p) => Trainer::resume(&load_checkpoint(p)?)?,
                None => Trainer::new(RunConfig { model: cfg.model.clone(), train: cfg.train.clone(), grid: cfg.grid.clone() })?,
            };
            let mut record = RunRecord::default();
            let until = epochs.unwrap_or(usize::MAX);
            trainer.train_until(&train, Some(&val), until, Some(out), &mut record)?;
            trainer.save(&out.join("model.safetensors"))?;
            write_json(&out.join("run_record.json"), &record)?;
            log::info!("trained {} steps over {} epochs", trainer.steps_taken(), trainer.epoch());
        }
        Command::Evaluate { data, checkpoint, baseline, masked_checkpoint, focus } => {
            let ds = read_dataset(data)?;
            let focus = focus.or(cfg.focus_category);
            let opts = ReportOptions { focus };
            let mut report = match (checkpoint, baseline) {
                (Some(p), _) => evaluate_model(&load_checkpoint(p)?.build_model()?, &ds, opts)?,
                (None, Some(b)) => evaluate_rule(*b, &ds, opts)?,
                (None, None) => return Err(Error::Config("pass --checkpoint or --baseline".into())),
            };
            if let Some(mp) = masked_checkpoint {
                if focus.is_none() {
                    return Err(Error::Config("--masked-checkpoint needs --focus".into()));
                }
                let masked = evaluate_model(&load_checkpoint(mp)?.build_model()?, &ds, opts)?;
                report.generalization_index =
                    Some(generalization_index(category_fast_mean(&report)?, category_fast_mean(&masked)?)?);
            }
            write_json(&out.join("report.json"), &report)?;
            std::fs::write(out.join("report.txt"), report.to_text())?;
            println!("{}", report.to_text());
        }
        Command::Ablate { data, rows, generalization } => {
            let splits = match data {
                Some(dir) => BenchmarkSplits {
                    train: read_split(dir, "train")?,
                    val: read_split(dir, "val")?,
                    test: read_split(dir, "test")?,
                },
                None => {
                    let d = &cfg.data;
                    build_benchmark(&cfg.scene, &cfg.grid, d.n_train, d.n_val, d.n_test, None)?
                }
            };
            let all = ablation_rows();
            let selected: Vec<_> = if rows.is_empty() {
                all
            } else {
                let mut v = Vec::new();
                for name in rows {
                    let row = all
                        .iter()
                        .find(|(n, _)| n.trim_matches(|c| c == '(' || c == ')').eq_ignore_ascii_case(name))
                        .ok_or_else(|| Error::Config(format!("unknown ablation row {name:?}")))?;
                    v.push(*row);
                }
                v
            };
            let table = run_ablation(&cfg, &splits, &selected, Some(out))?;
            std::fs::write(out.join("ablation.md"), table.to_markdown())?;
            std::fs::write(out.join("ablation.csv"), table.to_csv())?;
            write_json(&out.join("ablation.json"), &table)?;
            println!("{}", table.to_markdown());
            if let Some(category) = generalization {
                let d = &cfg.data;
                let masked = build_benchmark(&cfg.scene, &cfg.grid, d.n_train, d.n_val, d.n_test, Some(*category))?;
                let gi = masked_generalization(&cfg, &splits, &masked, *category, &selected)?;
                let md = generalization_markdown(&gi);
                std::fs::write(out.join("generalization.md"), &md)?;
                write_json(&out.join("generalization.json"), &gi)?;
                println!("{md}");
            }
        }
        Command::Predict { checkpoint, data, sample } => {
            let mode = if *sample { SampleMode::Sample } else { SampleMode::Deterministic };
            let path = out.join("predictions.pmdp");
            let n = predict_to_file(checkpoint, data, &path, mode, cfg.train.seed)?;
            log::info!("wrote {n} predictions to {}", path.display());
        }
        Command::Plot { input } => {
            let written = plot_input(input, out, &cfg)?;
            for p in &written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn plot_input(input: &Path, out: &Path, cfg: &Config) -> Result<Vec<PathBuf>> {
    if input.extension().is_some_and(|e| e == "pmdp") {
        return plot_predictions(&read_predictions(input)?, out, &cfg.plot);
    }
    let text = std::fs::read_to_string(input)?;
    if let Ok(report) = serde_json::from_str::<MetricReport>(&text) {
        return plot_report(&report, out);
    }
    if let Ok(table) = serde_json::from_str::<AblationTable>(&text) {
        return plot_ablation(&table, out);
    }
    Err(Error::Data(format!(
        "{} is neither a prediction file nor a report or ablation JSON",
        input.display()
    )))
}
