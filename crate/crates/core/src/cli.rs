//! Command-line workflows: gen-data, train, eval, gradcheck.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_manifest, Dataset, DatasetId, Split};
use crate::error::{config_err, Error, Result};
use crate::gradcheck::{format_table, run_gradcheck, GradcheckOptions};
use crate::metrics::MetricsReport;
use crate::model::ModelState;
use crate::scheduler::{evaluate_split, rotate_eval, EpochSummary, Trainer};

pub const SEED_ENV: &str = "ATTRFUSE_SEED";
pub const CHECKPOINT_ENV: &str = "ATTRFUSE_CHECKPOINT";
pub const LOG_HEADER: &str = "epoch,dataset_id,loss,mA,Acc,Prec,Rec,F1,lr";
const DEFAULT_CONFIG: &str = "configs/toy.toml";

#[derive(Debug, Parser)]
#[command(name = "attrfuse", version, about = "Multi-dataset pedestrian attribute recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate every registered synthetic dataset.
    GenData {
        #[arg(long, default_value = DEFAULT_CONFIG)]
        config: PathBuf,
        #[arg(long, env = SEED_ENV)]
        seed: Option<u64>,
        /// Comma-separated subset of dataset ids.
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<String>,
        /// Overwrite existing dataset directories.
        #[arg(long)]
        force: bool,
    },
    /// Joint training with per-epoch rotational evaluation.
    Train {
        #[arg(long, default_value = DEFAULT_CONFIG)]
        config: PathBuf,
        #[arg(long, env = SEED_ENV)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<String>,
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on validation splits.
    Eval {
        /// Supplies the data directory.
        #[arg(long, default_value = DEFAULT_CONFIG)]
        config: PathBuf,
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<String>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        component: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Machine,
}

/// Parses arguments, runs the command and returns the process exit code.
/// Failures print one `error[CODE]: message` line to stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error[E_USAGE]: {first}");
            return 2;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            1
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData {
            config,
            seed,
            datasets,
            force,
        } => {
            let cfg = apply_overrides(RunConfig::load(&config)?, seed, None, &datasets, None)?;
            gen_data(&cfg, force, out).map(|_| ())
        }
        Command::Train {
            config,
            seed,
            epochs,
            datasets,
            checkpoint,
        } => {
            let cfg = apply_overrides(RunConfig::load(&config)?, seed, epochs, &datasets, checkpoint)?;
            train(&cfg, out).map(|_| ())
        }
        Command::Eval {
            config,
            checkpoint,
            datasets,
            format,
        } => {
            let cfg = RunConfig::load(&config)?;
            let path = checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
            let reports = eval(&cfg.data_dir, &path, &datasets)?;
            for r in reports.values() {
                let text = match format {
                    Format::Text => r.to_text(),
                    Format::Machine => r.to_machine(),
                };
                write_out(out, &text)?;
            }
            Ok(())
        }
        Command::Gradcheck { component } => {
            let reports = run_gradcheck(component.as_deref(), &GradcheckOptions::default())?;
            write_out(out, &format_table(&reports))?;
            let failed: Vec<&str> = reports
                .iter()
                .filter(|r| !r.passed)
                .map(|r| r.component.as_str())
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| if text.ends_with('\n') { Ok(()) } else { out.write_all(b"\n") })
        .map_err(|e| Error::io("<stdout>", e))
}

pub fn apply_overrides(
    cfg: RunConfig,
    seed: Option<u64>,
    epochs: Option<usize>,
    datasets: &[String],
    checkpoint: Option<PathBuf>,
) -> Result<RunConfig> {
    let mut cfg = if datasets.is_empty() { cfg } else { cfg.select(datasets)? };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e);
    }
    if let Some(c) = checkpoint {
        cfg.checkpoint = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes every registered dataset under `data_dir` and prints its positive
/// rates. Existing datasets are only replaced with `force`.
pub fn gen_data(cfg: &RunConfig, force: bool, out: &mut dyn Write) -> Result<Vec<Dataset>> {
    for d in &cfg.datasets {
        let dir = cfg.dataset_dir(&d.id);
        if dir.exists() && !force {
            return Err(config_err!(
                "{} already exists; pass --force to regenerate",
                dir.display()
            ));
        }
    }
    let mut made = Vec::new();
    for d in &cfg.datasets {
        let dir = cfg.dataset_dir(&d.id);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let data = generate_synthetic(&cfg.synthetic_spec(d)?, cfg.seed, &dir)?;
        let rates: Vec<String> = data.spec.positive_rates.iter().map(|r| format!("{r:.4}")).collect();
        write_out(
            out,
            &format!(
                "dataset={} modality={} train={} val={} positive_rates={}",
                d.id,
                d.modality,
                data.spec.train_size,
                data.spec.val_size,
                rates.join(",")
            ),
        )?;
        made.push(data);
    }
    Ok(made)
}

/// Loads the registered datasets and checks them against the config.
pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<Dataset>> {
    cfg.datasets
        .iter()
        .map(|d| {
            let data = load_manifest(&cfg.dataset_dir(&d.id))?;
            let want = d.spec();
            let got = &data.spec;
            if got.attribute_names != want.attribute_names
                || got.modality != want.modality
                || got.frame_count != want.frame_count
                || (got.height, got.width, got.channels) != (want.height, want.width, want.channels)
            {
                return Err(Error::Data(format!(
                    "dataset {} on disk does not match the config; rerun gen-data --force",
                    d.id
                )));
            }
            Ok(data)
        })
        .collect()
}

pub fn log_row(epoch: usize, id: &DatasetId, loss: Option<f64>, report: &MetricsReport, lr: f64) -> String {
    let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
    let inst = report.instance.as_ref();
    format!(
        "{epoch},{id},{},{},{},{},{},{},{lr:.6e}",
        f(loss),
        f(report.ma),
        f(inst.map(|m| m.accuracy)),
        f(inst.map(|m| m.precision)),
        f(inst.map(|m| m.recall)),
        f(inst.map(|m| m.f1)),
    )
}

pub struct TrainOutcome {
    pub summaries: Vec<EpochSummary>,
    /// Validation reports per epoch, in registration order.
    pub reports: Vec<IndexMap<DatasetId, MetricsReport>>,
    pub log: String,
    pub trainer: Trainer,
}

/// Trains for `cfg.epochs`, evaluating and checkpointing after every epoch.
/// A failing epoch leaves the previous checkpoint in place.
pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainOutcome> {
    if !cfg.desk_runnable {
        return Err(config_err!(
            "this configuration is marked desk_runnable = false and is not meant to be trained here"
        ));
    }
    let datasets = load_datasets(cfg)?;
    let specs: Vec<_> = datasets.iter().map(|d| d.spec.clone()).collect();
    let model = ModelState::new(&cfg.model, &specs, &cfg.query_modes(), cfg.seed)?;
    let mut trainer = Trainer::new(model, datasets, cfg.train_options()?)?;

    let mut log = format!("{LOG_HEADER}\n");
    write_out(out, LOG_HEADER)?;
    if let Some(p) = &cfg.log {
        write_file(p, &log)?;
    }
    let mut summaries = Vec::new();
    let mut all_reports = Vec::new();
    for _ in 0..cfg.epochs {
        let summary = trainer.run_epoch()?;
        let refs: Vec<&Dataset> = trainer.datasets.iter().collect();
        let reports = rotate_eval(&trainer.model, &refs, cfg.threshold)?;
        let mut rows = String::new();
        for (id, report) in &reports {
            let loss = summary.dataset_loss.get(id).copied().flatten();
            rows.push_str(&log_row(summary.epoch + 1, id, loss, report, summary.last_lr));
            rows.push('\n');
        }
        write_out(out, &rows)?;
        log.push_str(&rows);
        if let Some(p) = &cfg.log {
            write_file(p, &log)?;
        }
        Checkpoint::capture(
            cfg,
            &trainer.model,
            &trainer.opt,
            (summary.epoch + 1) as u64,
            trainer.global_step(),
        )
        .save(&cfg.checkpoint)?;
        summaries.push(summary);
        all_reports.push(reports);
    }
    Ok(TrainOutcome {
        summaries,
        reports: all_reports,
        log,
        trainer,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model recorded in a checkpoint.
pub fn load_model(path: &Path) -> Result<(Checkpoint, ModelState)> {
    let ck = Checkpoint::load(path)?;
    let specs: Vec<_> = ck
        .config
        .datasets
        .iter()
        .map(|d| {
            let mut s = d.spec();
            s.positive_rates = vec![0.5; s.attribute_count()];
            s
        })
        .collect();
    let mut model = ModelState::new(&ck.config.model, &specs, &ck.config.query_modes(), ck.config.seed)?;
    ck.restore_into(&mut model, None)?;
    Ok((ck, model))
}

/// Validation reports for the requested datasets (all checkpoint datasets
/// when `ids` is empty), evaluated one after another.
pub fn eval(data_dir: &Path, checkpoint: &Path, ids: &[String]) -> Result<IndexMap<DatasetId, MetricsReport>> {
    let (ck, model) = load_model(checkpoint)?;
    let ids: Vec<DatasetId> = if ids.is_empty() {
        model.dataset_ids()
    } else {
        ids.iter().map(DatasetId::new).collect()
    };
    let mut reports = IndexMap::new();
    for id in ids {
        model.spec(&id)?;
        let data = load_manifest(&data_dir.join(id.as_str()))?;
        let r = evaluate_split(&model, &data, Split::Val, ck.config.threshold)?;
        reports.insert(id, r);
    }
    Ok(reports)
}
