//! Pipeline stages shared by the subcommands and the one-shot experiment.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fpsurrogate::datagen::{generate_dataset_with_stats, save_dataset, Dataset};
use fpsurrogate::evaluate::{evaluate_detailed, EntryError, EvalReport, Evaluation};
use fpsurrogate::network::{derive_operators, generate_synthetic_feeder, load_feeder, save_feeder};
use fpsurrogate::surrogate::save_params;
use fpsurrogate::trainer::{train_with_observer, EpochRecord, TrainLog};
use fpsurrogate::{DerivedOperator, FeederModel, SolverOptions, SurrogateParams};

use crate::config::{ExperimentConfig, FeederSource};

pub const FEEDER_FILE: &str = "feeder.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ERRORS_FILE: &str = "errors.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Histogram resolution of evaluation reports.
pub const REPORT_BUCKETS: usize = 16;

pub fn obtain_feeder(source: &FeederSource) -> anyhow::Result<FeederModel> {
    match &source.path {
        Some(path) => {
            load_feeder(path).with_context(|| format!("loading feeder {}", path.display()))
        }
        None => Ok(generate_synthetic_feeder(source.buses, source.seed)?),
    }
}

pub fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_log_csv(log: &TrainLog, path: &Path) -> anyhow::Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for record in &log.records {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_log_csv(path: &Path) -> anyhow::Result<TrainLog> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let records = reader
        .deserialize::<EpochRecord>()
        .collect::<Result<_, _>>()?;
    Ok(TrainLog { records })
}

pub fn write_errors_csv(entries: &[EntryError], path: &Path) -> anyhow::Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for entry in entries {
        writer.serialize(entry)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_report(report: &EvalReport, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_report(path: &Path) -> anyhow::Result<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Generates and writes train/test datasets into `dir`.
pub fn generate_data(
    feeder: &FeederModel,
    config: &ExperimentConfig,
    dir: &Path,
) -> anyhow::Result<(Dataset, Dataset)> {
    let (train, test, stats) = generate_dataset_with_stats(feeder, &config.scenario)?;
    create_dir(dir)?;
    save_dataset(&train, dir.join(TRAIN_FILE))?;
    save_dataset(&test, dir.join(TEST_FILE))?;
    println!(
        "generated {} train / {} test samples on {} buses ({} redraws)",
        train.len(),
        test.len(),
        feeder.n_buses(),
        stats.rejected
    );
    Ok((train, test))
}

/// Trains, printing a progress line roughly twenty times per run, and writes
/// the checkpoint and log into `dir`.
pub fn train_and_save(
    train: &Dataset,
    config: &ExperimentConfig,
    truth: Option<&DerivedOperator>,
    dir: &Path,
) -> anyhow::Result<(SurrogateParams, TrainLog)> {
    let every = (config.train.epochs / 20).max(1);
    let last = config.train.epochs;
    let (params, log) = train_with_observer(train, &config.train, truth, |r| {
        if r.epoch == 1 || r.epoch % every == 0 || r.epoch == last {
            let w = r
                .w_error
                .map(|e| format!("  |w_hat - w| {e:.3e}"))
                .unwrap_or_default();
            println!(
                "epoch {:>6}  loss {:.4e}  lr {:.1e}{w}",
                r.epoch, r.mean_loss, r.lr
            );
        }
    })?;
    create_dir(dir)?;
    save_params(&params, dir.join(CHECKPOINT_FILE))?;
    write_log_csv(&log, &dir.join(LOG_FILE))?;
    Ok((params, log))
}

pub fn evaluate_and_save(
    params: &SurrogateParams,
    test: &Dataset,
    dir: &Path,
) -> anyhow::Result<Evaluation> {
    let evaluation = evaluate_detailed(params, test, &SolverOptions::default(), REPORT_BUCKETS)?;
    create_dir(dir)?;
    write_report(&evaluation.report, &dir.join(REPORT_FILE))?;
    write_errors_csv(&evaluation.entries, &dir.join(ERRORS_FILE))?;
    print_report(&evaluation.report);
    Ok(evaluation)
}

pub fn print_report(report: &EvalReport) {
    println!(
        "test samples {} (excluded {}, nonconverged {})",
        report.n_samples, report.n_excluded, report.n_nonconverged
    );
    println!("rmse |v|      {:.4e} p.u.", report.rmse_magnitude);
    println!("rmse angle    {:.4e} rad", report.rmse_angle);
    println!("complex rmse  {:.4e} p.u.", report.mean_complex_rmse);
    println!("predict time  {:.3} ms/sample", report.mean_predict_ms);
}

pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub feeder: FeederModel,
    pub operator: DerivedOperator,
    pub params: SurrogateParams,
    pub log: TrainLog,
    pub evaluation: Evaluation,
}

/// Feeder, data, training and evaluation in one directory, together with
/// the resolved configuration.
pub fn run_experiment(config: &ExperimentConfig) -> anyhow::Result<ExperimentOutcome> {
    let mut config = config.clone();
    config.validate()?;
    config.apply_master_seed();
    config.train.gradient_floor = Some(config.train.effective_gradient_floor());
    let feeder = obtain_feeder(&config.feeder)?;
    config.feeder.buses = feeder.n_buses();
    config.resolve_pv_sites(feeder.n_buses());
    let out_dir = config.out_dir.clone();
    create_dir(&out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), config.to_toml()?)?;
    save_feeder(&feeder, out_dir.join(FEEDER_FILE))?;
    println!(
        "feeder '{}': {} PQ buses, condition estimate {:.3e}",
        feeder.name(),
        feeder.n_buses(),
        feeder.condition_estimate()
    );
    let operator = derive_operators(&feeder)?;

    let (train, test) = generate_data(&feeder, &config, &out_dir)?;
    let (params, log) = train_and_save(&train, &config, Some(&operator), &out_dir)?;
    let evaluation = evaluate_and_save(&params, &test, &out_dir)?;
    Ok(ExperimentOutcome {
        config,
        out_dir,
        feeder,
        operator,
        params,
        log,
        evaluation,
    })
}
