use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fpsurrogate::datagen::load_dataset;
use fpsurrogate::network::{derive_operators, load_feeder, save_feeder};
use fpsurrogate::surrogate::load_params;
use fpsurrogate::Error;

use crate::config::ExperimentConfig;
use crate::pipeline::{self, create_dir};

/// Exit status of each failure class.
pub mod exit {
    /// Unclassified failure.
    pub const FAILURE: u8 = 1;
    /// Bad flags, bad config, or invalid input files.
    pub const VALIDATION: u8 = 2;
    /// Feeder or dataset generation gave up.
    pub const GENERATION_FAILED: u8 = 3;
    /// Training diverged.
    pub const DIVERGED: u8 = 4;
    /// A file could not be read or written.
    pub const IO: u8 = 5;
}

#[derive(Debug, Parser)]
#[command(
    name = "fpsurrogate",
    version,
    about = "Fixed-point surrogate models of three-phase feeders"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic radial feeder.
    GenFeeder(GenFeederArgs),
    /// Generate train and test datasets on a feeder.
    GenData(GenDataArgs),
    /// Train a surrogate on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test dataset.
    Eval(EvalArgs),
    /// Feeder, data, training and evaluation in one run directory.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct GenFeederArgs {
    /// PQ buses.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub buses: u64,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output feeder JSON.
    #[arg(short, long, default_value = pipeline::FEEDER_FILE)]
    pub out: PathBuf,
}

#[derive(Debug, Default, Args)]
pub struct ScenarioFlags {
    /// Training samples.
    #[arg(long)]
    pub train: Option<usize>,
    /// Test samples.
    #[arg(long)]
    pub test: Option<usize>,
    /// Random PV sites, used when the config lists none.
    #[arg(long)]
    pub pv: Option<usize>,
    /// Zero every load and PV output.
    #[arg(long)]
    pub zero_load: bool,
}

#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate decay factor.
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Epochs between learning-rate decays.
    #[arg(long)]
    pub lr_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Feeder JSON; without it a synthetic feeder is generated.
    #[arg(long)]
    pub feeder: Option<PathBuf>,
    /// PQ buses of a synthetic feeder.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub buses: Option<u64>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub scenario: ScenarioFlags,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for train.jsonl and test.jsonl.
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Ground-truth feeder, for logging the no-load voltage error.
    #[arg(long)]
    pub feeder: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the checkpoint and log.
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the report and per-entry errors.
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub feeder: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub buses: Option<u64>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub scenario: ScenarioFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Run directory.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

impl ScenarioFlags {
    fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(n) = self.train {
            config.scenario.n_train = n;
        }
        if let Some(n) = self.test {
            config.scenario.n_test = n;
        }
        if let Some(n) = self.pv {
            config.pv_sites = n;
        }
        if self.zero_load {
            config.scenario.load_range = [0.0, 0.0];
            config.scenario.pv_range = [0.0, 0.0];
        }
    }
}

impl TrainFlags {
    fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(v) = self.epochs {
            config.train.epochs = v;
        }
        if let Some(v) = self.lr {
            config.train.lr_initial = v;
        }
        if let Some(v) = self.lr_decay {
            config.train.lr_decay_factor = v;
        }
        if let Some(v) = self.lr_every {
            config.train.lr_decay_every = v;
        }
    }
}

fn apply_feeder_flags(config: &mut ExperimentConfig, feeder: &Option<PathBuf>, buses: Option<u64>) {
    if let Some(b) = buses {
        config.feeder.buses = b as usize;
        config.feeder.path = None;
    }
    if let Some(path) = feeder {
        config.feeder.path = Some(path.clone());
    }
}

fn base_config(path: &Option<PathBuf>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenFeeder(args) => gen_feeder(&args),
        Command::GenData(args) => gen_data(&args),
        Command::Train(args) => train(&args),
        Command::Eval(args) => eval(&args),
        Command::Experiment(args) => experiment(&args).map(|_| ()),
    }
}

pub fn gen_feeder(args: &GenFeederArgs) -> anyhow::Result<()> {
    let mut config = ExperimentConfig {
        seed: Some(args.seed),
        ..Default::default()
    };
    config.feeder.buses = args.buses as usize;
    config.apply_master_seed();
    let feeder = pipeline::obtain_feeder(&config.feeder)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_feeder(&feeder, &args.out)?;
    println!(
        "feeder '{}': {} PQ buses, condition estimate of y_ll {:.3e}, written to {}",
        feeder.name(),
        feeder.n_buses(),
        feeder.condition_estimate(),
        args.out.display()
    );
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    let mut config = base_config(&args.config)?;
    apply_feeder_flags(&mut config, &args.feeder, args.buses);
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    args.scenario.apply(&mut config);
    config.validate()?;
    config.apply_master_seed();
    let feeder = pipeline::obtain_feeder(&config.feeder)?;
    config.resolve_pv_sites(feeder.n_buses());
    pipeline::generate_data(&feeder, &config, &args.out)?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut config = base_config(&args.config)?;
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    args.train.apply(&mut config);
    config.validate()?;
    config.apply_master_seed();
    let data = read_dataset(&args.data)?;
    let truth = match &args.feeder {
        Some(path) => Some(derive_operators(
            &load_feeder(path).with_context(|| format!("loading feeder {}", path.display()))?,
        )?),
        None => None,
    };
    let (_, log) = pipeline::train_and_save(&data, &config, truth.as_ref(), &args.out)?;
    if let Some(last) = log.records.last() {
        println!(
            "final epoch {} mean loss {:.4e}",
            last.epoch, last.mean_loss
        );
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let params = load_params(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let test = read_dataset(&args.data)?;
    pipeline::evaluate_and_save(&params, &test, &args.out)?;
    Ok(())
}

pub fn experiment(args: &ExperimentArgs) -> anyhow::Result<pipeline::ExperimentOutcome> {
    let mut config = base_config(&args.config)?;
    apply_feeder_flags(&mut config, &args.feeder, args.buses);
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    args.scenario.apply(&mut config);
    args.train.apply(&mut config);
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    pipeline::run_experiment(&config)
}

fn read_dataset(path: &Path) -> anyhow::Result<fpsurrogate::datagen::Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Maps an error chain onto the documented exit codes.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::GenerationFailed { .. } => exit::GENERATION_FAILED,
                Error::Diverged { .. } | Error::DegenerateVoltage { .. } => exit::DIVERGED,
                Error::Io(_) => exit::IO,
                Error::SingularMatrix { .. }
                | Error::Parse(_)
                | Error::Validation { .. }
                | Error::Config(_) => exit::VALIDATION,
            };
        }
        if cause.is::<std::io::Error>() {
            return exit::IO;
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            return if e.is_io_error() {
                exit::IO
            } else {
                exit::VALIDATION
            };
        }
        if cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return exit::VALIDATION;
        }
    }
    exit::FAILURE
}
