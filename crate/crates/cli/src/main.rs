mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use applid::ensemble::Voting;
use applid::harness::{ExperimentConfig, TestScoring};
use applid::mlp::TrainOptions;

/// Appliance identification from current/voltage waveforms with a pairwise
/// network ensemble.
#[derive(Parser, Debug)]
#[command(name = "applid", version)]
struct Cli {
    /// Worker threads for folds and pairs (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Exit with status 2 when folds are skipped or sweep values rejected.
    #[arg(long, global = true)]
    strict: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus in the CSV + metadata.json layout.
    Synth(SynthArgs),
    /// Leave-house-out cross-validation.
    Crossval(CrossvalArgs),
    /// Sweep training size, sampling rate or test phase.
    Study(StudyArgs),
    /// Train an ensemble on a whole corpus and save it.
    Train(TrainArgs),
    /// Classify recordings with a saved ensemble.
    Predict(PredictArgs),
    /// Repeat the run recorded in a run.json manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    houses: usize,
    /// Instances of each category per house.
    #[arg(long, default_value_t = 3)]
    instances: usize,
    /// Recording length in grid periods.
    #[arg(long, default_value_t = 10)]
    periods: usize,
    #[arg(long, default_value_t = 30_000.0)]
    sample_rate: f64,
    #[arg(long, default_value_t = 60.0)]
    grid_freq: f64,
    /// Noise standard deviation relative to channel peak.
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    /// Chance that a house owns each category.
    #[arg(long, default_value_t = 1.0)]
    presence: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VotingArg {
    Weighted,
    Majority,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScoringArg {
    /// One vote per recording (majority over its windows).
    Measurement,
    /// One entry per window.
    Window,
}

/// Training schedule shared by every command that trains.
#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// Phase-sliding step in samples.
    #[arg(long, default_value_t = 10)]
    epsilon: usize,
    /// Decimate recordings to this rate first (Hz).
    #[arg(long)]
    target_rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    max_iterations: usize,
    #[arg(long, default_value_t = 2)]
    restarts: usize,
    /// Validation checks without improvement before stopping.
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 5)]
    validation_interval: usize,
    #[arg(long, default_value_t = 0.30)]
    validation_fraction: f64,
    #[arg(long, default_value_t = 30)]
    hidden: usize,
}

impl TrainFlags {
    fn train_options(&self) -> TrainOptions {
        TrainOptions {
            max_iterations: self.max_iterations,
            restarts: self.restarts,
            patience: self.patience,
            validation_interval: self.validation_interval,
            validation_fraction: self.validation_fraction,
            hidden_units: self.hidden,
            seed: self.seed,
            ..TrainOptions::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ExperimentFlags {
    /// Corpus directory.
    #[arg(long, env = "APPLID_DATA_DIR")]
    data: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, value_enum, default_value = "weighted")]
    voting: VotingArg,
    #[arg(long, value_enum, default_value = "measurement")]
    scoring: ScoringArg,
    /// Share of training houses kept per fold.
    #[arg(long, default_value_t = 1.0)]
    train_fraction: f64,
    /// Score each test recording on the single window starting at this sample.
    #[arg(long)]
    phase_tau: Option<usize>,
    /// Restrict each fold to the categories present in the held-out house.
    #[arg(long)]
    prior_knowledge: bool,
}

impl ExperimentFlags {
    fn config(&self) -> ExperimentConfig {
        ExperimentConfig {
            epsilon: self.train.epsilon,
            voting: match self.voting {
                VotingArg::Weighted => Voting::Weighted,
                VotingArg::Majority => Voting::Majority,
            },
            train_fraction: self.train_fraction,
            target_sample_rate_hz: self.train.target_rate,
            phase_shift_tau: self.phase_tau,
            prior_knowledge: self.prior_knowledge,
            scoring: match self.scoring {
                ScoringArg::Measurement => TestScoring::PerMeasurement,
                ScoringArg::Window => TestScoring::PerWindow,
            },
            seed: self.train.seed,
            train_opts: self.train.train_options(),
        }
    }
}

#[derive(Args, Debug)]
struct CrossvalArgs {
    #[command(flatten)]
    exp: ExperimentFlags,
    /// Directory for report.json, summary.txt and run.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StudyKind {
    /// Fraction of training houses kept.
    Size,
    /// Sampling rate in Hz.
    Freq,
    /// Test window start in samples.
    Phase,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(value_enum)]
    kind: StudyKind,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[command(flatten)]
    exp: ExperimentFlags,
    /// Directory for sweep.csv, sweep.json and run.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, env = "APPLID_DATA_DIR")]
    data: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Model directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// A corpus directory, or one two-column CSV recording.
    #[arg(long)]
    input: PathBuf,
    /// Sample rate of a CSV input (Hz).
    #[arg(long)]
    sample_rate: Option<f64>,
    /// Grid frequency of a CSV input (Hz).
    #[arg(long)]
    grid_freq: Option<f64>,
    #[arg(long, value_enum, default_value = "weighted")]
    voting: VotingArg,
    /// Directory for predictions.json and run.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RerunArgs {
    /// run.json from an earlier run.
    manifest: PathBuf,
    /// Output directory (defaults to the recorded one).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(cli.command) {
        Ok(outcome) => {
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            if cli.strict && !outcome.warnings.is_empty() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
