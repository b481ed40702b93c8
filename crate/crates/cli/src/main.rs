//! `qdist` — corpus generation, training, evaluation, ablations, and
//! hyperparameter sweeps for the memory-augmented Q-profile regressor.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/config mismatch,
//! 4 numerical abort.

mod commands;
mod runspec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qdist_core::synth::SynthSpec;
use qdist_core::Error;

use commands::{
    cmd_ablate, cmd_eval, cmd_gen, cmd_sweep, cmd_train, EvalParams, GenParams, MultiRunParams,
    Partition, SweepAxis, SweepParams, TrainParams,
};
use runspec::{ablation_preset, RunSpec};

#[derive(Parser)]
#[command(name = "qdist", version, about = "Memory-augmented Q-profile regression pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shot corpus plus a contiguous train/test split.
    Gen(GenArgs),
    /// Train a model on a corpus; writes metrics, report, and checkpoint.
    Train(TrainArgs),
    /// Evaluate a finished run's best checkpoint on a corpus partition.
    Eval(EvalArgs),
    /// Train the five component-analysis configurations and tabulate MSE.
    Ablate(AblateArgs),
    /// Sweep one architecture axis (hidden size, heads, or layers).
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Corpus output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 22)]
    shots: usize,
    /// Samples per shot.
    #[arg(long, default_value_t = 260)]
    samples: usize,
    #[arg(long = "in-dim", default_value_t = 32)]
    in_dim: usize,
    #[arg(long = "out-dim", default_value_t = 17)]
    out_dim: usize,
    /// Latent state dimension of the shot process.
    #[arg(long, default_value_t = 4)]
    latent: usize,
    /// AR(1) coefficient of the latent state, in [0, 1).
    #[arg(long, default_value_t = 0.95)]
    rho: f64,
    #[arg(long = "obs-noise", default_value_t = 1.0)]
    obs_noise: f64,
    #[arg(long = "dt-ms", default_value_t = 10.0)]
    dt_ms: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of each shot carved out as one contiguous test block.
    #[arg(long = "test-ratio", default_value_t = 0.1)]
    test_ratio: f64,
    /// Leading indices the test block avoids (history guard).
    #[arg(long, default_value_t = 4)]
    guard: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

/// Model and training overrides shared by train/ablate/sweep.
#[derive(Args, Clone)]
struct CommonRunArgs {
    /// JSON run spec; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory (overrides the config file).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Split file (defaults to <corpus>/split.json).
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "feat-dim")]
    feat_dim: Option<usize>,
    #[arg(long = "n-history")]
    n_history: Option<usize>,
    #[arg(long = "global-tokens")]
    global_tokens: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long = "n-blocks")]
    n_blocks: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "gap-ms")]
    gap_ms: Option<f64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl CommonRunArgs {
    /// defaults → config file → flags.
    fn build_spec(&self, ablation: Option<&str>) -> Result<RunSpec, Error> {
        let mut spec = RunSpec::default();
        if let Some(path) = &self.config {
            spec = RunSpec::load(path)?;
        }
        let mut flags = RunSpec::default();
        flags.data.corpus = self.corpus.clone();
        flags.data.split = self.split.clone();
        flags.data.gap_ms = self.gap_ms;
        flags.model.feat_dim = self.feat_dim;
        flags.model.n_history = self.n_history;
        flags.model.n_global_tokens = self.global_tokens;
        flags.model.n_heads = self.heads;
        flags.model.n_layers = self.layers;
        flags.model.n_blocks = self.n_blocks;
        flags.model.beta = self.beta;
        flags.train.seed = self.seed;
        flags.train.epochs = self.epochs;
        flags.train.lr = self.lr;
        flags.train.batch_size = self.batch_size;
        if let Some(name) = ablation {
            flags.model.ablation = Some(ablation_preset(name)?);
        }
        spec.overlay(&flags);
        Ok(spec)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run output directory.
    #[arg(long)]
    out: PathBuf,
    /// Ablation preset: mlp, hopfield, hopfield_pos, mlp_lparam, full.
    #[arg(long)]
    ablation: Option<String>,
    #[command(flatten)]
    common: CommonRunArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// A finished run directory (resolved_config.json + checkpoint/).
    #[arg(long)]
    run: PathBuf,
    /// Evaluate against a different corpus than the run recorded.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PartitionArg::Test)]
    partition: PartitionArg,
    #[arg(long = "batch-size", default_value_t = 16)]
    batch_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Train,
    Test,
}

#[derive(Args)]
struct AblateArgs {
    /// Table output directory (one run subdirectory per row).
    #[arg(long)]
    out: PathBuf,
    /// Run the five rows concurrently (each run stays deterministic).
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    common: CommonRunArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Hidden,
    Heads,
    Layers,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    out: PathBuf,
    /// Architecture axis to sweep.
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated values, e.g. 256,512,1024.
    #[arg(long)]
    values: String,
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    common: CommonRunArgs,
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Gen(a) => {
            let spec = SynthSpec {
                n_shots: a.shots,
                samples_per_shot: a.samples,
                in_dim: a.in_dim,
                out_dim: a.out_dim,
                latent_dim: a.latent,
                rho: a.rho,
                obs_noise: a.obs_noise,
                dt_ms: a.dt_ms,
                seed: a.seed,
            };
            cmd_gen(&GenParams {
                out: a.out,
                spec,
                test_ratio: a.test_ratio,
                guard: a.guard,
                force: a.force,
            })?;
        }
        Cmd::Train(a) => {
            let spec = a.common.build_spec(a.ablation.as_deref())?;
            cmd_train(&TrainParams { spec, out: a.out, force: a.common.force })?;
        }
        Cmd::Eval(a) => {
            cmd_eval(&EvalParams {
                run: a.run,
                corpus: a.corpus,
                partition: match a.partition {
                    PartitionArg::Train => Partition::Train,
                    PartitionArg::Test => Partition::Test,
                },
                batch_size: a.batch_size,
            })?;
        }
        Cmd::Ablate(a) => {
            let spec = a.common.build_spec(None)?;
            cmd_ablate(&MultiRunParams {
                spec,
                out: a.out,
                force: a.common.force,
                parallel: a.parallel,
            })?;
        }
        Cmd::Sweep(a) => {
            let values: Vec<usize> = a
                .values
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| CliError::Usage(format!("bad sweep value {s:?}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            if values.is_empty() {
                return Err(CliError::Usage("sweep requires at least one value".into()));
            }
            let spec = a.common.build_spec(None)?;
            cmd_sweep(&SweepParams {
                base: MultiRunParams {
                    spec,
                    out: a.out,
                    force: a.common.force,
                    parallel: a.parallel,
                },
                axis: match a.axis {
                    AxisArg::Hidden => SweepAxis::Hidden,
                    AxisArg::Heads => SweepAxis::Heads,
                    AxisArg::Layers => SweepAxis::Layers,
                },
                values,
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(4),
                _ => ExitCode::from(3),
            }
        }
    }
}
