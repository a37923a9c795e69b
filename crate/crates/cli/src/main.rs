#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::{EvaluationSection, Fraction, GenerationSection, GlobalArgs, List, ModelSection, TrainingSection};

/// Learned N-body dynamics: data generation, training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "pingo", version, propagate_version = true)]
struct Cli {
    #[command(flatten)]
    globals: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic trajectory dataset into the output directory
    Gen(GenArgs),
    /// Train a model; writes checkpoints and a JSON-lines log
    Train(TrainArgs),
    /// Evaluate a model or the numerical reference
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write the predicted path of one test trajectory as CSV
    ExportTraj(ExportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    generation: GenerationSection,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset directory written by `gen`
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckpointArg {
    /// Checkpoint file, or a training directory holding best.ckpt
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    #[command(flatten)]
    model: ModelSection,
    #[command(flatten)]
    training: TrainingSection,
    /// Continue from last.ckpt in the output directory
    #[arg(long)]
    resume: bool,
}

/// Per-subcommand evaluation flags; each names a subset of the
/// `[evaluation]` table.
macro_rules! eval_flags {
    ($name:ident { $($(#[$fmeta:meta])* $field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Args, Debug)]
        struct $name {
            $(
                $(#[$fmeta])*
                #[arg(long)]
                $field: Option<$ty>,
            )*
        }

        impl $name {
            fn apply(&self, e: &mut EvaluationSection) {
                $(if self.$field.is_some() { e.$field = self.$field.clone(); })*
            }
        }
    };
}

eval_flags!(DirectFlags {
    /// Comma-separated prediction horizons
    horizons: List<f64>,
});

eval_flags!(IntermediateFlags {
    /// Full horizon the fractions refer to
    horizon: f64,
    /// Comma-separated fractions such as 1/4,1/2,3/4
    fractions: List<Fraction>,
});

eval_flags!(RolloutFlags {
    /// Number of rollout windows
    windows: usize,
    /// Model time per window (default: the model's horizon)
    window_time: f64,
});

eval_flags!(NumericalFlags {
    /// Comma-separated coarse step sizes
    dts: List<f64>,
    /// Number of rollout windows
    windows: usize,
    /// Model time per window
    window_time: f64,
});

eval_flags!(TauScanFlags {
    /// Comma-separated integrator step counts
    taus: List<usize>,
    /// Comma-separated training seeds
    seeds: List<u64>,
});

eval_flags!(EquivarianceFlags {
    /// Random orthogonal transforms plus translations to apply
    transforms: usize,
    /// Fail when the max relative deviation exceeds this
    threshold: f64,
    /// Seed of the transform stream
    transform_seed: u64,
});

eval_flags!(TruncationFlags {
    /// Comma-separated step sizes
    dts: List<f64>,
    /// Time span of the global error
    horizon: f64,
    /// Systems averaged per step size
    n_systems: usize,
    /// Minimum particle separation along the reference path
    min_separation: f64,
});

eval_flags!(ExportFlags {
    /// Test trajectory index
    index: usize,
    /// Number of rollout windows
    windows: usize,
});

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// MSE at one or more horizons
    Direct {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[command(flatten)]
        flags: DirectFlags,
    },
    /// MSE at fractions of the training horizon
    Intermediate {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[command(flatten)]
        flags: IntermediateFlags,
    },
    /// MSE per window of a multi-window rollout
    Rollout {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[command(flatten)]
        flags: RolloutFlags,
    },
    /// Rollout MSE of the true force at coarse step sizes
    Numerical {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        flags: NumericalFlags,
    },
    /// Train one model per (tau, seed) and report test MSE
    TauScan {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelSection,
        #[command(flatten)]
        training: TrainingSection,
        #[command(flatten)]
        flags: TauScanFlags,
    },
    /// Check that predictions commute with rotations, reflections and translations
    Equivariance {
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint to audit; without it a freshly initialised model is used
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        model: ModelSection,
        #[command(flatten)]
        flags: EquivarianceFlags,
    },
    /// Local and global error slopes of symplectic Euler with the true force
    Truncation {
        /// Particle system: gravity or charged
        #[arg(long)]
        system: Option<pingo::physics::SystemKind>,
        /// Particles per system
        #[arg(long)]
        n_bodies: Option<usize>,
        #[command(flatten)]
        flags: TruncationFlags,
    },
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArg,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[command(flatten)]
    flags: ExportFlags,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Divergence(String),
    Io(String),
    /// A check ran to completion and failed its threshold.
    Check(String),
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Internal(_) | CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Divergence(m) => write!(f, "numerical divergence: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<pingo::Error> for CliError {
    fn from(e: pingo::Error) -> Self {
        use pingo::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Fraction { .. } | E::Horizon { .. } => CliError::Usage(msg),
            E::Singularity { .. } | E::Integration { .. } | E::NonFinite { .. } | E::NonFiniteLoss { .. } => {
                CliError::Divergence(msg)
            }
            E::Io { .. } | E::Format { .. } | E::Json(_) => CliError::Io(msg),
            E::Shape { .. } | E::NonScalarRoot(_) | E::MissingGrad { .. } => CliError::Internal(msg),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.globals.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let mut cfg = config::RunConfig::from_globals(&cli.globals)?;
    let set_data = |cfg: &mut config::RunConfig, d: &DataArg| {
        if d.data.is_some() {
            cfg.data = d.data.clone();
        }
    };
    let set_ckpt = |cfg: &mut config::RunConfig, c: &Option<PathBuf>| {
        if c.is_some() {
            cfg.checkpoint = c.clone();
        }
    };
    match cli.command {
        Command::Gen(a) => {
            cfg.generation.overlay(&a.generation);
            commands::gen(cfg)
        }
        Command::Train(a) => {
            set_data(&mut cfg, &a.data);
            cfg.model.overlay(&a.model);
            cfg.training.overlay(&a.training);
            commands::train(cfg, a.resume)
        }
        Command::ExportTraj(a) => {
            set_data(&mut cfg, &a.data);
            set_ckpt(&mut cfg, &a.checkpoint.checkpoint);
            a.flags.apply(&mut cfg.evaluation);
            commands::export_traj(cfg)
        }
        Command::Eval(e) => match e {
            EvalCommand::Direct { data, checkpoint, flags } => {
                set_data(&mut cfg, &data);
                set_ckpt(&mut cfg, &checkpoint.checkpoint);
                flags.apply(&mut cfg.evaluation);
                commands::eval_direct(cfg)
            }
            EvalCommand::Intermediate { data, checkpoint, flags } => {
                set_data(&mut cfg, &data);
                set_ckpt(&mut cfg, &checkpoint.checkpoint);
                flags.apply(&mut cfg.evaluation);
                commands::eval_intermediate(cfg)
            }
            EvalCommand::Rollout { data, checkpoint, flags } => {
                set_data(&mut cfg, &data);
                set_ckpt(&mut cfg, &checkpoint.checkpoint);
                flags.apply(&mut cfg.evaluation);
                commands::eval_rollout(cfg)
            }
            EvalCommand::Numerical { data, flags } => {
                set_data(&mut cfg, &data);
                flags.apply(&mut cfg.evaluation);
                commands::eval_numerical(cfg)
            }
            EvalCommand::TauScan { data, model, training, flags } => {
                set_data(&mut cfg, &data);
                cfg.model.overlay(&model);
                cfg.training.overlay(&training);
                flags.apply(&mut cfg.evaluation);
                commands::eval_tau_scan(cfg)
            }
            EvalCommand::Equivariance { data, checkpoint, model, flags } => {
                set_data(&mut cfg, &data);
                set_ckpt(&mut cfg, &checkpoint);
                cfg.model.overlay(&model);
                flags.apply(&mut cfg.evaluation);
                commands::eval_equivariance(cfg)
            }
            EvalCommand::Truncation { system, n_bodies, flags } => {
                cfg.generation.overlay(&GenerationSection {
                    system,
                    n_bodies,
                    ..GenerationSection::default()
                });
                flags.apply(&mut cfg.evaluation);
                commands::eval_truncation(cfg)
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pingo: {e}");
            ExitCode::from(e.code())
        }
    }
}
