//! Run configuration: a TOML file with one table per concern, overlaid by
//! command-line flags. Every field is optional; the accessor methods fill
//! defaults in place so the echoed file records exactly what ran.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use pingo::egnn::{DirectEgnnConfig, EgnnConfig};
use pingo::integrator::{IntegratorConfig, Variant};
use pingo::model::ModelSpec;
use pingo::physics::{GenerationConfig, SystemKind};
use pingo::tensor::HiddenActivation;
use pingo::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Declares an all-optional config table that doubles as a clap flag group,
/// with `overlay` copying every field the other side sets.
macro_rules! section {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident : $ty:ty),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            $(
                $(#[$fmeta])*
                #[arg(long)]
                #[serde(skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        impl $name {
            pub fn overlay(&mut self, other: &Self) {
                $(if other.$field.is_some() { self.$field = other.$field.clone(); })*
            }
        }
    };
}

section!(
    /// Synthetic dataset generation.
    GenerationSection {
        /// Particle system: gravity or charged
        system: SystemKind,
        /// Particles per system
        n_bodies: usize,
        /// Training trajectories
        n_train: usize,
        /// Validation trajectories
        n_valid: usize,
        /// Test trajectories
        n_test: usize,
        /// Ground-truth integration steps per trajectory
        steps: usize,
        /// Keep every k-th ground-truth state
        stride: usize,
        /// Ground-truth step size
        dt: f64,
        /// Plummer softening length (default depends on the system)
        softening: f64,
        /// Interaction constant
        strength: f64,
        /// Resample trajectories whose positions exceed this radius
        position_cap: f64,
    }
);

section!(
    /// Model architecture and integrator.
    ModelSection {
        /// Model family: pingo or direct
        model: ModelKind,
        /// PINGO derivative order: second-order or first-order
        variant: Variant,
        /// Integrator steps per training horizon
        tau: usize,
        /// Training horizon in model time
        horizon: f64,
        /// Hidden width of every MLP
        hidden_dim: usize,
        /// Graph layers per network evaluation
        layers: usize,
        /// Hidden activation: silu, relu, tanh or identity
        activation: HiddenActivation,
        /// Carry node embeddings across integrator steps
        persistent_h: bool,
    }
);

section!(
    /// Optimisation.
    TrainingSection {
        /// Training epochs
        epochs: usize,
        /// Adam learning rate
        lr: f64,
        /// Systems per minibatch
        batch_size: usize,
        /// Decoupled weight decay
        weight_decay: f64,
        /// Stop after this many epochs without a new best validation MSE (0 disables)
        patience: usize,
    }
);

/// Evaluation settings. Flags are declared per `eval` subcommand; the config
/// table accepts all of them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizons: Option<List<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fractions: Option<List<Fraction>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub windows: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dts: Option<List<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taus: Option<List<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<List<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transforms: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transform_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_systems: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_separation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
}

/// Flags shared by every command.
#[derive(Args, Clone, Debug, Default)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for all outputs (created if missing)
    #[arg(long, global = true, env = "PINGO_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
    /// Global seed for data, initialisation and shuffling
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Dataset directory read by training and evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Checkpoint file, or a training directory holding `best.ckpt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub generation: GenerationSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Starts from the config file (if any) and applies the global flags.
    pub fn from_globals(globals: &GlobalArgs) -> Result<Self, CliError> {
        let mut cfg = match &globals.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if globals.seed.is_some() {
            cfg.seed = globals.seed;
        }
        if globals.output_dir.is_some() {
            cfg.output_dir = globals.output_dir.clone();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&mut self) -> u64 {
        *self.seed.get_or_insert(0)
    }

    pub fn output_dir(&mut self) -> PathBuf {
        self.output_dir.get_or_insert_with(|| PathBuf::from("pingo-out")).clone()
    }

    pub fn data_dir(&self) -> Result<PathBuf, CliError> {
        self.data
            .clone()
            .ok_or_else(|| CliError::Usage("a dataset directory is required (--data or `data` in the config)".into()))
    }

    pub fn checkpoint_path(&self) -> Result<PathBuf, CliError> {
        let p = self.checkpoint.clone().ok_or_else(|| {
            CliError::Usage("a checkpoint is required (--checkpoint or `checkpoint` in the config)".into())
        })?;
        Ok(if p.is_dir() { p.join(pingo::training::BEST_CHECKPOINT) } else { p })
    }

    pub fn generation_config(&mut self) -> GenerationConfig {
        let seed = self.seed();
        let g = &mut self.generation;
        let system = *g.system.get_or_insert(SystemKind::Gravity);
        let mut c = GenerationConfig::new(system, *g.n_bodies.get_or_insert(5));
        c.n_train = *g.n_train.get_or_insert(c.n_train);
        c.n_valid = *g.n_valid.get_or_insert(c.n_valid);
        c.n_test = *g.n_test.get_or_insert(c.n_test);
        c.total_steps = *g.steps.get_or_insert(c.total_steps);
        c.stride = *g.stride.get_or_insert(c.stride);
        c.dt = *g.dt.get_or_insert(c.dt);
        c.softening = *g.softening.get_or_insert(c.softening);
        c.interaction_strength = *g.strength.get_or_insert(c.interaction_strength);
        c.position_cap = *g.position_cap.get_or_insert(c.position_cap);
        c.seed = seed;
        c
    }

    pub fn model_spec(&mut self, d_node: usize) -> Result<ModelSpec, CliError> {
        let m = &mut self.model;
        let kind = *m.model.get_or_insert(ModelKind::Pingo);
        let hidden = *m.hidden_dim.get_or_insert(64);
        let layers = *m.layers.get_or_insert(8);
        let activation = *m.activation.get_or_insert(HiddenActivation::Silu);
        let horizon = *m.horizon.get_or_insert(1.0);
        let spec = match kind {
            ModelKind::Pingo => {
                let mut backbone = EgnnConfig::new(d_node, hidden, layers, activation);
                backbone.persistent_h = *m.persistent_h.get_or_insert(false);
                ModelSpec::Pingo {
                    backbone,
                    integrator: IntegratorConfig::new(*m.tau.get_or_insert(8), horizon)?,
                    variant: *m.variant.get_or_insert(Variant::SecondOrder),
                }
            }
            ModelKind::Direct => ModelSpec::Direct {
                network: DirectEgnnConfig {
                    n_layers: layers,
                    hidden_dim: hidden,
                    d_node,
                    activation,
                },
                horizon,
            },
        };
        Ok(spec)
    }

    pub fn train_config(&mut self) -> TrainConfig {
        let seed = self.seed();
        let t = &mut self.training;
        let d = TrainConfig::default();
        let patience = *t.patience.get_or_insert(d.patience.unwrap_or(0));
        TrainConfig {
            batch_size: *t.batch_size.get_or_insert(d.batch_size),
            epochs: *t.epochs.get_or_insert(d.epochs),
            lr: *t.lr.get_or_insert(d.lr),
            weight_decay: *t.weight_decay.get_or_insert(d.weight_decay),
            seed,
            patience: (patience > 0).then_some(patience),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pingo,
    Direct,
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pingo" => Ok(ModelKind::Pingo),
            "direct" => Ok(ModelKind::Direct),
            other => Err(format!("unknown model '{other}' (expected pingo or direct)")),
        }
    }
}

/// Comma-separated on the command line, an array in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|x| x.trim().parse::<T>().map_err(|e| format!("'{x}': {e}")))
            .collect::<Result<Vec<T>, String>>()
            .map(List)
    }
}

/// A fraction `num/den` of the training horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Fraction {
    pub num: usize,
    pub den: usize,
}

impl FromStr for Fraction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (n, d) = s.split_once('/').unwrap_or((s, "1"));
        let num = n.trim().parse().map_err(|_| format!("bad fraction '{s}'"))?;
        let den: usize = d.trim().parse().map_err(|_| format!("bad fraction '{s}'"))?;
        if den == 0 || num > den {
            return Err(format!("fraction '{s}' must lie in [0, 1] with a positive denominator"));
        }
        Ok(Fraction { num, den })
    }
}

impl TryFrom<String> for Fraction {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Fraction> for String {
    fn from(f: Fraction) -> String {
        format!("{}/{}", f.num, f.den)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips() {
        let mut cfg = RunConfig {
            data: Some("d".into()),
            ..RunConfig::default()
        };
        cfg.generation_config();
        cfg.model_spec(1).unwrap();
        cfg.train_config();
        cfg.evaluation.fractions = Some("1/4,1/2".parse().unwrap());
        cfg.evaluation.dts = Some("0.2,0.1".parse().unwrap());
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flags_win_over_the_file() {
        let mut file: RunConfig = toml::from_str("[model]\ntau = 4\nhidden_dim = 16\n").unwrap();
        let flags = ModelSection {
            tau: Some(2),
            ..ModelSection::default()
        };
        file.model.overlay(&flags);
        assert_eq!((file.model.tau, file.model.hidden_dim), (Some(2), Some(16)));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\ntua = 4\n").is_err());
    }

    #[test]
    fn fractions_parse() {
        assert_eq!("3/4".parse::<Fraction>().unwrap(), Fraction { num: 3, den: 4 });
        assert_eq!("1".parse::<Fraction>().unwrap(), Fraction { num: 1, den: 1 });
        assert!("5/4".parse::<Fraction>().is_err());
        assert!("1/0".parse::<Fraction>().is_err());
    }
}
