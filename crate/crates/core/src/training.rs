//! Mini-batch training on single-window position targets.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::egnn::GraphBatch;
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::model::Model;
use crate::physics::{SystemState, Trajectory};
use crate::tensor::{no_grad, read_checkpoint, write_checkpoint, AdamState, Checkpoint, Tensor};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop after this many epochs without a new best validation MSE.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            epochs: 1000,
            lr: 5e-4,
            weight_decay: 1e-10,
            seed: 0,
            patience: Some(50),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Input state and the positions one horizon later.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub input: SystemState,
    pub target: Vec<Vec3>,
    pub target_velocities: Option<Vec<Vec3>>,
}

/// First frame of each trajectory paired with the frame `horizon` later.
pub fn make_samples(trajectories: &[Trajectory], horizon: f64) -> Result<Vec<TrainSample>> {
    trajectories
        .iter()
        .map(|t| {
            let k = t.frame_at(horizon).ok_or_else(|| Error::Horizon {
                horizon,
                reason: format!(
                    "trajectories store frames every {} up to {}",
                    t.frame_dt(),
                    t.frame_dt() * (t.states.len() - 1) as f64
                ),
            })?;
            Ok(TrainSample {
                input: t.states[0].clone(),
                target: t.states[k].positions.clone(),
                target_velocities: Some(t.states[k].velocities.clone()),
            })
        })
        .collect()
}

/// Mean squared error over every particle coordinate.
pub fn position_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "position_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    Ok(pred.sub(target)?.square().mean())
}

/// What the trainer needs from a model.
pub trait Trainable {
    fn parameters(&self) -> Vec<(String, Tensor)>;
    fn horizon(&self) -> f64;
    /// Differentiable positions one horizon after `(q0, v0)`, shape `[n, 3]`.
    fn predict_positions(&self, batch: &GraphBatch, q0: &Tensor, v0: &Tensor) -> Result<Tensor>;
    fn metadata(&self) -> serde_json::Value;
}

impl Trainable for Model {
    fn parameters(&self) -> Vec<(String, Tensor)> {
        Model::parameters(self)
    }

    fn horizon(&self) -> f64 {
        Model::horizon(self)
    }

    fn predict_positions(&self, batch: &GraphBatch, q0: &Tensor, v0: &Tensor) -> Result<Tensor> {
        Model::predict_positions(self, batch, q0, v0)
    }

    fn metadata(&self) -> serde_json::Value {
        Model::metadata(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub valid_mse: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Records of the epochs run by this call.
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_mse: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainerState {
    next_epoch: usize,
    best_epoch: usize,
    best_valid_mse: Option<f64>,
    epochs_since_best: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
}

struct Batch {
    graph: GraphBatch,
    q0: Tensor,
    v0: Tensor,
    target: Tensor,
    len: usize,
}

fn make_batch(samples: &[&TrainSample]) -> Result<Batch> {
    let states: Vec<&SystemState> = samples.iter().map(|s| &s.input).collect();
    let target: Vec<f64> = samples.iter().flat_map(|s| geometry::flatten(&s.target)).collect();
    let n = target.len() / 3;
    Ok(Batch {
        graph: GraphBatch::from_states(&states)?,
        q0: GraphBatch::positions(&states)?,
        v0: GraphBatch::velocities(&states)?,
        target: Tensor::from_vec(&[n, 3], target)?,
        len: samples.len(),
    })
}

fn snapshot(params: &[(String, Tensor)]) -> Vec<Vec<f64>> {
    params.iter().map(|(_, t)| t.to_vec()).collect()
}

fn restore(params: &[(String, Tensor)], values: &[Vec<f64>]) -> Result<()> {
    for ((_, t), v) in params.iter().zip(values) {
        t.set_data(v)?;
    }
    Ok(())
}

/// Per-sample position MSE averaged over `samples`, without gradients.
pub fn evaluate_mse<M: Trainable>(model: &M, samples: &[TrainSample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("cannot evaluate on an empty split"));
    }
    no_grad(|| {
        let mut total = 0.0;
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&TrainSample> = chunk.iter().collect();
            let b = make_batch(&refs)?;
            let pred = model.predict_positions(&b.graph, &b.q0, &b.v0)?;
            total += position_loss(&pred, &b.target)?.item() * b.len as f64;
        }
        Ok(total / samples.len() as f64)
    })
}

/// Trains from the model's current parameters. With `out_dir`, writes the
/// JSON-lines log, the best checkpoint and a resumable last checkpoint.
pub fn train<M: Trainable>(
    model: &M,
    train_set: &[TrainSample],
    valid_set: &[TrainSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    let adam = AdamState::new(config.lr).with_weight_decay(config.weight_decay);
    let state = TrainerState {
        next_epoch: 1,
        best_epoch: 0,
        best_valid_mse: None,
        epochs_since_best: 0,
        lr: adam.lr,
        beta1: adam.beta1,
        beta2: adam.beta2,
        eps: adam.eps,
        weight_decay: adam.weight_decay,
        step_count: 0,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join(LOG_FILE);
        File::create(&log).map_err(|e| Error::io(&log, e))?;
    }
    let best = snapshot(&model.parameters());
    run(model, train_set, valid_set, config, out_dir, adam, state, best)
}

/// Continues a run from `out_dir/last.ckpt` up to `config.epochs` total
/// epochs. Epoch numbering and optimizer moments carry over.
pub fn resume<M: Trainable>(
    model: &M,
    train_set: &[TrainSample],
    valid_set: &[TrainSample],
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    config.validate()?;
    let ckpt = read_checkpoint(&out_dir.join(LAST_CHECKPOINT))?;
    let params = model.parameters();
    ckpt.load_into(&params)?;
    let state: TrainerState = serde_json::from_value(
        ckpt.metadata
            .get("trainer")
            .cloned()
            .ok_or_else(|| Error::config("last checkpoint has no trainer state"))?,
    )?;
    let fetch = |prefix: &str| -> Result<Vec<Vec<f64>>> {
        params
            .iter()
            .map(|(n, _)| {
                ckpt.get(&format!("{prefix}/{n}"))
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::config(format!("last checkpoint is missing {prefix}/{n}")))
            })
            .collect()
    };
    let best = fetch("best")?;
    let mut adam = AdamState::new(state.lr).with_weight_decay(state.weight_decay);
    adam.beta1 = state.beta1;
    adam.beta2 = state.beta2;
    adam.eps = state.eps;
    adam.step_count = state.step_count;
    if state.step_count > 0 {
        adam.m = fetch("adam.m")?;
        adam.v = fetch("adam.v")?;
    }
    run(model, train_set, valid_set, config, Some(out_dir), adam, state, best)
}

#[allow(clippy::too_many_arguments)]
fn run<M: Trainable>(
    model: &M,
    train_set: &[TrainSample],
    valid_set: &[TrainSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut adam: AdamState,
    mut state: TrainerState,
    mut best: Vec<Vec<f64>>,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let params = model.parameters();
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut log_writer = match out_dir {
        Some(dir) => {
            let p = dir.join(LOG_FILE);
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Some((BufWriter::new(f), p))
        }
        None => None,
    };
    let start = Instant::now();
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    while state.next_epoch <= config.epochs {
        if let Some(p) = config.patience {
            if state.best_valid_mse.is_some() && state.epochs_since_best >= p {
                stopped_early = true;
                break;
            }
        }
        let epoch = state.next_epoch;
        let epoch_start = snapshot(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&TrainSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = make_batch(&refs)?;
            let pred = model.predict_positions(&batch.graph, &batch.q0, &batch.v0)?;
            let loss = position_loss(&pred, &batch.target)?;
            let value = loss.item();
            if !value.is_finite() {
                restore(&params, &epoch_start)?;
                if let Some(dir) = out_dir {
                    let ckpt = Checkpoint::from_parameters(&params, model.metadata());
                    write_checkpoint(&dir.join(LAST_GOOD_CHECKPOINT), &ckpt)?;
                }
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss.backward()?;
            adam.step(&tensors)?;
            loss_sum += value * batch.len as f64;
        }
        let train_mse = loss_sum / train_set.len() as f64;
        let valid_mse = evaluate_mse(model, valid_set, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_mse,
            valid_mse,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some((w, p)) = log_writer.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(record);
        if state.best_valid_mse.is_none_or(|b| valid_mse < b) {
            state.best_valid_mse = Some(valid_mse);
            state.best_epoch = epoch;
            state.epochs_since_best = 0;
            best = snapshot(&params);
            if let Some(dir) = out_dir {
                write_best(dir, model, &params, &best, &state)?;
            }
        } else {
            state.epochs_since_best += 1;
        }
        state.next_epoch += 1;
        state.step_count = adam.step_count;
        if let Some(dir) = out_dir {
            write_last(dir, model, &params, &best, &adam, &state)?;
        }
    }
    restore(&params, &best)?;
    let best_valid_mse = match state.best_valid_mse {
        Some(v) => v,
        None => evaluate_mse(model, valid_set, config.batch_size)?,
    };
    Ok(TrainReport {
        log,
        best_epoch: state.best_epoch,
        best_valid_mse,
        stopped_early,
    })
}

fn with_extra(model: &impl Trainable, key: &str, value: serde_json::Value) -> serde_json::Value {
    let mut meta = model.metadata();
    match meta.as_object_mut() {
        Some(m) => {
            m.insert(key.into(), value);
            meta
        }
        None => serde_json::json!({ "model": meta, key: value }),
    }
}

fn write_best(
    dir: &Path,
    model: &impl Trainable,
    params: &[(String, Tensor)],
    best: &[Vec<f64>],
    state: &TrainerState,
) -> Result<()> {
    let arrays = params
        .iter()
        .zip(best)
        .map(|((n, t), v)| (n.clone(), t.shape().to_vec(), v.clone()))
        .collect();
    let meta = with_extra(
        model,
        "selection",
        serde_json::json!({ "epoch": state.best_epoch, "valid_mse": state.best_valid_mse }),
    );
    write_checkpoint(&dir.join(BEST_CHECKPOINT), &Checkpoint { arrays, metadata: meta })
}

fn write_last(
    dir: &Path,
    model: &impl Trainable,
    params: &[(String, Tensor)],
    best: &[Vec<f64>],
    adam: &AdamState,
    state: &TrainerState,
) -> Result<()> {
    let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.to_vec()))
        .collect();
    for ((n, t), v) in params.iter().zip(best) {
        arrays.push((format!("best/{n}"), t.shape().to_vec(), v.clone()));
    }
    if adam.step_count > 0 {
        for (((n, t), m), v) in params.iter().zip(&adam.m).zip(&adam.v) {
            arrays.push((format!("adam.m/{n}"), t.shape().to_vec(), m.clone()));
            arrays.push((format!("adam.v/{n}"), t.shape().to_vec(), v.clone()));
        }
    }
    let meta = with_extra(model, "trainer", serde_json::to_value(state)?);
    write_checkpoint(&dir.join(LAST_CHECKPOINT), &Checkpoint { arrays, metadata: meta })
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn log_path(dir: &Path) -> PathBuf {
    dir.join(LOG_FILE)
}
