//! Model specifications, checkpoints, and the common prediction interface
//! used by evaluation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::egnn::{DirectEgnn, DirectEgnnConfig, Egnn, EgnnConfig, GraphBatch};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::integrator::{intermediate_at, IntegratorConfig, PingoModel, Prediction, Variant};
use crate::physics::{accel_at, symplectic_euler_step, ForceLaw, SystemState};
use crate::tensor::{no_grad, read_checkpoint, write_checkpoint, Checkpoint, Tensor};

/// Systems evaluated together in one forward pass.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Pingo {
        backbone: EgnnConfig,
        integrator: IntegratorConfig,
        variant: Variant,
    },
    Direct {
        network: DirectEgnnConfig,
        horizon: f64,
    },
}

impl ModelSpec {
    pub fn horizon(&self) -> f64 {
        match self {
            ModelSpec::Pingo { integrator, .. } => integrator.horizon,
            ModelSpec::Direct { horizon, .. } => *horizon,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DirectModel {
    pub network: DirectEgnn,
    pub horizon: f64,
}

#[derive(Clone, Debug)]
pub enum Model {
    Pingo(PingoModel),
    Direct(DirectModel),
}

impl Model {
    /// Freshly initialized parameters drawn from `seed`.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match spec {
            ModelSpec::Pingo {
                backbone,
                integrator,
                variant,
            } => Model::Pingo(PingoModel::new(Egnn::new(backbone, &mut rng)?, *integrator, *variant)?),
            ModelSpec::Direct { network, horizon } => {
                if !(horizon.is_finite() && *horizon > 0.0) {
                    return Err(Error::config(format!("horizon must be positive, got {horizon}")));
                }
                Model::Direct(DirectModel {
                    network: DirectEgnn::new(network, &mut rng)?,
                    horizon: *horizon,
                })
            }
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Pingo(m) => ModelSpec::Pingo {
                backbone: m.backbone.config.clone(),
                integrator: m.integrator,
                variant: m.variant,
            },
            Model::Direct(m) => ModelSpec::Direct {
                network: m.network.config.clone(),
                horizon: m.horizon,
            },
        }
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        match self {
            Model::Pingo(m) => m.backbone.parameters(),
            Model::Direct(m) => m.network.parameters(),
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Model::Pingo(m) => m.integrator.horizon,
            Model::Direct(m) => m.horizon,
        }
    }

    /// Differentiable positions one training horizon after `(q0, v0)`.
    pub fn predict_positions(&self, batch: &GraphBatch, q0: &Tensor, v0: &Tensor) -> Result<Tensor> {
        match self {
            Model::Pingo(m) => {
                let mut path = m.path_tensors(batch, q0, v0, m.integrator.tau, false)?;
                Ok(path.pop().expect("path has snapshots").0)
            }
            Model::Direct(m) => {
                let mut out = m.network.forward(batch, q0, v0, m.horizon)?;
                Ok(out.positions.pop().expect("at least one layer"))
            }
        }
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.spec() })
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut meta = self.metadata();
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        Checkpoint::from_parameters(&self.parameters(), meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_value(
            ckpt.metadata
                .get("model")
                .cloned()
                .ok_or_else(|| Error::config("checkpoint metadata has no model specification"))?,
        )?;
        let model = Model::new(&spec, 0)?;
        ckpt.load_into(&model.parameters())?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint(serde_json::Value::Null))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

/// Anything that maps system states to states one horizon later.
pub trait Predictor {
    fn name(&self) -> String;

    /// Predicted positions (and velocities, if the method produces them)
    /// after `horizon`, one entry per input system.
    fn predict(&self, states: &[&SystemState], horizon: f64) -> Result<Vec<Prediction>>;

    /// Positions at `num/den` of `horizon` for each requested fraction,
    /// indexed `[fraction][system]`.
    fn intermediate(
        &self,
        states: &[&SystemState],
        horizon: f64,
        fractions: &[(usize, usize)],
    ) -> Result<Vec<Vec<Vec<Vec3>>>>;
}

fn chunked<T>(
    states: &[&SystemState],
    mut f: impl FnMut(&[&SystemState]) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(states.len());
    for chunk in states.chunks(EVAL_CHUNK) {
        out.extend(f(chunk)?);
    }
    Ok(out)
}

fn transpose<T>(per_system: Vec<Vec<T>>, n_fractions: usize) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = (0..n_fractions).map(|_| Vec::with_capacity(per_system.len())).collect();
    for row in per_system {
        for (slot, x) in out.iter_mut().zip(row) {
            slot.push(x);
        }
    }
    out
}

impl Predictor for PingoModel {
    fn name(&self) -> String {
        match self.variant {
            Variant::SecondOrder => format!("pingo(tau={})", self.integrator.tau),
            Variant::FirstOrder => format!("pingo-1st(tau={})", self.integrator.tau),
        }
    }

    fn predict(&self, states: &[&SystemState], horizon: f64) -> Result<Vec<Prediction>> {
        chunked(states, |c| {
            Ok(self
                .forward_batch(c, horizon, false)?
                .into_iter()
                .map(|p| Prediction {
                    positions: p.final_positions().to_vec(),
                    velocities: Some(p.final_velocities().to_vec()),
                })
                .collect())
        })
    }

    fn intermediate(
        &self,
        states: &[&SystemState],
        horizon: f64,
        fractions: &[(usize, usize)],
    ) -> Result<Vec<Vec<Vec<Vec3>>>> {
        let per_system = chunked(states, |c| {
            self.forward_batch(c, horizon, false)?
                .iter()
                .map(|p| {
                    fractions
                        .iter()
                        .map(|&(n, d)| Ok(intermediate_at(p, n, d)?.0.to_vec()))
                        .collect::<Result<Vec<_>>>()
                })
                .collect()
        })?;
        Ok(transpose(per_system, fractions.len()))
    }
}

impl DirectModel {
    fn forward_positions(&self, states: &[&SystemState], horizon: f64) -> Result<(GraphBatch, Vec<Tensor>)> {
        no_grad(|| {
            let batch = GraphBatch::from_states(states)?;
            let q0 = GraphBatch::positions(states)?;
            let v0 = GraphBatch::velocities(states)?;
            let out = self.network.forward(&batch, &q0, &v0, horizon)?;
            Ok((batch, out.positions))
        })
    }
}

impl Predictor for DirectModel {
    fn name(&self) -> String {
        format!("egnn(layers={})", self.network.config.n_layers)
    }

    /// Position-only: rollout substitutes finite-difference velocities.
    fn predict(&self, states: &[&SystemState], horizon: f64) -> Result<Vec<Prediction>> {
        chunked(states, |c| {
            let (batch, positions) = self.forward_positions(c, horizon)?;
            let last = positions.last().expect("at least one layer").to_vec();
            Ok(batch
                .split_rows(&last)
                .into_iter()
                .map(|positions| Prediction {
                    positions,
                    velocities: None,
                })
                .collect())
        })
    }

    /// Reads the positions after layer `round(fraction * depth)`.
    fn intermediate(
        &self,
        states: &[&SystemState],
        horizon: f64,
        fractions: &[(usize, usize)],
    ) -> Result<Vec<Vec<Vec<Vec3>>>> {
        let depth = self.network.config.n_layers;
        let layer_of = |n: usize, d: usize| -> Result<usize> {
            if d == 0 || n > d {
                return Err(Error::Fraction { num: n, den: d, tau: depth });
            }
            Ok((n as f64 / d as f64 * depth as f64).round() as usize)
        };
        let layers = fractions
            .iter()
            .map(|&(n, d)| layer_of(n, d))
            .collect::<Result<Vec<_>>>()?;
        let per_system = chunked(states, |c| {
            let (batch, positions) = self.forward_positions(c, horizon)?;
            let split: Vec<Vec<Vec<Vec3>>> = layers.iter().map(|&l| batch.split_rows(&positions[l].data())).collect();
            Ok((0..c.len())
                .map(|s| split.iter().map(|f| f[s].clone()).collect::<Vec<_>>())
                .collect::<Vec<_>>())
        })?;
        Ok(transpose(per_system, fractions.len()))
    }
}

impl Predictor for Model {
    fn name(&self) -> String {
        match self {
            Model::Pingo(m) => m.name(),
            Model::Direct(m) => m.name(),
        }
    }

    fn predict(&self, states: &[&SystemState], horizon: f64) -> Result<Vec<Prediction>> {
        match self {
            Model::Pingo(m) => m.predict(states, horizon),
            Model::Direct(m) => m.predict(states, horizon),
        }
    }

    fn intermediate(
        &self,
        states: &[&SystemState],
        horizon: f64,
        fractions: &[(usize, usize)],
    ) -> Result<Vec<Vec<Vec<Vec3>>>> {
        match self {
            Model::Pingo(m) => m.intermediate(states, horizon, fractions),
            Model::Direct(m) => m.intermediate(states, horizon, fractions),
        }
    }
}

/// Constant-velocity extrapolation `q + v t`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LinearBaseline;

impl Predictor for LinearBaseline {
    fn name(&self) -> String {
        "linear".into()
    }

    fn predict(&self, states: &[&SystemState], horizon: f64) -> Result<Vec<Prediction>> {
        Ok(states
            .iter()
            .map(|s| Prediction {
                positions: extrapolate(s, horizon),
                velocities: Some(s.velocities.clone()),
            })
            .collect())
    }

    fn intermediate(
        &self,
        states: &[&SystemState],
        horizon: f64,
        fractions: &[(usize, usize)],
    ) -> Result<Vec<Vec<Vec<Vec3>>>> {
        fractions
            .iter()
            .map(|&(n, d)| {
                if d == 0 || n > d {
                    return Err(Error::Fraction { num: n, den: d, tau: 1 });
                }
                let t = horizon * n as f64 / d as f64;
                Ok(states.iter().map(|s| extrapolate(s, t)).collect())
            })
            .collect()
    }
}

fn extrapolate(s: &SystemState, t: f64) -> Vec<Vec3> {
    s.positions
        .iter()
        .zip(&s.velocities)
        .map(|(&q, &v)| geometry::add(q, geometry::scale(v, t)))
        .collect()
}

/// Symplectic Euler with the true force law at a fixed step.
#[derive(Clone, Copy, Debug)]
pub struct NumericalSolver {
    pub law: ForceLaw,
    pub dt: f64,
}

impl NumericalSolver {
    fn steps(&self, horizon: f64) -> Result<usize> {
        IntegratorConfig {
            tau: 1,
            horizon: self.dt,
        }
        .steps_for(horizon)
    }

    /// States after each of `steps` steps, starting with `s` itself.
    pub fn path(&self, s: &SystemState, steps: usize) -> Result<Vec<SystemState>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(s.clone());
        for _ in 0..steps {
            let cur = out.last().expect("non-empty");
            let a = accel_at(&cur.positions, &cur.graph, &self.law)?;
            out.push(symplectic_euler_step(cur, &a, self.dt));
        }
        Ok(out)
    }
}

impl Predictor for NumericalSolver {
    fn name(&self) -> String {
        format!("euler(dt={})", self.dt)
    }

    fn predict(&self, states: &[&SystemState], horizon: f64) -> Result<Vec<Prediction>> {
        let steps = self.steps(horizon)?;
        states
            .iter()
            .map(|s| {
                let end = self.path(s, steps)?.pop().expect("non-empty");
                Ok(Prediction {
                    positions: end.positions,
                    velocities: Some(end.velocities),
                })
            })
            .collect()
    }

    fn intermediate(
        &self,
        states: &[&SystemState],
        horizon: f64,
        fractions: &[(usize, usize)],
    ) -> Result<Vec<Vec<Vec<Vec3>>>> {
        let steps = self.steps(horizon)?;
        let paths = states
            .iter()
            .map(|s| self.path(s, steps))
            .collect::<Result<Vec<_>>>()?;
        fractions
            .iter()
            .map(|&(n, d)| {
                if d == 0 || n > d || (n * steps) % d != 0 {
                    return Err(Error::Fraction { num: n, den: d, tau: steps });
                }
                Ok(paths.iter().map(|p| p[n * steps / d].positions.clone()).collect())
            })
            .collect()
    }
}
