//! Learned symplectic Euler integration and multi-window rollout.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::egnn::{Egnn, GraphBatch};
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::physics::{accel_at, ForceLaw, ParticleGraph, SystemState};
use crate::tensor::{no_grad, Tensor};

/// Default position magnitude beyond which a rollout is flagged as diverged.
pub const DIVERGENCE_CAP: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// The backbone predicts accelerations.
    SecondOrder,
    /// The backbone output is used directly as the velocity.
    FirstOrder,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::SecondOrder => "second-order",
            Variant::FirstOrder => "first-order",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "second-order" => Ok(Variant::SecondOrder),
            "first-order" => Ok(Variant::FirstOrder),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected second-order or first-order)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub tau: usize,
    /// Model time covered by `tau` steps.
    pub horizon: f64,
}

impl IntegratorConfig {
    pub fn new(tau: usize, horizon: f64) -> Result<Self> {
        let c = IntegratorConfig { tau, horizon };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::config("tau must be at least 1"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::config(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.tau as f64
    }

    /// Number of steps of size `dt()` covering `horizon`.
    pub fn steps_for(&self, horizon: f64) -> Result<usize> {
        let s = horizon / self.dt();
        let r = s.round();
        if r < 1.0 || (s - r).abs() > 1e-9 * r.max(1.0) {
            return Err(Error::Horizon {
                horizon,
                reason: format!("not a positive multiple of the integrator step {}", self.dt()),
            });
        }
        Ok(r as usize)
    }
}

/// Runs `steps` integrator iterations from `(q0, v0)` and returns every
/// snapshot, starting with the inputs themselves.
///
/// Second order: `v' = v + f(q) dt`, then `q' = q + v' dt`.
/// First order: `v' = f(q)`, then `q' = q + v' dt`.
pub fn integrate<F>(
    q0: &Tensor,
    v0: &Tensor,
    dt: f64,
    steps: usize,
    variant: Variant,
    check_finite: bool,
    mut field: F,
) -> Result<Vec<(Tensor, Tensor)>>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut path = Vec::with_capacity(steps + 1);
    path.push((q0.clone(), v0.clone()));
    for k in 0..steps {
        let (q, v) = path.last().expect("non-empty");
        let f = field(q)?;
        let v1 = match variant {
            Variant::SecondOrder => v.add(&f.scale(dt))?,
            Variant::FirstOrder => f,
        };
        let q1 = q.add(&v1.scale(dt))?;
        if check_finite && !(all_finite(&q1) && all_finite(&v1)) {
            return Err(Error::NonFinite { iteration: k });
        }
        path.push((q1, v1));
    }
    Ok(path)
}

fn all_finite(t: &Tensor) -> bool {
    t.data().iter().all(|x| x.is_finite())
}

/// The true force law as a field over a stacked batch.
pub fn physics_field<'a>(
    graphs: &'a [&'a ParticleGraph],
    batch: &'a GraphBatch,
    law: &'a ForceLaw,
) -> impl FnMut(&Tensor) -> Result<Tensor> + 'a {
    move |q: &Tensor| {
        let rows = batch.split_rows(&q.data());
        let mut out = Vec::with_capacity(q.numel());
        for (pos, g) in rows.iter().zip(graphs) {
            out.extend(geometry::flatten(&accel_at(pos, g, law)?));
        }
        Tensor::from_vec(q.shape(), out)
    }
}

/// Snapshots `(q_k, v_k)` for `k = 0..=steps` of one system.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedPath {
    pub positions: Vec<Vec<Vec3>>,
    pub velocities: Vec<Vec<Vec3>>,
    pub dt: f64,
}

impl PredictedPath {
    /// Splits batched snapshot tensors into one path per system.
    pub fn from_batch(batch: &GraphBatch, snapshots: &[(Tensor, Tensor)], dt: f64) -> Vec<PredictedPath> {
        let mut paths: Vec<PredictedPath> = (0..batch.n_graphs())
            .map(|_| PredictedPath {
                positions: Vec::with_capacity(snapshots.len()),
                velocities: Vec::with_capacity(snapshots.len()),
                dt,
            })
            .collect();
        for (q, v) in snapshots {
            let qs = batch.split_rows(&q.data());
            let vs = batch.split_rows(&v.data());
            for ((p, q), v) in paths.iter_mut().zip(qs).zip(vs) {
                p.positions.push(q);
                p.velocities.push(v);
            }
        }
        paths
    }

    /// Number of integrator steps (`snapshots - 1`).
    pub fn steps(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn final_positions(&self) -> &[Vec3] {
        self.positions.last().expect("path has snapshots")
    }

    pub fn final_velocities(&self) -> &[Vec3] {
        self.velocities.last().expect("path has snapshots")
    }
}

/// Stored snapshot at `num/den` of the path. No re-integration.
pub fn intermediate_at(path: &PredictedPath, num: usize, den: usize) -> Result<(&[Vec3], &[Vec3])> {
    let tau = path.steps();
    if den == 0 || num > den || (num * tau) % den != 0 {
        return Err(Error::Fraction { num, den, tau });
    }
    let k = num * tau / den;
    Ok((&path.positions[k], &path.velocities[k]))
}

/// EGNN backbone with shared parameters across `tau` integrator steps.
#[derive(Clone, Debug)]
pub struct PingoModel {
    pub backbone: Egnn,
    pub integrator: IntegratorConfig,
    pub variant: Variant,
}

impl PingoModel {
    pub fn new(backbone: Egnn, integrator: IntegratorConfig, variant: Variant) -> Result<Self> {
        integrator.validate()?;
        Ok(PingoModel {
            backbone,
            integrator,
            variant,
        })
    }

    /// Differentiable snapshots over `steps` iterations of size `dt()`.
    pub fn path_tensors(
        &self,
        batch: &GraphBatch,
        q0: &Tensor,
        v0: &Tensor,
        steps: usize,
        check_finite: bool,
    ) -> Result<Vec<(Tensor, Tensor)>> {
        let persistent = self.backbone.config.persistent_h;
        let mut h: Option<Tensor> = None;
        integrate(
            q0,
            v0,
            self.integrator.dt(),
            steps,
            self.variant,
            check_finite,
            |q| {
                let out = self.backbone.forward(batch, q, h.as_ref())?;
                if persistent {
                    h = Some(out.h);
                }
                Ok(out.accel)
            },
        )
    }

    /// Paths for a batch of systems over `horizon` at the trained step size.
    pub fn forward_batch(&self, states: &[&SystemState], horizon: f64, check_finite: bool) -> Result<Vec<PredictedPath>> {
        let steps = self.integrator.steps_for(horizon)?;
        no_grad(|| {
            let batch = GraphBatch::from_states(states)?;
            let q0 = GraphBatch::positions(states)?;
            let v0 = GraphBatch::velocities(states)?;
            let snaps = self.path_tensors(&batch, &q0, &v0, steps, check_finite)?;
            Ok(PredictedPath::from_batch(&batch, &snaps, self.integrator.dt()))
        })
    }
}

/// Path over one training horizon (`tau` steps).
pub fn pingo_forward(state: &SystemState, model: &PingoModel) -> Result<PredictedPath> {
    Ok(model
        .forward_batch(&[state], model.integrator.horizon, true)?
        .pop()
        .expect("one system in, one path out"))
}

/// One window's prediction. Position-only predictors leave `velocities`
/// empty and the rollout substitutes a finite difference.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub positions: Vec<Vec3>,
    pub velocities: Option<Vec<Vec3>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// States at the end of windows `1..=k`, where `k` is the last finite
    /// window below the cap.
    pub windows: Vec<SystemState>,
    /// Window index (1-based) whose prediction diverged.
    pub diverged_at: Option<usize>,
}

/// Feeds each window's prediction back as the next input.
pub fn rollout_with<F>(
    inits: &[&SystemState],
    n_windows: usize,
    window_time: f64,
    cap: f64,
    mut predict: F,
) -> Result<Vec<Rollout>>
where
    F: FnMut(&[&SystemState]) -> Result<Vec<Prediction>>,
{
    if n_windows == 0 {
        return Err(Error::config("rollout needs at least one window"));
    }
    let mut current: Vec<SystemState> = inits.iter().map(|s| (*s).clone()).collect();
    let mut out: Vec<Rollout> = inits
        .iter()
        .map(|_| Rollout {
            windows: Vec::with_capacity(n_windows),
            diverged_at: None,
        })
        .collect();
    let mut active: Vec<usize> = (0..inits.len()).collect();
    for w in 1..=n_windows {
        if active.is_empty() {
            break;
        }
        let refs: Vec<&SystemState> = active.iter().map(|&i| &current[i]).collect();
        let preds = predict(&refs)?;
        if preds.len() != active.len() {
            return Err(Error::config("predictor returned the wrong number of systems"));
        }
        let mut still = Vec::with_capacity(active.len());
        for (&i, p) in active.iter().zip(preds) {
            let velocities = p.velocities.unwrap_or_else(|| {
                p.positions
                    .iter()
                    .zip(&current[i].positions)
                    .map(|(&q1, &q0)| geometry::scale(geometry::sub(q1, q0), 1.0 / window_time))
                    .collect()
            });
            let next = SystemState {
                positions: p.positions,
                velocities,
                graph: current[i].graph.clone(),
            };
            if !next.is_finite() || next.max_position_norm() > cap {
                out[i].diverged_at = Some(w);
                continue;
            }
            out[i].windows.push(next.clone());
            current[i] = next;
            still.push(i);
        }
        active = still;
    }
    Ok(out)
}

/// Rollout of a learned integrator over `n_windows` training horizons.
pub fn rollout(states: &[&SystemState], model: &PingoModel, n_windows: usize) -> Result<Vec<Rollout>> {
    let horizon = model.integrator.horizon;
    rollout_with(states, n_windows, horizon, DIVERGENCE_CAP, |s| {
        Ok(model
            .forward_batch(s, horizon, false)?
            .into_iter()
            .map(|p| Prediction {
                positions: p.final_positions().to_vec(),
                velocities: Some(p.final_velocities().to_vec()),
            })
            .collect())
    })
}

/// CSV with one row per (window, step, particle).
pub fn write_path_csv<W: Write>(mut w: W, windows: &[PredictedPath]) -> std::io::Result<()> {
    writeln!(w, "window,step,particle,qx,qy,qz,vx,vy,vz")?;
    for (win, path) in windows.iter().enumerate() {
        for (step, (qs, vs)) in path.positions.iter().zip(&path.velocities).enumerate() {
            for (i, (q, v)) in qs.iter().zip(vs).enumerate() {
                writeln!(
                    w,
                    "{win},{step},{i},{},{},{},{},{},{}",
                    q[0], q[1], q[2], v[0], v[1], v[2]
                )?;
            }
        }
    }
    Ok(())
}

pub fn write_path_csv_file(path: &Path, windows: &[PredictedPath]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = std::io::BufWriter::new(f);
    write_path_csv(&mut buf, windows).map_err(|e| Error::io(path, e))?;
    buf.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::egnn::EgnnConfig;
    use crate::physics::{generate_trajectory, symplectic_euler_step, true_accel};
    use crate::tensor::HiddenActivation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn gravity_state(seed: u64, n: usize) -> SystemState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = Arc::new(ParticleGraph::complete(vec![1.0; n], 1).unwrap());
        let q = (0..n).map(|_| geometry::gaussian_vec3(&mut rng)).collect();
        let v = (0..n).map(|_| geometry::random_direction(&mut rng, 1.0)).collect();
        SystemState::new(q, v, graph).unwrap()
    }

    fn model(tau: usize, variant: Variant) -> PingoModel {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let egnn = Egnn::new(&EgnnConfig::new(1, 8, 2, HiddenActivation::Silu), &mut rng).unwrap();
        PingoModel::new(egnn, IntegratorConfig::new(tau, 1.0).unwrap(), variant).unwrap()
    }

    #[test]
    fn one_step_is_a_symplectic_euler_step() {
        let m = model(1, Variant::SecondOrder);
        let s = gravity_state(1, 4);
        let path = pingo_forward(&s, &m).unwrap();
        let g = GraphBatch::from_states(&[&s]).unwrap();
        let q = GraphBatch::positions(&[&s]).unwrap();
        let a = geometry::unflatten(&m.backbone.forward(&g, &q, None).unwrap().accel.to_vec());
        let want = symplectic_euler_step(&s, &a, 1.0);
        assert_eq!(path.positions[0], s.positions);
        assert_eq!(path.final_positions(), want.positions.as_slice());
        assert_eq!(path.final_velocities(), want.velocities.as_slice());
    }

    #[test]
    fn zero_backbone_moves_linearly() {
        let m = model(8, Variant::SecondOrder);
        m.backbone.accel_head().output_layer().zero();
        let s = gravity_state(2, 5);
        let path = pingo_forward(&s, &m).unwrap();
        assert_eq!(path.steps(), 8);
        for (q, (q0, v0)) in path.final_positions().iter().zip(s.positions.iter().zip(&s.velocities)) {
            for c in 0..3 {
                assert!((q[c] - (q0[c] + v0[c])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn true_force_reproduces_ground_truth_integration() {
        let s = gravity_state(3, 3);
        let law = ForceLaw::gravity();
        let dt = 0.01;
        let traj = generate_trajectory(&s, &law, 50, dt).unwrap();
        let batch = GraphBatch::from_states(&[&s]).unwrap();
        let graphs = [s.graph.as_ref()];
        let q0 = GraphBatch::positions(&[&s]).unwrap();
        let v0 = GraphBatch::velocities(&[&s]).unwrap();
        let snaps = integrate(
            &q0,
            &v0,
            dt,
            50,
            Variant::SecondOrder,
            true,
            physics_field(&graphs, &batch, &law),
        )
        .unwrap();
        let path = &PredictedPath::from_batch(&batch, &snaps, dt)[0];
        for (k, st) in traj.states.iter().enumerate() {
            assert_eq!(path.positions[k], st.positions, "step {k}");
            assert_eq!(path.velocities[k], st.velocities, "step {k}");
        }
        let a = true_accel(&s, &law).unwrap();
        assert!(a.iter().all(|x| x.iter().all(|c| c.is_finite())));
    }

    #[test]
    fn first_order_uses_backbone_as_velocity() {
        let m = model(1, Variant::FirstOrder);
        let s = gravity_state(4, 3);
        let path = pingo_forward(&s, &m).unwrap();
        let g = GraphBatch::from_states(&[&s]).unwrap();
        let q = GraphBatch::positions(&[&s]).unwrap();
        let f = geometry::unflatten(&m.backbone.forward(&g, &q, None).unwrap().accel.to_vec());
        assert_eq!(path.final_velocities(), f.as_slice());
        for i in 0..3 {
            assert_eq!(path.final_positions()[i], geometry::add(s.positions[i], f[i]));
        }
    }

    #[test]
    fn fractions_pick_stored_snapshots() {
        let m = model(8, Variant::SecondOrder);
        let s = gravity_state(5, 3);
        let path = pingo_forward(&s, &m).unwrap();
        assert_eq!(intermediate_at(&path, 0, 1).unwrap().0, s.positions.as_slice());
        assert_eq!(intermediate_at(&path, 1, 1).unwrap().0, path.final_positions());
        assert_eq!(intermediate_at(&path, 1, 2).unwrap().0, path.positions[4].as_slice());
        assert!(matches!(
            intermediate_at(&path, 1, 3),
            Err(Error::Fraction { num: 1, den: 3, tau: 8 })
        ));
    }

    #[test]
    fn horizon_must_be_a_step_multiple() {
        let c = IntegratorConfig::new(8, 1.0).unwrap();
        assert_eq!(c.steps_for(1.5).unwrap(), 12);
        assert!(c.steps_for(1.01).is_err());
        assert!(IntegratorConfig::new(0, 1.0).is_err());
    }

    #[test]
    fn zero_backbone_rollout_is_linear() {
        let m = model(4, Variant::SecondOrder);
        m.backbone.accel_head().output_layer().zero();
        let s = gravity_state(6, 4);
        let r = &rollout(&[&s], &m, 5).unwrap()[0];
        assert_eq!(r.windows.len(), 5);
        assert!(r.diverged_at.is_none());
        for (k, w) in r.windows.iter().enumerate() {
            for i in 0..4 {
                for c in 0..3 {
                    let want = s.positions[i][c] + s.velocities[i][c] * (k + 1) as f64;
                    assert!((w.positions[i][c] - want).abs() < 1e-12);
                }
            }
        }
        let one = pingo_forward(&s, &m).unwrap();
        assert_eq!(r.windows[0].positions.as_slice(), one.final_positions());
    }

    #[test]
    fn divergence_is_flagged_not_propagated() {
        let s = gravity_state(7, 3);
        let r = rollout_with(&[&s, &s], 6, 1.0, 10.0, |states| {
            Ok(states
                .iter()
                .map(|st| Prediction {
                    positions: st.positions.iter().map(|&q| geometry::scale(q, 3.0)).collect(),
                    velocities: None,
                })
                .collect())
        })
        .unwrap();
        for x in &r {
            let k = x.diverged_at.expect("flagged");
            assert_eq!(x.windows.len(), k - 1);
            assert!(x.windows.iter().all(|w| w.is_finite()));
        }
    }

    #[test]
    fn finite_difference_velocity_fallback() {
        let s = gravity_state(8, 2);
        let r = rollout_with(&[&s], 1, 0.5, DIVERGENCE_CAP, |states| {
            Ok(states
                .iter()
                .map(|st| Prediction {
                    positions: st.positions.iter().map(|&q| geometry::add(q, [1.0, 0.0, 0.0])).collect(),
                    velocities: None,
                })
                .collect())
        })
        .unwrap();
        assert_eq!(r[0].windows[0].velocities, vec![[2.0, 0.0, 0.0]; 2]);
    }

    #[test]
    fn csv_has_one_row_per_particle_and_step() {
        let m = model(2, Variant::SecondOrder);
        let s = gravity_state(9, 3);
        let path = pingo_forward(&s, &m).unwrap();
        let mut buf = Vec::new();
        write_path_csv(&mut buf, &[path.clone(), path]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 3 * 3);
        assert!(text.starts_with("window,step,particle,qx,qy,qz,vx,vy,vz\n"));
    }
}
