//! Ground-truth N-body systems: initial-condition samplers, pairwise force
//! laws, and the symplectic Euler stepper used to generate trajectories.

mod dataset;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};

pub use dataset::{
    build_dataset, generate_dataset, load_dataset, write_dataset, Dataset, DatasetManifest, Split,
    SplitCounts, DATASET_FORMAT_VERSION,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Charged,
    Gravity,
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemKind::Charged => "charged",
            SystemKind::Gravity => "gravity",
        })
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "charged" => Ok(SystemKind::Charged),
            "gravity" => Ok(SystemKind::Gravity),
            other => Err(Error::config(format!(
                "unknown system '{other}' (expected charged or gravity)"
            ))),
        }
    }
}

/// Node attributes and complete directed connectivity shared by every
/// snapshot of one system.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleGraph {
    n_bodies: usize,
    attr_dim: usize,
    attributes: Vec<f64>,
    edges: Vec<(usize, usize)>,
    edge_attrs: Vec<f64>,
}

impl ParticleGraph {
    /// Complete graph without self-loops; the edge attribute is the product of
    /// the first attribute channel of both endpoints (charge or mass).
    pub fn complete(attributes: Vec<f64>, attr_dim: usize) -> Result<Self> {
        if attr_dim == 0 || attributes.len() % attr_dim != 0 {
            return Err(Error::config(format!(
                "{} attribute values do not divide into rows of width {attr_dim}",
                attributes.len()
            )));
        }
        let n = attributes.len() / attr_dim;
        let mut edges = Vec::with_capacity(n * n.saturating_sub(1));
        let mut edge_attrs = Vec::with_capacity(edges.capacity());
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    edges.push((i, j));
                    edge_attrs.push(attributes[i * attr_dim] * attributes[j * attr_dim]);
                }
            }
        }
        Ok(ParticleGraph {
            n_bodies: n,
            attr_dim,
            attributes,
            edges,
            edge_attrs,
        })
    }

    pub fn n_bodies(&self) -> usize {
        self.n_bodies
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn attributes(&self) -> &[f64] {
        &self.attributes
    }

    pub fn attribute(&self, i: usize) -> &[f64] {
        &self.attributes[i * self.attr_dim..(i + 1) * self.attr_dim]
    }

    /// Ordered pairs `(i, j)`: `j` sends a message to `i`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_attrs(&self) -> &[f64] {
        &self.edge_attrs
    }
}

/// One snapshot of an N-body system.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub graph: Arc<ParticleGraph>,
}

impl SystemState {
    pub fn new(positions: Vec<Vec3>, velocities: Vec<Vec3>, graph: Arc<ParticleGraph>) -> Result<Self> {
        let s = SystemState {
            positions,
            velocities,
            graph,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.n_bodies();
        if self.positions.len() != n || self.velocities.len() != n {
            return Err(Error::Shape {
                op: "system_state",
                lhs: vec![self.positions.len(), 3],
                rhs: vec![self.velocities.len(), 3],
            });
        }
        if !self.is_finite() {
            return Err(Error::config("system state contains non-finite values"));
        }
        Ok(())
    }

    pub fn n_bodies(&self) -> usize {
        self.positions.len()
    }

    pub fn is_finite(&self) -> bool {
        self.positions
            .iter()
            .chain(&self.velocities)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn max_position_norm(&self) -> f64 {
        self.positions
            .iter()
            .map(|&p| geometry::norm(p))
            .fold(0.0, f64::max)
    }

    /// Rigid motion `q -> Q q + b`, `v -> Q v`.
    pub fn transformed(&self, rotation: &geometry::Mat3, shift: Vec3) -> SystemState {
        SystemState {
            positions: self
                .positions
                .iter()
                .map(|&p| geometry::add(geometry::mat_vec(rotation, p), shift))
                .collect(),
            velocities: self
                .velocities
                .iter()
                .map(|&v| geometry::mat_vec(rotation, v))
                .collect(),
            graph: self.graph.clone(),
        }
    }
}

/// Pairwise inverse-square interaction with Plummer softening.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceLaw {
    pub kind: SystemKind,
    pub softening: f64,
    pub strength: f64,
}

impl ForceLaw {
    pub fn gravity() -> Self {
        ForceLaw {
            kind: SystemKind::Gravity,
            softening: 0.0,
            strength: 1.0,
        }
    }

    pub fn charged() -> Self {
        ForceLaw {
            kind: SystemKind::Charged,
            softening: 0.01,
            strength: 1.0,
        }
    }

    pub fn default_for(kind: SystemKind) -> Self {
        match kind {
            SystemKind::Charged => Self::charged(),
            SystemKind::Gravity => Self::gravity(),
        }
    }
}

/// Inertial masses: the attribute for gravity, unity for charged particles.
pub fn masses(graph: &ParticleGraph, kind: SystemKind) -> Vec<f64> {
    (0..graph.n_bodies())
        .map(|i| match kind {
            SystemKind::Gravity => graph.attribute(i)[0],
            SystemKind::Charged => 1.0,
        })
        .collect()
}

pub fn true_accel(state: &SystemState, law: &ForceLaw) -> Result<Vec<Vec3>> {
    accel_at(&state.positions, &state.graph, law)
}

/// Acceleration field evaluated at arbitrary positions for a fixed system.
///
/// Gravity: `a_i = s * sum_j m_j (q_j - q_i) / (r^2 + eps^2)^{3/2}`.
/// Charged: `a_i = s * sum_j c_i c_j (q_i - q_j) / (r^2 + eps^2)^{3/2} / m_i`.
/// Each pair is evaluated once and applied to both ends so that the total
/// force cancels.
pub fn accel_at(positions: &[Vec3], graph: &ParticleGraph, law: &ForceLaw) -> Result<Vec<Vec3>> {
    let n = positions.len();
    let mut acc = vec![[0.0; 3]; n];
    let mass = masses(graph, law.kind);
    let eps2 = law.softening * law.softening;
    for i in 0..n {
        for j in i + 1..n {
            let d = geometry::sub(positions[j], positions[i]);
            let r2 = geometry::dot(d, d) + eps2;
            if r2 == 0.0 {
                return Err(Error::Singularity { i, j });
            }
            let inv = law.strength / (r2 * r2.sqrt());
            // coefficient of (q_j - q_i) in the force on i
            let pair = match law.kind {
                SystemKind::Gravity => mass[i] * mass[j] * inv,
                SystemKind::Charged => -graph.attribute(i)[0] * graph.attribute(j)[0] * inv,
            };
            for k in 0..3 {
                acc[i][k] += pair * d[k] / mass[i];
                acc[j][k] -= pair * d[k] / mass[j];
            }
        }
    }
    Ok(acc)
}

/// Velocity first with the given acceleration, then position with the new
/// velocity.
pub fn symplectic_euler_step(state: &SystemState, accel: &[Vec3], dt: f64) -> SystemState {
    let velocities: Vec<Vec3> = state
        .velocities
        .iter()
        .zip(accel)
        .map(|(&v, &a)| geometry::add(v, geometry::scale(a, dt)))
        .collect();
    let positions = state
        .positions
        .iter()
        .zip(&velocities)
        .map(|(&q, &v)| geometry::add(q, geometry::scale(v, dt)))
        .collect();
    SystemState {
        positions,
        velocities,
        graph: state.graph.clone(),
    }
}

/// Time-ordered snapshots recorded every `stride` integration steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<SystemState>,
    pub dt_ground_truth: f64,
    pub stride: usize,
    pub system_kind: SystemKind,
}

impl Trajectory {
    /// Time between consecutive stored frames.
    pub fn frame_dt(&self) -> f64 {
        self.dt_ground_truth * self.stride as f64
    }

    pub fn steps(&self) -> usize {
        (self.states.len() - 1) * self.stride
    }

    /// Frame index for an elapsed time, if it lands on a stored frame.
    pub fn frame_at(&self, elapsed: f64) -> Option<usize> {
        let f = elapsed / self.frame_dt();
        let idx = f.round();
        ((f - idx).abs() < 1e-9 && idx >= 0.0 && (idx as usize) < self.states.len())
            .then_some(idx as usize)
    }
}

pub fn generate_trajectory(init: &SystemState, law: &ForceLaw, steps: usize, dt: f64) -> Result<Trajectory> {
    generate_trajectory_strided(init, law, steps, dt, 1)
}

/// Integrates `steps` ground-truth steps keeping every `stride`-th state.
pub fn generate_trajectory_strided(
    init: &SystemState,
    law: &ForceLaw,
    steps: usize,
    dt: f64,
    stride: usize,
) -> Result<Trajectory> {
    if steps == 0 || stride == 0 || steps % stride != 0 {
        return Err(Error::config(format!(
            "steps ({steps}) must be a positive multiple of stride ({stride})"
        )));
    }
    init.validate()?;
    let mut states = Vec::with_capacity(steps / stride + 1);
    states.push(init.clone());
    let mut cur = init.clone();
    for step in 0..steps {
        let a = true_accel(&cur, law).map_err(|e| Error::Integration {
            step,
            source: Box::new(e),
        })?;
        cur = symplectic_euler_step(&cur, &a, dt);
        if !cur.is_finite() {
            return Err(Error::Integration {
                step,
                source: Box::new(Error::NonFinite { iteration: step }),
            });
        }
        if (step + 1) % stride == 0 {
            states.push(cur.clone());
        }
    }
    Ok(Trajectory {
        states,
        dt_ground_truth: dt,
        stride,
        system_kind: law.kind,
    })
}

/// Settings for one synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub system: SystemKind,
    pub n_bodies: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Ground-truth integration steps per trajectory.
    pub total_steps: usize,
    /// Keep every `stride`-th state; 1 stores every step.
    pub stride: usize,
    pub dt: f64,
    pub seed: u64,
    pub softening: f64,
    pub interaction_strength: f64,
    /// Trajectories whose positions leave this radius are resampled.
    pub position_cap: f64,
}

impl GenerationConfig {
    pub fn new(system: SystemKind, n_bodies: usize) -> Self {
        let law = ForceLaw::default_for(system);
        GenerationConfig {
            system,
            n_bodies,
            n_train: 3000,
            n_valid: 2000,
            n_test: 2000,
            total_steps: 1000,
            stride: 1,
            dt: 0.001,
            seed: 0,
            softening: law.softening,
            interaction_strength: law.strength,
            position_cap: 1e3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bodies < 2 {
            return Err(Error::config("n_bodies must be at least 2"));
        }
        if self.n_train == 0 || self.n_valid == 0 || self.n_test == 0 {
            return Err(Error::config("trajectory counts must be positive"));
        }
        if self.total_steps == 0 || self.stride == 0 || self.total_steps % self.stride != 0 {
            return Err(Error::config(
                "total_steps must be a positive multiple of stride",
            ));
        }
        if !(self.dt > 0.0) || !(self.softening >= 0.0) || !self.interaction_strength.is_finite() {
            return Err(Error::config(
                "dt must be positive, softening non-negative, strength finite",
            ));
        }
        if !(self.position_cap > 0.0) {
            return Err(Error::config("position_cap must be positive"));
        }
        Ok(())
    }

    pub fn force_law(&self) -> ForceLaw {
        ForceLaw {
            kind: self.system,
            softening: self.softening,
            strength: self.interaction_strength,
        }
    }
}

/// Positive-charge counts of the three charged-system types, cycled through
/// by trajectory index.
pub const CHARGED_POSITIVE_COUNTS: [usize; 3] = [1, 3, 0];

/// Charged system: positions ~ N(0, 0.5^2), speed 0.5 in a random direction,
/// charges drawn from {+1, -1} with a random count of positives.
pub fn sample_initial_charged<R: Rng + ?Sized>(config: &GenerationConfig, rng: &mut R) -> Result<SystemState> {
    let kind = rng.gen_range(0..CHARGED_POSITIVE_COUNTS.len());
    sample_charged_of_type(config, kind, rng)
}

/// Charged system whose number of positive charges is
/// `CHARGED_POSITIVE_COUNTS[kind % 3]` (capped at `n_bodies`).
pub fn sample_charged_of_type<R: Rng + ?Sized>(
    config: &GenerationConfig,
    kind: usize,
    rng: &mut R,
) -> Result<SystemState> {
    if config.n_bodies < 2 {
        return Err(Error::config("n_bodies must be at least 2"));
    }
    let n = config.n_bodies;
    let positions = sample_positions(n, 0.5, rng);
    let velocities = (0..n).map(|_| geometry::random_direction(rng, 0.5)).collect();
    let positives = CHARGED_POSITIVE_COUNTS[kind % CHARGED_POSITIVE_COUNTS.len()].min(n);
    let mut charges: Vec<f64> = (0..n).map(|i| if i < positives { 1.0 } else { -1.0 }).collect();
    charges.shuffle(rng);
    let graph = Arc::new(ParticleGraph::complete(charges, 1)?);
    SystemState::new(positions, velocities, graph)
}

/// Gravity system: unit-Gaussian positions, unit speed in a random
/// direction, unit masses.
pub fn sample_initial_gravity<R: Rng + ?Sized>(config: &GenerationConfig, rng: &mut R) -> Result<SystemState> {
    if config.n_bodies < 2 {
        return Err(Error::config("n_bodies must be at least 2"));
    }
    let n = config.n_bodies;
    let positions = sample_positions(n, 1.0, rng);
    let velocities = (0..n).map(|_| geometry::random_direction(rng, 1.0)).collect();
    let graph = Arc::new(ParticleGraph::complete(vec![1.0; n], 1)?);
    SystemState::new(positions, velocities, graph)
}

fn sample_positions<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<Vec3> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| [normal.sample(rng), normal.sample(rng), normal.sample(rng)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(pos: Vec<Vec3>, vel: Vec<Vec3>, attrs: Vec<f64>) -> SystemState {
        let g = Arc::new(ParticleGraph::complete(attrs, 1).unwrap());
        SystemState::new(pos, vel, g).unwrap()
    }

    #[test]
    fn single_particle_feels_nothing() {
        let s = state(vec![[0.3, 0.1, -2.0]], vec![[0.0; 3]], vec![1.0]);
        assert_eq!(true_accel(&s, &ForceLaw::gravity()).unwrap(), vec![[0.0; 3]]);
        assert!(s.graph.edges().is_empty());
    }

    #[test]
    fn two_unit_masses_attract_with_unit_magnitude() {
        let s = state(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![[0.0; 3]; 2], vec![1.0, 1.0]);
        let a = true_accel(&s, &ForceLaw::gravity()).unwrap();
        assert_eq!(a[0], [1.0, 0.0, 0.0]);
        assert_eq!(a[1], [-1.0, 0.0, 0.0]);
    }

    #[test]
    fn like_charges_repel() {
        let s = state(vec![[0.0; 3], [0.0, 1.0, 0.0]], vec![[0.0; 3]; 2], vec![1.0, 1.0]);
        let law = ForceLaw {
            softening: 0.0,
            strength: 2.5,
            ..ForceLaw::charged()
        };
        let a = true_accel(&s, &law).unwrap();
        assert_eq!(a[0], [0.0, -2.5, 0.0]);
        assert_eq!(a[1], [0.0, 2.5, 0.0]);
    }

    #[test]
    fn opposite_charges_attract() {
        let s = state(vec![[0.0; 3], [0.0, 0.0, 2.0]], vec![[0.0; 3]; 2], vec![1.0, -1.0]);
        let law = ForceLaw {
            softening: 0.0,
            ..ForceLaw::charged()
        };
        let a = true_accel(&s, &law).unwrap();
        assert!((a[0][2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn coincident_particles_without_softening_are_singular() {
        let s = state(vec![[1.0; 3], [1.0; 3]], vec![[0.0; 3]; 2], vec![1.0, 1.0]);
        assert!(matches!(
            true_accel(&s, &ForceLaw::gravity()),
            Err(Error::Singularity { i: 0, j: 1 })
        ));
        let soft = ForceLaw {
            softening: 0.1,
            ..ForceLaw::gravity()
        };
        assert_eq!(true_accel(&s, &soft).unwrap(), vec![[0.0; 3]; 2]);
    }

    #[test]
    fn symplectic_step_orders_velocity_before_position() {
        let s = state(vec![[0.0; 3]], vec![[1.0, 0.0, 0.0]], vec![1.0]);
        let n = symplectic_euler_step(&s, &[[0.0; 3]], 0.1);
        assert_eq!(n.positions[0], [0.1, 0.0, 0.0]);
        assert_eq!(n.velocities[0], [1.0, 0.0, 0.0]);

        let s = state(vec![[0.0; 3]], vec![[0.0; 3]], vec![1.0]);
        let n = symplectic_euler_step(&s, &[[0.0, 0.0, -1.0]], 0.1);
        assert!((n.velocities[0][2] + 0.1).abs() < 1e-15);
        assert!((n.positions[0][2] + 0.01).abs() < 1e-15);

        let n = symplectic_euler_step(&s, &[[3.0, 1.0, -1.0]], 0.0);
        assert_eq!(n, s);
    }

    #[test]
    fn one_step_trajectory_is_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = GenerationConfig::new(SystemKind::Gravity, 4);
        let s = sample_initial_gravity(&cfg, &mut rng).unwrap();
        let law = ForceLaw::gravity();
        let t = generate_trajectory(&s, &law, 1, 0.001).unwrap();
        let manual = symplectic_euler_step(&s, &true_accel(&s, &law).unwrap(), 0.001);
        assert_eq!(t.states.len(), 2);
        assert_eq!(t.states[1], manual);
    }

    #[test]
    fn gravity_sampler_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = GenerationConfig::new(SystemKind::Gravity, 5);
        let s = sample_initial_gravity(&cfg, &mut rng).unwrap();
        assert!(s.graph.attributes().iter().all(|&m| m == 1.0));
        assert!(s.graph.edge_attrs().iter().all(|&a| a == 1.0));
        assert_eq!(s.graph.edges().len(), 20);
        for v in &s.velocities {
            assert!((geometry::norm(*v) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn charged_sampler_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = GenerationConfig::new(SystemKind::Charged, 5);
        for kind in 0..3 {
            let s = sample_charged_of_type(&cfg, kind, &mut rng).unwrap();
            let c = s.graph.attributes();
            assert!(c.iter().all(|&q| q == 1.0 || q == -1.0));
            let positives = c.iter().filter(|&&q| q > 0.0).count();
            assert_eq!(positives, CHARGED_POSITIVE_COUNTS[kind]);
            for (e, &(i, j)) in s.graph.edges().iter().enumerate() {
                assert_eq!(s.graph.edge_attrs()[e], c[i] * c[j]);
            }
            for v in &s.velocities {
                assert!((geometry::norm(*v) - 0.5).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_tiny_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GenerationConfig::new(SystemKind::Charged, 1);
        assert!(sample_initial_charged(&cfg, &mut rng).is_err());
        assert!(sample_initial_gravity(&cfg, &mut rng).is_err());
    }

    #[test]
    fn parse_system_kind() {
        assert_eq!("gravity".parse::<SystemKind>().unwrap(), SystemKind::Gravity);
        assert!("plasma".parse::<SystemKind>().is_err());
    }
}
