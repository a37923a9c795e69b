//! Equivariant graph networks over batches of particle systems.
//!
//! [`Egnn`] maps positions and node attributes to per-particle accelerations
//! and never sees velocities. [`DirectEgnn`] is the one-shot baseline that maps
//! `(q0, v0)` straight to the positions one horizon later.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::physics::{ParticleGraph, SystemState};
use crate::tensor::{HiddenActivation, Linear, Mlp, MlpSpec, Tensor};

/// Several systems stacked into one disconnected graph.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    n_nodes: usize,
    offsets: Vec<usize>,
    receivers: Rc<[usize]>,
    senders: Rc<[usize]>,
    node_attrs: Tensor,
    edge_attrs: Tensor,
    inv_neighbors: Tensor,
}

impl GraphBatch {
    pub fn from_graphs(graphs: &[&ParticleGraph]) -> Result<Self> {
        let d = graphs.first().map_or(1, |g| g.attr_dim());
        let mut offsets = vec![0];
        let mut receivers = Vec::new();
        let mut senders = Vec::new();
        let mut node_attrs = Vec::new();
        let mut edge_attrs = Vec::new();
        let mut inv = Vec::new();
        for g in graphs {
            if g.attr_dim() != d {
                return Err(Error::config(format!(
                    "attribute width {} differs from {d} within one batch",
                    g.attr_dim()
                )));
            }
            let base = *offsets.last().expect("non-empty");
            for &(i, j) in g.edges() {
                receivers.push(base + i);
                senders.push(base + j);
            }
            edge_attrs.extend_from_slice(g.edge_attrs());
            node_attrs.extend_from_slice(g.attributes());
            let n = g.n_bodies();
            let c = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };
            inv.extend(std::iter::repeat(c).take(n));
            offsets.push(base + n);
        }
        let n_nodes = *offsets.last().expect("non-empty");
        let n_edges = receivers.len();
        Ok(GraphBatch {
            n_nodes,
            offsets,
            receivers: receivers.into(),
            senders: senders.into(),
            node_attrs: Tensor::from_vec(&[n_nodes, d], node_attrs)?,
            edge_attrs: Tensor::from_vec(&[n_edges, 1], edge_attrs)?,
            inv_neighbors: Tensor::from_vec(&[n_nodes, 1], inv)?,
        })
    }

    pub fn from_states(states: &[&SystemState]) -> Result<Self> {
        let graphs: Vec<&ParticleGraph> = states.iter().map(|s| s.graph.as_ref()).collect();
        Self::from_graphs(&graphs)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn attr_dim(&self) -> usize {
        self.node_attrs.shape()[1]
    }

    pub fn node_attrs(&self) -> &Tensor {
        &self.node_attrs
    }

    /// Stacked positions `[n_nodes, 3]` as a constant tensor.
    pub fn positions(states: &[&SystemState]) -> Result<Tensor> {
        stack(states.iter().map(|s| s.positions.as_slice()))
    }

    pub fn velocities(states: &[&SystemState]) -> Result<Tensor> {
        stack(states.iter().map(|s| s.velocities.as_slice()))
    }

    /// Splits a flat `[n_nodes, 3]` buffer back into per-system point lists.
    pub fn split_rows(&self, data: &[f64]) -> Vec<Vec<Vec3>> {
        self.offsets
            .windows(2)
            .map(|w| {
                data[3 * w[0]..3 * w[1]]
                    .chunks_exact(3)
                    .map(|c| [c[0], c[1], c[2]])
                    .collect()
            })
            .collect()
    }

    /// `q_i - q_j` per edge and its squared length.
    fn differences(&self, q: &Tensor) -> Result<(Tensor, Tensor)> {
        let diff = q.index_select(&self.receivers)?.sub(&q.index_select(&self.senders)?)?;
        let d2 = diff.square().sum_axis(1, true)?;
        Ok((diff, d2))
    }

    fn message_input(&self, h: &Tensor, d2: &Tensor) -> Result<Tensor> {
        Tensor::concat(
            &[
                d2.clone(),
                h.index_select(&self.receivers)?,
                h.index_select(&self.senders)?,
                self.edge_attrs.clone(),
            ],
            1,
        )
    }

    /// `1/(N-1) * sum_j (q_i - q_j) * w_ij`.
    fn coordinate_sum(&self, diff: &Tensor, weights: &Tensor) -> Result<Tensor> {
        diff.mul(weights)?
            .index_add(&self.receivers, self.n_nodes)?
            .mul(&self.inv_neighbors)
    }

    fn node_update(&self, mlp: &Mlp, h: &Tensor, m: &Tensor) -> Result<Tensor> {
        let agg = m.index_add(&self.receivers, self.n_nodes)?;
        h.add(&mlp.forward(&Tensor::concat(&[h.clone(), agg], 1)?)?)
    }
}

fn stack<'a>(rows: impl Iterator<Item = &'a [Vec3]>) -> Result<Tensor> {
    let mut data = Vec::new();
    for r in rows {
        data.extend(r.iter().flat_map(|p| p.iter().copied()));
    }
    Tensor::from_vec(&[data.len() / 3, 3], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgnnConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub d_node: usize,
    pub message_mlp: MlpSpec,
    pub accel_mlp: MlpSpec,
    pub node_mlp: MlpSpec,
    /// Carry node embeddings from one integration step to the next instead of
    /// re-embedding the raw attributes at every call.
    #[serde(default)]
    pub persistent_h: bool,
}

impl EgnnConfig {
    pub fn new(d_node: usize, hidden_dim: usize, n_layers: usize, activation: HiddenActivation) -> Self {
        let h = hidden_dim;
        EgnnConfig {
            n_layers,
            hidden_dim,
            d_node,
            message_mlp: MlpSpec::new(vec![2 * h + 2, h, h], activation),
            accel_mlp: MlpSpec::new(vec![h, h, 1], activation),
            node_mlp: MlpSpec::new(vec![2 * h, h, h], activation),
            persistent_h: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.message_mlp.validate()?;
        self.accel_mlp.validate()?;
        self.node_mlp.validate()?;
        let h = self.hidden_dim;
        let m = self.message_mlp.output_width();
        if self.n_layers == 0 || h == 0 || self.d_node == 0 {
            return Err(Error::config("EGNN depth, hidden width and attribute width must be positive"));
        }
        if self.message_mlp.input_width() != 2 * h + 2 {
            return Err(Error::config(format!(
                "message MLP input must be 2*hidden+2 = {}, got {}",
                2 * h + 2,
                self.message_mlp.input_width()
            )));
        }
        if self.accel_mlp.input_width() != m || self.accel_mlp.output_width() != 1 {
            return Err(Error::config(format!(
                "acceleration MLP must map {m} message features to one scalar"
            )));
        }
        if self.node_mlp.input_width() != h + m || self.node_mlp.output_width() != h {
            return Err(Error::config(format!(
                "node MLP must map {} features to {h}",
                h + m
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EgnnLayer {
    pub message: Mlp,
    pub node: Option<Mlp>,
    pub accel: Option<Mlp>,
}

/// Acceleration network. Only the last layer carries the scalar edge gate,
/// since only its acceleration is returned.
#[derive(Clone, Debug)]
pub struct Egnn {
    pub config: EgnnConfig,
    pub embedding: Linear,
    pub layers: Vec<EgnnLayer>,
}

#[derive(Clone, Debug)]
pub struct EgnnOutput {
    pub accel: Tensor,
    pub h: Tensor,
}

impl Egnn {
    pub fn new<R: Rng + ?Sized>(config: &EgnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embedding = Linear::new(config.d_node, config.hidden_dim, false, rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let last = l + 1 == config.n_layers;
            let message = Mlp::new(&config.message_mlp, rng)?;
            let node = if !last || config.persistent_h {
                Some(Mlp::new(&config.node_mlp, rng)?)
            } else {
                None
            };
            let accel = if last {
                Some(Mlp::new(&config.accel_mlp, rng)?)
            } else {
                None
            };
            layers.push(EgnnLayer { message, node, accel });
        }
        Ok(Egnn {
            config: config.clone(),
            embedding,
            layers,
        })
    }

    /// Node embeddings from raw attributes.
    pub fn embed(&self, g: &GraphBatch) -> Result<Tensor> {
        self.embedding.forward(g.node_attrs())
    }

    /// Accelerations `[n, 3]` at positions `q`. `h` defaults to a fresh
    /// embedding of the node attributes.
    pub fn forward(&self, g: &GraphBatch, q: &Tensor, h: Option<&Tensor>) -> Result<EgnnOutput> {
        if g.attr_dim() != self.config.d_node {
            return Err(Error::config(format!(
                "model expects {} node attributes, batch has {}",
                self.config.d_node,
                g.attr_dim()
            )));
        }
        let mut h = match h {
            Some(h) => h.clone(),
            None => self.embed(g)?,
        };
        let (diff, d2) = g.differences(q)?;
        let mut accel = None;
        for layer in &self.layers {
            let m = layer.message.forward(&g.message_input(&h, &d2)?)?;
            if let Some(phi_q) = &layer.accel {
                accel = Some(g.coordinate_sum(&diff, &phi_q.forward(&m)?)?);
            }
            if let Some(phi_h) = &layer.node {
                h = g.node_update(phi_h, &h, &m)?;
            }
        }
        Ok(EgnnOutput {
            accel: accel.expect("last layer has an acceleration head"),
            h,
        })
    }

    /// The scalar edge gate of the last layer.
    pub fn accel_head(&self) -> &Mlp {
        self.layers
            .last()
            .and_then(|l| l.accel.as_ref())
            .expect("last layer has an acceleration head")
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = self.embedding.parameters("embedding");
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.message.parameters(&format!("layers.{l}.message")));
            if let Some(m) = &layer.node {
                out.extend(m.parameters(&format!("layers.{l}.node")));
            }
            if let Some(m) = &layer.accel {
                out.extend(m.parameters(&format!("layers.{l}.accel")));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectEgnnConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub d_node: usize,
    pub activation: HiddenActivation,
}

impl DirectEgnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden_dim == 0 || self.d_node == 0 {
            return Err(Error::config("baseline depth, hidden width and attribute width must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DirectLayer {
    pub message: Mlp,
    pub coord: Mlp,
    pub velocity: Mlp,
    pub node: Option<Mlp>,
}

/// Velocity-aware EGNN mapping `(q0, v0)` to positions one horizon later in a
/// single stack of `L` layers. Layer `l` computes
/// `v_l = phi_v(h_i) v0_i * horizon + 1/(N-1) sum_j (q_i - q_j) phi_x(m_ij)`
/// and moves every particle by `v_l`; the positions after each layer are the
/// hidden-layer estimates.
#[derive(Clone, Debug)]
pub struct DirectEgnn {
    pub config: DirectEgnnConfig,
    pub embedding: Linear,
    pub layers: Vec<DirectLayer>,
}

#[derive(Clone, Debug)]
pub struct DirectOutput {
    /// Positions before the first layer and after each layer (`L + 1` entries).
    pub positions: Vec<Tensor>,
    pub velocity: Tensor,
}

impl DirectEgnn {
    pub fn new<R: Rng + ?Sized>(config: &DirectEgnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let act = config.activation;
        let embedding = Linear::new(config.d_node + 1, h, true, rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            layers.push(DirectLayer {
                message: Mlp::new(&MlpSpec::new(vec![2 * h + 2, h, h], act), rng)?,
                coord: Mlp::new(&MlpSpec::new(vec![h, h, 1], act), rng)?,
                velocity: Mlp::new(&MlpSpec::new(vec![h, h, 1], act), rng)?,
                node: if l + 1 < config.n_layers {
                    Some(Mlp::new(&MlpSpec::new(vec![2 * h, h, h], act), rng)?)
                } else {
                    None
                },
            });
        }
        Ok(DirectEgnn {
            config: config.clone(),
            embedding,
            layers,
        })
    }

    pub fn forward(&self, g: &GraphBatch, q0: &Tensor, v0: &Tensor, horizon: f64) -> Result<DirectOutput> {
        if g.attr_dim() != self.config.d_node {
            return Err(Error::config(format!(
                "baseline expects {} node attributes, batch has {}",
                self.config.d_node,
                g.attr_dim()
            )));
        }
        let speed = v0.square().sum_axis(1, true)?.sqrt();
        let mut h = self
            .embedding
            .forward(&Tensor::concat(&[g.node_attrs().clone(), speed], 1)?)?;
        let v_in = v0.scale(horizon);
        let mut q = q0.clone();
        let mut positions = vec![q.clone()];
        let mut v = v0.clone();
        for layer in &self.layers {
            let (diff, d2) = g.differences(&q)?;
            let m = layer.message.forward(&g.message_input(&h, &d2)?)?;
            let gain = layer.velocity.forward(&h)?;
            v = v_in.mul(&gain)?.add(&g.coordinate_sum(&diff, &layer.coord.forward(&m)?)?)?;
            q = q.add(&v)?;
            positions.push(q.clone());
            if let Some(phi_h) = &layer.node {
                h = g.node_update(phi_h, &h, &m)?;
            }
        }
        Ok(DirectOutput { positions, velocity: v })
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = self.embedding.parameters("embedding");
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.message.parameters(&format!("layers.{l}.message")));
            out.extend(layer.coord.parameters(&format!("layers.{l}.coord")));
            out.extend(layer.velocity.parameters(&format!("layers.{l}.velocity")));
            if let Some(m) = &layer.node {
                out.extend(m.parameters(&format!("layers.{l}.node")));
            }
        }
        out
    }
}
