#![allow(dead_code)]

use std::sync::Arc;

use pingo::geometry::{self, Vec3};
use pingo::physics::{ParticleGraph, SystemState};
use pingo::tensor::{no_grad, Tensor};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor, so that vanishing gradients compare
/// in absolute terms.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between the autodiff gradient of `loss` and central
/// differences over every entry of every parameter.
///
/// Central differences carry rounding noise of about `eps * |loss| / h`
/// (2e-11 relative to the loss at `h = 1e-5`), so gradients are compared
/// relative to at least `1e-6 * max(1, |loss|)`.
pub fn max_grad_error(params: &[(String, Tensor)], mut loss: impl FnMut() -> Tensor) -> f64 {
    for (_, p) in params {
        p.clear_grad();
    }
    let root = loss();
    let floor = 1e-6 * root.item().abs().max(1.0);
    root.backward().unwrap();
    let mut worst: f64 = 0.0;
    for (_, p) in params {
        // parameters that do not reach the loss have no gradient; the finite
        // difference must then vanish as well
        let base = p.to_vec();
        let grad = p.grad().unwrap_or_else(|| vec![0.0; base.len()]);
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + FD_STEP;
            p.set_data(&probe).unwrap();
            let up = no_grad(|| loss().item());
            probe[i] = base[i] - FD_STEP;
            p.set_data(&probe).unwrap();
            let down = no_grad(|| loss().item());
            p.set_data(&base).unwrap();
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(grad[i], numeric, floor);
            worst = worst.max(e);
        }
    }
    worst
}

/// Weighted sum of squares: a generic scalar read-out with non-trivial
/// gradients everywhere.
pub fn readout(out: &Tensor, weights: &Tensor) -> Tensor {
    out.mul(weights).unwrap().square().sum()
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random system whose particles are at least `min_sep` apart.
pub fn spread_state<R: Rng>(rng: &mut R, n: usize, attrs: Vec<f64>, min_sep: f64) -> SystemState {
    loop {
        let positions: Vec<Vec3> = (0..n).map(|_| geometry::gaussian_vec3(rng)).collect();
        let ok = (0..n).all(|i| (0..i).all(|j| geometry::norm(geometry::sub(positions[i], positions[j])) >= min_sep));
        if !ok {
            continue;
        }
        let velocities = (0..n).map(|_| geometry::gaussian_vec3(rng)).collect();
        let graph = Arc::new(ParticleGraph::complete(attrs.clone(), 1).unwrap());
        return SystemState::new(positions, velocities, graph).unwrap();
    }
}

pub fn unit_masses<R: Rng>(rng: &mut R, n: usize) -> SystemState {
    spread_state(rng, n, vec![1.0; n], 0.3)
}

pub fn max_abs_diff(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).abs()))
        .fold(0.0, f64::max)
}

pub fn max_abs(a: &[Vec3]) -> f64 {
    a.iter().flat_map(|x| x.iter().map(|v| v.abs())).fold(0.0, f64::max)
}
