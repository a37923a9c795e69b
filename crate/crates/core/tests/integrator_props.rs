mod common;

use common::{max_abs, max_abs_diff, max_grad_error, random_tensor, readout, unit_masses};
use pingo::egnn::{Egnn, EgnnConfig, GraphBatch};
use pingo::geometry::{self, Vec3};
use pingo::integrator::{
    integrate, physics_field, pingo_forward, rollout, rollout_with, IntegratorConfig, PingoModel, Prediction,
    PredictedPath, Variant, DIVERGENCE_CAP,
};
use pingo::physics::{generate_trajectory, ForceLaw, SystemState};
use pingo::tensor::{no_grad, HiddenActivation};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(seed: u64, tau: usize, act: HiddenActivation, variant: Variant) -> PingoModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Egnn::new(&EgnnConfig::new(1, 8, 2, act), &mut rng).unwrap();
    PingoModel::new(net, IntegratorConfig::new(tau, 1.0).unwrap(), variant).unwrap()
}

fn relative(a: &[Vec3], b: &[Vec3]) -> f64 {
    max_abs_diff(a, b) / max_abs(b).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn whole_path_is_equivariant(
        seed in any::<u64>(),
        reflect in any::<bool>(),
        shift in prop::array::uniform3(-3.0f64..3.0),
        first_order in any::<bool>(),
    ) {
        let variant = if first_order { Variant::FirstOrder } else { Variant::SecondOrder };
        let m = model(seed, 6, HiddenActivation::Silu, variant);
        let mut rng = ChaCha8Rng::seed_from_u64(!seed);
        let s = unit_masses(&mut rng, 4);
        let q = geometry::random_orthogonal(&mut rng, reflect);
        let base = pingo_forward(&s, &m).unwrap();
        let moved = pingo_forward(&s.transformed(&q, shift), &m).unwrap();
        prop_assert_eq!(moved.positions.len(), 7);
        for k in 0..=6 {
            let want_q: Vec<Vec3> = base.positions[k].iter().map(|x| geometry::add(geometry::mat_vec(&q, *x), shift)).collect();
            let want_v: Vec<Vec3> = base.velocities[k].iter().map(|x| geometry::mat_vec(&q, *x)).collect();
            prop_assert!(relative(&moved.positions[k], &want_q) < 1e-8, "positions at step {}", k);
            prop_assert!(relative(&moved.velocities[k], &want_v) < 1e-8, "velocities at step {}", k);
        }
    }
}

#[test]
fn path_starts_at_the_input_and_has_tau_plus_one_states() {
    let m = model(3, 8, HiddenActivation::Silu, Variant::SecondOrder);
    let s = unit_masses(&mut ChaCha8Rng::seed_from_u64(4), 5);
    let path = pingo_forward(&s, &m).unwrap();
    assert_eq!(path.positions.len(), 9);
    assert_eq!(path.positions[0], s.positions);
    assert_eq!(path.velocities[0], s.velocities);
}

#[test]
fn halving_the_step_halves_the_deviation() {
    // with a fixed smooth field the final state converges at first order
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let s = unit_masses(&mut rng, 4);
        let finals: Vec<Vec<Vec3>> = [8, 16, 32]
            .iter()
            .map(|&tau| {
                let m = model(seed, tau, HiddenActivation::Tanh, Variant::SecondOrder);
                pingo_forward(&s, &m).unwrap().final_positions().to_vec()
            })
            .collect();
        let coarse = geometry::distance(&finals[0], &finals[1]);
        let fine = geometry::distance(&finals[1], &finals[2]);
        let ratio = coarse / fine;
        assert!((1.6..=2.4).contains(&ratio), "seed {seed}: ratio {ratio}");
    }
}

#[test]
fn gradient_through_ten_steps_matches_finite_differences() {
    for seed in 0..5 {
        let m = model(seed, 10, HiddenActivation::Silu, Variant::SecondOrder);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let s = unit_masses(&mut rng, 3);
        let g = GraphBatch::from_states(&[&s]).unwrap();
        let q = GraphBatch::positions(&[&s]).unwrap();
        let v = GraphBatch::velocities(&[&s]).unwrap();
        let target = random_tensor(&mut rng, &[3, 3]);
        let err = max_grad_error(&m.backbone.parameters(), || {
            let path = m.path_tensors(&g, &q, &v, 10, true).unwrap();
            readout(&path.last().unwrap().0.sub(&target).unwrap(), &target)
        });
        assert!(err < 1e-3, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn single_window_rollout_is_the_forward_pass() {
    let m = model(9, 4, HiddenActivation::Silu, Variant::SecondOrder);
    let s = unit_masses(&mut ChaCha8Rng::seed_from_u64(9), 3);
    let path = pingo_forward(&s, &m).unwrap();
    let r = rollout(&[&s], &m, 1).unwrap();
    assert_eq!(r[0].windows[0].positions, path.final_positions());
    assert_eq!(r[0].windows[0].velocities, path.final_velocities());
}

#[test]
fn true_force_rollout_is_one_long_coarse_integration() {
    let law = ForceLaw {
        softening: 0.1,
        ..ForceLaw::gravity()
    };
    let s = unit_masses(&mut ChaCha8Rng::seed_from_u64(21), 4);
    let cfg = IntegratorConfig::new(5, 0.5).unwrap();
    let windows = 6;
    let r = rollout_with(&[&s], windows, cfg.horizon, DIVERGENCE_CAP, |states: &[&SystemState]| {
        no_grad(|| {
            let graphs: Vec<_> = states.iter().map(|st| st.graph.as_ref()).collect();
            let batch = GraphBatch::from_states(states)?;
            let snaps = integrate(
                &GraphBatch::positions(states)?,
                &GraphBatch::velocities(states)?,
                cfg.dt(),
                cfg.tau,
                Variant::SecondOrder,
                true,
                physics_field(&graphs, &batch, &law),
            )?;
            Ok(PredictedPath::from_batch(&batch, &snaps, cfg.dt())
                .into_iter()
                .map(|p| Prediction {
                    positions: p.final_positions().to_vec(),
                    velocities: Some(p.final_velocities().to_vec()),
                })
                .collect())
        })
    })
    .unwrap();
    let reference = generate_trajectory(&s, &law, cfg.tau * windows, cfg.dt()).unwrap();
    for w in 1..=windows {
        let truth = &reference.states[w * cfg.tau];
        assert!(max_abs_diff(&r[0].windows[w - 1].positions, &truth.positions) < 1e-12);
        assert!(max_abs_diff(&r[0].windows[w - 1].velocities, &truth.velocities) < 1e-12);
    }
}
