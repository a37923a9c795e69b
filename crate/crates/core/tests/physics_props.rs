mod common;

use std::sync::Arc;

use common::{max_abs, max_abs_diff, spread_state};
use pingo::geometry::{self, Vec3};
use pingo::physics::{
    generate_trajectory, masses, sample_initial_charged, sample_initial_gravity, true_accel, ForceLaw,
    GenerationConfig, ParticleGraph, SystemKind, SystemState,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_system(seed: u64, kind: SystemKind, n: usize) -> SystemState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attrs = match kind {
        SystemKind::Gravity => vec![1.0; n],
        SystemKind::Charged => (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect(),
    };
    spread_state(&mut rng, n, attrs, 0.3)
}

fn momentum(s: &SystemState, kind: SystemKind) -> Vec3 {
    let m = masses(&s.graph, kind);
    s.velocities
        .iter()
        .zip(&m)
        .fold([0.0; 3], |acc, (v, &mi)| geometry::add(acc, geometry::scale(*v, mi)))
}

fn kind_strategy() -> impl Strategy<Value = SystemKind> {
    prop_oneof![Just(SystemKind::Gravity), Just(SystemKind::Charged)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn momentum_is_conserved(seed in any::<u64>(), kind in kind_strategy(), n in 2usize..7) {
        let s = random_system(seed, kind, n);
        let law = ForceLaw::default_for(kind);
        let traj = generate_trajectory(&s, &law, 1000, 0.001).unwrap();
        let p0 = momentum(&traj.states[0], kind);
        let p1 = momentum(traj.states.last().unwrap(), kind);
        let drift = geometry::norm(geometry::sub(p1, p0));
        prop_assert!(drift < 1e-10, "momentum drift {drift:e}");
    }

    #[test]
    fn mass_weighted_forces_cancel(seed in any::<u64>(), kind in kind_strategy(), n in 2usize..8) {
        let s = random_system(seed, kind, n);
        let a = true_accel(&s, &ForceLaw::default_for(kind)).unwrap();
        let m = masses(&s.graph, kind);
        let total = a.iter().zip(&m).fold([0.0; 3], |acc, (ai, &mi)| geometry::add(acc, geometry::scale(*ai, mi)));
        prop_assert!(max_abs(&[total]) < 1e-12, "net force {total:?}");
    }

    #[test]
    fn force_depends_only_on_positions(seed in any::<u64>(), kind in kind_strategy()) {
        let s = random_system(seed, kind, 5);
        let law = ForceLaw::default_for(kind);
        let a = true_accel(&s, &law).unwrap();
        let mut other = s.clone();
        other.velocities = other.velocities.iter().map(|v| geometry::scale(*v, -3.0)).collect();
        prop_assert_eq!(a.clone(), true_accel(&s, &law).unwrap());
        prop_assert_eq!(a, true_accel(&other, &law).unwrap());
    }

    #[test]
    fn force_is_translation_invariant(
        seed in any::<u64>(),
        kind in kind_strategy(),
        shift in prop::array::uniform3(-3.0f64..3.0),
    ) {
        let s = random_system(seed, kind, 5);
        let law = ForceLaw::default_for(kind);
        let moved = s.transformed(&geometry::identity(), shift);
        let d = max_abs_diff(&true_accel(&s, &law).unwrap(), &true_accel(&moved, &law).unwrap());
        prop_assert!(d < 1e-12, "deviation {d:e}");
    }

    #[test]
    fn force_is_rotation_equivariant(seed in any::<u64>(), kind in kind_strategy(), reflect in any::<bool>()) {
        let s = random_system(seed, kind, 5);
        let law = ForceLaw::default_for(kind);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let q = geometry::random_orthogonal(&mut rng, reflect);
        let rotated = true_accel(&s.transformed(&q, [0.0; 3]), &law).unwrap();
        let expected: Vec<Vec3> = true_accel(&s, &law).unwrap().iter().map(|a| geometry::mat_vec(&q, *a)).collect();
        let d = max_abs_diff(&rotated, &expected);
        prop_assert!(d < 1e-10, "deviation {d:e}");
    }
}

#[test]
fn circular_two_body_orbit_keeps_its_radius() {
    // Each unit mass sits 0.5 from the centre and feels a unit pull, so the
    // circular speed solves v^2 / 0.5 = 1.
    let v = 0.5f64.sqrt();
    let graph = Arc::new(ParticleGraph::complete(vec![1.0, 1.0], 1).unwrap());
    let s = SystemState::new(
        vec![[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]],
        vec![[0.0, -v, 0.0], [0.0, v, 0.0]],
        graph,
    )
    .unwrap();
    let period = 2.0 * std::f64::consts::PI * 0.5 / v;
    let dt = 1e-4;
    let steps = (period / dt).ceil() as usize;
    let traj = generate_trajectory(&s, &ForceLaw::gravity(), steps, dt).unwrap();
    let worst = traj
        .states
        .iter()
        .map(|st| (geometry::norm(geometry::sub(st.positions[1], st.positions[0])) - 1.0).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.01, "radius drift {worst}");
    // one full period brings the pair back near its start
    let end = traj.states.last().unwrap();
    assert!(geometry::norm(geometry::sub(end.positions[1], [0.5, 0.0, 0.0])) < 0.01);
}

fn position_std(samples: &[SystemState]) -> f64 {
    let xs: Vec<f64> = samples.iter().flat_map(|s| s.positions.iter().flatten().copied()).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[test]
fn gravity_sampler_statistics() {
    let cfg = GenerationConfig::new(SystemKind::Gravity, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // 5 bodies x 3 coordinates x 7000 systems > 1e5 draws
    let samples: Vec<SystemState> = (0..7000).map(|_| sample_initial_gravity(&cfg, &mut rng).unwrap()).collect();
    let std = position_std(&samples);
    assert!((0.99..=1.01).contains(&std), "std {std}");
    for s in &samples {
        assert!(s.graph.attributes().iter().all(|&m| m == 1.0));
        for v in &s.velocities {
            assert!((geometry::norm(*v) - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn charged_sampler_statistics() {
    let cfg = GenerationConfig::new(SystemKind::Charged, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let samples: Vec<SystemState> = (0..7000).map(|_| sample_initial_charged(&cfg, &mut rng).unwrap()).collect();
    let std = position_std(&samples);
    assert!((0.49..=0.51).contains(&std), "std {std}");
    for s in &samples {
        assert!(s.graph.attributes().iter().all(|&c| c == 1.0 || c == -1.0));
        for v in &s.velocities {
            assert!((geometry::norm(*v) - 0.5).abs() < 1e-12);
        }
        for (k, &(i, j)) in s.graph.edges().iter().enumerate() {
            assert_eq!(s.graph.edge_attrs()[k], s.graph.attribute(i)[0] * s.graph.attribute(j)[0]);
        }
    }
}
