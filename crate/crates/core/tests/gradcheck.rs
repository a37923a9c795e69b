mod common;

use common::{max_grad_error, random_tensor, readout, unit_masses};
use pingo::egnn::{DirectEgnn, DirectEgnnConfig, Egnn, EgnnConfig, GraphBatch};
use pingo::integrator::{IntegratorConfig, PingoModel, Variant};
use pingo::tensor::{FinalActivation, HiddenActivation, Linear, Mlp, MlpSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;
const TOL: f64 = 1e-4;

const ACTIVATIONS: [HiddenActivation; 4] = [
    HiddenActivation::Silu,
    HiddenActivation::Relu,
    HiddenActivation::Tanh,
    HiddenActivation::Identity,
];

#[test]
fn linear_layer_gradients() {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = Linear::new(4, 3, true, &mut rng);
        let x = random_tensor(&mut rng, &[5, 4]);
        let w = random_tensor(&mut rng, &[5, 3]);
        worst = worst.max(max_grad_error(&layer.parameters("l"), || {
            readout(&layer.forward(&x).unwrap(), &w)
        }));
    }
    assert!(worst < TOL, "max relative error {worst:e}");
}

#[test]
fn mlp_gradients_for_every_activation() {
    for act in ACTIVATIONS {
        for head in [FinalActivation::None, FinalActivation::Sigmoid] {
            let mut worst: f64 = 0.0;
            for seed in 0..SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec = MlpSpec {
                    layer_widths: vec![3, 6, 5, 2],
                    activation: act,
                    final_activation: head,
                };
                let mlp = Mlp::new(&spec, &mut rng).unwrap();
                let x = random_tensor(&mut rng, &[7, 3]);
                let w = random_tensor(&mut rng, &[7, 2]);
                worst = worst.max(max_grad_error(&mlp.parameters("m"), || readout(&mlp.forward(&x).unwrap(), &w)));
            }
            assert!(worst < TOL, "{act:?}/{head:?}: max relative error {worst:e}");
        }
    }
}

#[test]
fn two_layer_mlp_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mlp = Mlp::new(&MlpSpec::new(vec![4, 8, 1], HiddenActivation::Silu), &mut rng).unwrap();
    let x = Tensor::parameter(&[6, 4], random_tensor(&mut rng, &[6, 4]).to_vec()).unwrap();
    let mut params = mlp.parameters("m");
    params.push(("x".into(), x.clone()));
    let err = max_grad_error(&params, || mlp.forward(&x).unwrap().sum());
    assert!(err < TOL, "max relative error {err:e}");
}

fn egnn_config(act: HiddenActivation, persistent: bool) -> EgnnConfig {
    let mut cfg = EgnnConfig::new(1, 4, 2, act);
    cfg.persistent_h = persistent;
    cfg
}

#[test]
fn egnn_gradients_wrt_parameters_and_positions() {
    for persistent in [false, true] {
        let mut worst: f64 = 0.0;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Egnn::new(&egnn_config(HiddenActivation::Silu, persistent), &mut rng).unwrap();
            let s = unit_masses(&mut rng, 3);
            let g = GraphBatch::from_states(&[&s]).unwrap();
            let q = Tensor::parameter(&[3, 3], GraphBatch::positions(&[&s]).unwrap().to_vec()).unwrap();
            let w = random_tensor(&mut rng, &[3, 3]);
            let mut params = net.parameters();
            params.push(("q".into(), q.clone()));
            worst = worst.max(max_grad_error(&params, || {
                readout(&net.forward(&g, &q, None).unwrap().accel, &w)
            }));
        }
        assert!(worst < TOL, "persistent={persistent}: max relative error {worst:e}");
    }
}

#[test]
fn direct_baseline_gradients() {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DirectEgnnConfig {
            n_layers: 3,
            hidden_dim: 4,
            d_node: 1,
            activation: HiddenActivation::Tanh,
        };
        let net = DirectEgnn::new(&cfg, &mut rng).unwrap();
        let s = unit_masses(&mut rng, 3);
        let g = GraphBatch::from_states(&[&s]).unwrap();
        let q = GraphBatch::positions(&[&s]).unwrap();
        let v = GraphBatch::velocities(&[&s]).unwrap();
        let w = random_tensor(&mut rng, &[3, 3]);
        worst = worst.max(max_grad_error(&net.parameters(), || {
            let out = net.forward(&g, &q, &v, 0.5).unwrap();
            readout(out.positions.last().unwrap(), &w)
        }));
    }
    assert!(worst < TOL, "max relative error {worst:e}");
}

#[test]
fn integrator_gradients_for_both_variants() {
    for variant in [Variant::SecondOrder, Variant::FirstOrder] {
        let mut worst: f64 = 0.0;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Egnn::new(&egnn_config(HiddenActivation::Silu, false), &mut rng).unwrap();
            let model = PingoModel::new(net, IntegratorConfig::new(3, 0.6).unwrap(), variant).unwrap();
            let s = unit_masses(&mut rng, 3);
            let g = GraphBatch::from_states(&[&s]).unwrap();
            let q = GraphBatch::positions(&[&s]).unwrap();
            let v = GraphBatch::velocities(&[&s]).unwrap();
            let w = random_tensor(&mut rng, &[3, 3]);
            worst = worst.max(max_grad_error(&model.backbone.parameters(), || {
                let path = model.path_tensors(&g, &q, &v, 3, true).unwrap();
                readout(&path.last().unwrap().0, &w)
            }));
        }
        assert!(worst < TOL, "{variant}: max relative error {worst:e}");
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mlp = Mlp::new(&MlpSpec::new(vec![3, 5, 2], HiddenActivation::Tanh), &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[4, 3]);
    let w1 = random_tensor(&mut rng, &[4, 2]);
    let w2 = random_tensor(&mut rng, &[4, 2]);
    let params = mlp.parameters("m");
    let grads = |loss: Tensor| {
        for (_, p) in &params {
            p.clear_grad();
        }
        loss.backward().unwrap();
        params.iter().flat_map(|(_, p)| p.grad().unwrap()).collect::<Vec<f64>>()
    };
    let (a, b) = (2.5, -0.75);
    let gf = grads(readout(&mlp.forward(&x).unwrap(), &w1));
    let gg = grads(mlp.forward(&x).unwrap().mul(&w2).unwrap().sum());
    let y = mlp.forward(&x).unwrap();
    let combined = grads(
        readout(&y, &w1)
            .scale(a)
            .add(&y.mul(&w2).unwrap().sum().scale(b))
            .unwrap(),
    );
    for ((c, f), g) in combined.iter().zip(&gf).zip(&gg) {
        let want = a * f + b * g;
        assert!((c - want).abs() <= 1e-12 * (1.0 + want.abs()), "{c} vs {want}");
    }
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let net = Egnn::new(&egnn_config(HiddenActivation::Silu, false), &mut rng).unwrap();
        let model = PingoModel::new(net, IntegratorConfig::new(4, 1.0).unwrap(), Variant::SecondOrder).unwrap();
        let s = unit_masses(&mut rng, 4);
        let g = GraphBatch::from_states(&[&s]).unwrap();
        let q = GraphBatch::positions(&[&s]).unwrap();
        let v = GraphBatch::velocities(&[&s]).unwrap();
        let out = model.path_tensors(&g, &q, &v, 4, true).unwrap().last().unwrap().0.clone();
        out.square().sum().backward().unwrap();
        let grads: Vec<f64> = model.backbone.parameters().iter().flat_map(|(_, p)| p.grad().unwrap()).collect();
        (out.to_vec(), grads)
    };
    let (a_out, a_grad) = run();
    let (b_out, b_grad) = run();
    assert_eq!(a_out.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b_out.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(a_grad.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b_grad.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}
