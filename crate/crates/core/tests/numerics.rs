mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{bitwise_eq, random_matrix};
use prdim::numerics::{
    finite_diff_check, mlp_backward, mlp_forward, optimizer_step, Activation, Gradients, Init, Linear, LinearGrad, Mlp,
    OptimizerKind, OptimizerState, OutputActivation, Tensor,
};
use prdim::Error;

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// Straight-line forward pass with explicit index loops.
fn oracle_forward(net: &Mlp, x: &Tensor) -> Vec<f64> {
    let layers = net.layers();
    let mut out = Vec::new();
    for i in 0..x.rows() {
        let mut h: Vec<f64> = x.row(i).to_vec();
        for (l, layer) in layers.iter().enumerate() {
            let mut z = vec![0.0; layer.d_out()];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut acc = layer.bias.values()[o];
                for (k, hk) in h.iter().enumerate() {
                    acc += hk * layer.weight.get(k, o);
                }
                *zo = acc;
            }
            h = if l + 1 < layers.len() {
                z.into_iter().map(silu).collect()
            } else {
                match net.output_activation() {
                    OutputActivation::Identity => z,
                    OutputActivation::Sigmoid => z.into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
                }
            };
        }
        out.extend(h);
    }
    out
}

#[test]
fn forward_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for output in [OutputActivation::Identity, OutputActivation::Sigmoid] {
        let net = Mlp::new(&[4, 7, 3], Activation::Silu, output, Init::Uniform, &mut rng).unwrap();
        let x = random_matrix(9, 4, &mut rng);
        let got = mlp_forward(&net, &x).unwrap();
        for (a, b) in got.values().iter().zip(oracle_forward(&net, &x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_and_identity_nets() {
    let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
    let z = Mlp::zeros(&[3, 4, 3], Activation::Silu, OutputActivation::Identity).unwrap();
    assert!(mlp_forward(&z, &x).unwrap().values().iter().all(|&v| v == 0.0));
    let z = Mlp::zeros(&[3, 4, 3], Activation::Silu, OutputActivation::Sigmoid).unwrap();
    assert!(mlp_forward(&z, &x).unwrap().values().iter().all(|&v| v == 0.5));
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.set(i, i, 1.0);
    }
    let id = Mlp::from_layers(vec![Linear { weight: eye, bias: Tensor::zeros(&[3]) }], Activation::Silu, OutputActivation::Identity)
        .unwrap();
    assert_eq!(mlp_forward(&id, &x).unwrap(), x);
    assert!(matches!(mlp_forward(&id, &Tensor::zeros(&[2, 4])), Err(Error::Shape(_))));
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for act in [Activation::Silu, Activation::Relu] {
        for output in [OutputActivation::Identity, OutputActivation::Sigmoid] {
            let net = Mlp::new(&[3, 5, 4, 2], act, output, Init::Uniform, &mut rng).unwrap();
            let x = random_matrix(4, 3, &mut rng);
            let up = random_matrix(4, 2, &mut rng);
            let objective = |n: &Mlp, x: &Tensor| -> f64 {
                mlp_forward(n, x).unwrap().values().iter().zip(up.values()).map(|(a, b)| a * b).sum()
            };
            let grads = mlp_backward(&net, &x, &up).unwrap();
            let params = net.flat_params();
            let r = finite_diff_check(
                |p| {
                    let mut n = net.clone();
                    n.set_flat_params(p.values()).unwrap();
                    objective(&n, &x)
                },
                &params,
                &grads.flatten(),
                1e-5,
            );
            assert!(r.max_rel_error < 1e-6, "{act:?}/{output:?} params: {r:?}");
            let r = finite_diff_check(|p| objective(&net, p), &x, grads.input.as_ref().unwrap(), 1e-5);
            assert!(r.max_rel_error < 1e-6, "{act:?}/{output:?} input: {r:?}");
        }
    }
}

#[test]
fn zero_upstream_and_linear_input_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let net = Mlp::new(&[3, 4, 2], Activation::Silu, OutputActivation::Identity, Init::Uniform, &mut rng).unwrap();
    let x = random_matrix(5, 3, &mut rng);
    let g = mlp_backward(&net, &x, &Tensor::zeros(&[5, 2])).unwrap();
    assert_eq!(g.param_norm(), 0.0);
    assert!(g.input.unwrap().values().iter().all(|&v| v == 0.0));

    let lin = Mlp::new(&[3, 2], Activation::Silu, OutputActivation::Identity, Init::Uniform, &mut rng).unwrap();
    let up = random_matrix(5, 2, &mut rng);
    let gi = mlp_backward(&lin, &x, &up).unwrap().input.unwrap();
    let w = &lin.layers()[0].weight;
    for i in 0..5 {
        for k in 0..3 {
            let expect: f64 = (0..2).map(|o| w.get(k, o) * up.get(i, o)).sum();
            assert!((gi.get(i, k) - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn passes_are_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let net = Mlp::new(&[6, 16, 6], Activation::Silu, OutputActivation::Sigmoid, Init::Uniform, &mut rng).unwrap();
    let x = random_matrix(33, 6, &mut rng);
    let up = random_matrix(33, 6, &mut rng);
    assert!(bitwise_eq(&mlp_forward(&net, &x).unwrap(), &mlp_forward(&net, &x).unwrap()));
    let (a, b) = (mlp_backward(&net, &x, &up).unwrap(), mlp_backward(&net, &x, &up).unwrap());
    assert!(bitwise_eq(&a.flatten(), &b.flatten()));
}

fn scalar_net(w: f64) -> Mlp {
    let layer = Linear { weight: Tensor::matrix(1, 1, vec![w]).unwrap(), bias: Tensor::zeros(&[1]) };
    Mlp::from_layers(vec![layer], Activation::Silu, OutputActivation::Identity).unwrap()
}

fn scalar_grads(gw: f64) -> Gradients {
    Gradients {
        layers: vec![LinearGrad { weight: Tensor::matrix(1, 1, vec![gw]).unwrap(), bias: Tensor::zeros(&[1]) }],
        input: None,
    }
}

#[test]
fn sgd_on_square_and_zero_lr() {
    // f(w) = w², gradient 2w.
    let mut net = scalar_net(1.0);
    let mut st = OptimizerState::new(OptimizerKind::Sgd);
    optimizer_step(&mut net, &scalar_grads(2.0), &mut st, 0.1).unwrap();
    assert!((net.layers()[0].weight.values()[0] - 0.8).abs() < 1e-15);

    let before = net.clone();
    let mut adam = OptimizerState::new(OptimizerKind::default());
    optimizer_step(&mut net, &scalar_grads(5.0), &mut adam, 0.0).unwrap();
    assert_eq!(net, before);
}

#[test]
fn adam_first_step_matches_closed_form() {
    // Bias-corrected moments equal g and g² after one step.
    for g in [3.0, -0.02, 1e-3] {
        let mut net = scalar_net(0.5);
        let mut st = OptimizerState::new(OptimizerKind::default());
        optimizer_step(&mut net, &scalar_grads(g), &mut st, 0.01).unwrap();
        let expect = 0.5 - 0.01 * g / (g.abs() + 1e-8);
        assert!((net.layers()[0].weight.values()[0] - expect).abs() < 1e-12);
    }
}

#[test]
fn sgd_on_convex_quadratic_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_matrix(40, 3, &mut rng);
    let y = random_matrix(40, 2, &mut rng);
    let mut net = Mlp::new(&[3, 2], Activation::Silu, OutputActivation::Identity, Init::Uniform, &mut rng).unwrap();
    let mut st = OptimizerState::new(OptimizerKind::Sgd);
    let loss = |n: &Mlp| -> (f64, Tensor) {
        let p = mlp_forward(n, &x).unwrap();
        let r = p.zip_map(&y, |a, b| a - b).unwrap();
        let count = r.len() as f64;
        (r.values().iter().map(|v| v * v).sum::<f64>() / count, r.scale(2.0 / count))
    };
    let mut prev = f64::INFINITY;
    for _ in 0..100 {
        let (l, up) = loss(&net);
        assert!(l <= prev);
        prev = l;
        let g = mlp_backward(&net, &x, &up).unwrap();
        optimizer_step(&mut net, &g, &mut st, 0.1).unwrap();
    }
}

#[test]
fn non_finite_gradient_names_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut net = Mlp::new(&[2, 3, 2], Activation::Silu, OutputActivation::Identity, Init::Uniform, &mut rng).unwrap();
    let before = net.clone();
    let mut g = Gradients::zeros_like(&net);
    g.layers[1].bias.values_mut()[0] = f64::NAN;
    let err = optimizer_step(&mut net, &g, &mut OptimizerState::new(OptimizerKind::Sgd), 0.1).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient { layer: 1 }));
    assert_eq!(net, before);
}

proptest! {
    #[test]
    fn matmul_matches_naive(r in 1usize..7, k in 1usize..7, c in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(r, k, &mut rng);
        let b = random_matrix(k, c, &mut rng);
        let p = a.matmul(&b).unwrap();
        for i in 0..r {
            for j in 0..c {
                let expect: f64 = (0..k).map(|q| a.get(i, q) * b.get(q, j)).sum();
                prop_assert!((p.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_outputs_in_open_interval(z in -1e6f64..1e6) {
        let s = prdim::numerics::sigmoid(z);
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn flat_params_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[3, 4, 2], Activation::Relu, OutputActivation::Sigmoid, Init::Uniform, &mut rng).unwrap();
        let mut other = Mlp::zeros(&net.layer_dims(), Activation::Relu, OutputActivation::Sigmoid).unwrap();
        other.set_flat_params(net.flat_params().values()).unwrap();
        prop_assert_eq!(other, net);
    }
}
