mod common;

use common::*;
use rand::Rng;
use sosp::autodiff::{self, Batch, LossKind, Targets};
use sosp::engine::Network;
use sosp::params::ParamVector;

fn check_gradient(model: sosp::model::ModelSpec, kind: LossKind, seed: u64) -> f64 {
    let net = Network::new(&model).unwrap();
    let p = random_params(&net, seed);
    let batch = match kind {
        LossKind::CrossEntropy => label_batch(&net, 5, seed),
        LossKind::Squared => value_batch(&net, 5, seed),
    };
    let g = autodiff::gradient(&net, &p, &batch, kind).unwrap();
    let fd = fd_gradient(&p.values, 1e-5, |x| {
        let q = ParamVector::from_values(p.layout.clone(), x.to_vec()).unwrap();
        autodiff::mean_loss(&net, &q, &batch, kind).unwrap()
    });
    let mask = p.layout.trainable_mask();
    let fd: Vec<f64> = fd.iter().zip(&mask).map(|(&v, &t)| if t { v } else { 0.0 }).collect();
    rel_err(&g.values, &fd)
}

#[test]
fn gradient_matches_finite_differences_on_every_layer_type() {
    for (name, model) in [
        ("mlp", small_mlp(true)),
        ("convnet", small_convnet(true, true)),
        ("convnet_plain", small_convnet(false, false)),
        ("restoy", small_restoy(true)),
    ] {
        for kind in [LossKind::CrossEntropy, LossKind::Squared] {
            let e = check_gradient(model.clone(), kind, 3);
            assert!(e <= 1e-5, "{name} {kind:?}: rel err {e:e}");
        }
    }
}

#[test]
fn frozen_blocks_get_zero_gradient() {
    let net = Network::new(&small_convnet(false, true)).unwrap();
    let p = random_params(&net, 1);
    let g = autodiff::gradient(&net, &p, &label_batch(&net, 4, 1), LossKind::CrossEntropy).unwrap();
    for b in net.layout().blocks.iter().filter(|b| !b.trainable) {
        assert!(g.values[b.range()].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn train_mode_gradient_matches_finite_differences() {
    for model in [small_convnet(false, true), small_restoy(true)] {
        let net = Network::new(&model).unwrap();
        let p = random_params(&net, 7);
        let batch = label_batch(&net, 6, 7);
        let tg = autodiff::train_gradient(&net, &p, &batch, LossKind::CrossEntropy).unwrap();
        let fd = fd_gradient(&p.values, 1e-5, |x| {
            let q = ParamVector::from_values(p.layout.clone(), x.to_vec()).unwrap();
            autodiff::train_gradient(&net, &q, &batch, LossKind::CrossEntropy)
                .unwrap()
                .loss
        });
        let e = rel_err(&tg.grad, &fd);
        assert!(e <= 1e-5, "{}: rel err {e:e}", model.name);
    }
}

#[test]
fn hvp_matches_finite_differenced_gradients() {
    for model in [small_mlp(true), small_convnet(true, true), small_restoy(true)] {
        let net = Network::new(&model).unwrap();
        let p = random_params(&net, 11);
        let batch = label_batch(&net, 4, 11);
        let mut r = rng(5);
        let v: Vec<f64> = (0..p.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let hv = autodiff::hvp(&net, &p, &batch, LossKind::CrossEntropy, &v).unwrap();
        let h = 1e-5;
        let shifted = |sign: f64| {
            let mask = p.layout.trainable_mask();
            let x: Vec<f64> = p
                .values
                .iter()
                .zip(&v)
                .zip(mask)
                .map(|((&a, &b), t)| if t { a + sign * h * b } else { a })
                .collect();
            let q = ParamVector::from_values(p.layout.clone(), x).unwrap();
            autodiff::gradient(&net, &q, &batch, LossKind::CrossEntropy).unwrap().values
        };
        let (up, down) = (shifted(1.0), shifted(-1.0));
        let fd: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let e = rel_err(&hv.values, &fd);
        assert!(e <= 1e-5, "{}: rel err {e:e}", model.name);
    }
}

#[test]
fn hvp_is_symmetric_and_linear() {
    let net = Network::new(&small_restoy(true)).unwrap();
    let p = random_params(&net, 2);
    let batch = label_batch(&net, 4, 2);
    let mut r = rng(9);
    let mut rand_vec = || -> Vec<f64> { (0..p.len()).map(|_| r.gen_range(-1.0..1.0)).collect() };
    let (u, w) = (rand_vec(), rand_vec());
    let mask = p.layout.trainable_mask();
    let u: Vec<f64> = u.iter().zip(&mask).map(|(&a, &t)| if t { a } else { 0.0 }).collect();
    let w: Vec<f64> = w.iter().zip(&mask).map(|(&a, &t)| if t { a } else { 0.0 }).collect();
    let hu = autodiff::hvp(&net, &p, &batch, LossKind::CrossEntropy, &u).unwrap().values;
    let hw = autodiff::hvp(&net, &p, &batch, LossKind::CrossEntropy, &w).unwrap().values;
    assert!(scalar_rel_err(dot(&u, &hw), dot(&w, &hu)) <= 1e-9);
    let combo: Vec<f64> = u.iter().zip(&w).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
    let hc = autodiff::hvp(&net, &p, &batch, LossKind::CrossEntropy, &combo).unwrap().values;
    let expect: Vec<f64> = hu.iter().zip(&hw).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
    assert!(rel_err(&hc, &expect) <= 1e-10);
    let zero = autodiff::hvp(&net, &p, &batch, LossKind::CrossEntropy, &vec![0.0; p.len()]).unwrap();
    assert!(zero.values.iter().all(|&v| v == 0.0));
}

#[test]
fn linear_model_hessian_is_constant() {
    let model = sosp::zoo::mlp_toy(4, &[], 3, true);
    let net = Network::new(&model).unwrap();
    let batch = value_batch(&net, 6, 3);
    let v: Vec<f64> = random_inputs(1, net.layout().len, 8);
    let a = autodiff::hvp(&net, &random_params(&net, 1), &batch, LossKind::Squared, &v).unwrap();
    let b = autodiff::hvp(&net, &random_params(&net, 2), &batch, LossKind::Squared, &v).unwrap();
    assert!(rel_err(&a.values, &b.values) <= 1e-12);
}

#[test]
fn jacobian_matches_finite_differences() {
    let net = Network::new(&small_restoy(true)).unwrap();
    let p = random_params(&net, 4);
    let x = random_inputs(1, net.input_size(), 4);
    let j = autodiff::jacobian(&net, &p, &x).unwrap();
    let d = net.output_size();
    for row in 0..d {
        let fd = fd_gradient(&p.values, 1e-5, |v| {
            let q = ParamVector::from_values(p.layout.clone(), v.to_vec()).unwrap();
            autodiff::forward(&net, &q, &x, 1).unwrap()[row]
        });
        let mask = p.layout.trainable_mask();
        let fd: Vec<f64> = fd.iter().zip(&mask).map(|(&v, &t)| if t { v } else { 0.0 }).collect();
        let got = &j[row * p.len()..(row + 1) * p.len()];
        assert!(rel_err(got, &fd) <= 1e-5);
    }
}

#[test]
fn forward_is_pure_and_chunk_invariant() {
    let net = Network::new(&small_convnet(false, true)).unwrap();
    let p = random_params(&net, 3);
    let n = 300;
    let x = random_inputs(n, net.input_size(), 3);
    let a = autodiff::forward(&net, &p, &x, n).unwrap();
    let b = autodiff::forward(&net, &p, &x, n).unwrap();
    assert_eq!(a, b);
    let single = autodiff::forward(&net, &p, &x[..net.input_size()], 1).unwrap();
    assert_eq!(&a[..net.output_size()], &single[..]);
}

#[test]
fn hand_evaluated_two_layer_mlp() {
    let model = sosp::zoo::mlp_toy(2, &[2], 1, false);
    let net = Network::new(&model).unwrap();
    // W1 = [[1,-2],[0.5,1]], W2 = [[3,-1]]
    let p = ParamVector::from_values(net.layout().clone(), vec![1.0, -2.0, 0.5, 1.0, 3.0, -1.0]).unwrap();
    let out = autodiff::forward(&net, &p, &[2.0, 0.5], 1).unwrap();
    // h = relu([1, 1.5]) ; y = 3 - 1.5
    assert_eq!(out, vec![1.5]);
    let b = Batch::new(vec![2.0, 0.5], 1, Targets::Values(vec![0.0])).unwrap();
    assert_eq!(autodiff::mean_loss(&net, &p, &b, LossKind::Squared).unwrap(), 1.125);
}
