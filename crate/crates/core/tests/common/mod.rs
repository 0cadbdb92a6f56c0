#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sosp::autodiff::{Batch, Targets};
use sosp::engine::Network;
use sosp::model::ModelSpec;
use sosp::params::ParamVector;
use sosp::zoo::{mlp_toy, ConvNetToy, ResToy};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_convnet(bias: bool, batch_norm: bool) -> ModelSpec {
    ConvNetToy {
        input: (2, 4, 4),
        widths: vec![3, 3, 4, 4, 5, 5],
        classes: 3,
        batch_norm,
        bias,
    }
    .build()
}

pub fn small_restoy(batch_norm: bool) -> ModelSpec {
    ResToy {
        input: (2, 4, 4),
        widths: [3, 4, 5],
        blocks_per_stage: 2,
        classes: 3,
        batch_norm,
    }
    .build()
}

pub fn small_mlp(bias: bool) -> ModelSpec {
    mlp_toy(5, &[6, 4], 3, bias)
}

/// Parameters with random running statistics and BN scale/shift, so every
/// block is exercised.
pub fn random_params(net: &Network, seed: u64) -> ParamVector {
    use sosp::params::ParamRole;
    let mut p = ParamVector::init(net.model(), seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for b in &net.layout().blocks.clone() {
        for v in &mut p.values[b.range()] {
            match b.role {
                ParamRole::BnScale => *v = r.gen_range(0.5..1.5),
                ParamRole::BnShift | ParamRole::BnRunningMean | ParamRole::Bias => *v = r.gen_range(-0.3..0.3),
                ParamRole::BnRunningVar => *v = r.gen_range(0.5..2.0),
                ParamRole::Weight => {}
            }
        }
    }
    p
}

pub fn random_inputs(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn label_batch(net: &Network, n: usize, seed: u64) -> Batch {
    let mut r = rng(seed.wrapping_add(17));
    let labels = (0..n).map(|_| r.gen_range(0..net.output_size())).collect();
    Batch::new(random_inputs(n, net.input_size(), seed), n, Targets::Labels(labels)).unwrap()
}

pub fn value_batch(net: &Network, n: usize, seed: u64) -> Batch {
    let targets = random_inputs(n, net.output_size(), seed.wrapping_add(99));
    Batch::new(random_inputs(n, net.input_size(), seed), n, Targets::Values(targets)).unwrap()
}

/// Central finite differences of `f` at `x`, step `h`.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let up = f(&x);
            x[i] = x0 - h;
            let down = f(&x);
            x[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

pub fn scalar_rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(a.abs()).max(1e-300)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Explicit Hessian of `grad_fn`'s underlying function, built column by
/// column from five-point finite differences of the gradient.
pub fn explicit_hessian(x: &[f64], h: f64, mut grad_fn: impl FnMut(&[f64]) -> Vec<f64>, active: &[bool]) -> Vec<Vec<f64>> {
    let p = x.len();
    let mut cols = vec![vec![0.0; p]; p];
    let mut xs = x.to_vec();
    for j in 0..p {
        if !active[j] {
            continue;
        }
        let x0 = xs[j];
        let mut at = |d: f64| {
            xs[j] = x0 + d;
            let g = grad_fn(&xs);
            xs[j] = x0;
            g
        };
        let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
        for i in 0..p {
            cols[j][i] = (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h);
        }
    }
    // cols[j] is column j; return rows (symmetric up to FD error)
    let mut rows = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..p {
            rows[i][j] = cols[j][i];
        }
    }
    rows
}

pub fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

pub fn zero_biases(p: &mut ParamVector) {
    for b in p.layout.blocks.clone() {
        if b.role == sosp::params::ParamRole::Bias {
            p.values[b.range()].fill(0.0);
        }
    }
}
