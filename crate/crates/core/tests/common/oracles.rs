use rand::Rng;
use sosp::autodiff::{self, Batch, LossKind};
use sosp::engine::Network;
use sosp::model::{Layer, ModelSpec, ResidualKind};
use sosp::params::{ParamRole, ParamVector};
use sosp::saliency::{r_matrix, QMatrix};
use sosp::selection::{select_random, Method, PruningMask, SelectionPolicy};
use sosp::structures::{extract_theta_s, segment, Segmentation};
use sosp::zoo::mlp_toy;

use super::{dot, rng};

/// `J theta_s` from the explicit Jacobian.
pub fn jacobian_projection(net: &Network, p: &ParamVector, x: &[f64], theta: &[f64]) -> Vec<f64> {
    let j = autodiff::jacobian(net, p, x).unwrap();
    j.chunks(p.len()).map(|row| dot(row, theta)).collect()
}

/// Dense Gauss-Newton oracle: 1/2 |theta_s^T (mean_n J^T R J) theta_t| + delta * lambda1.
pub fn dense_q(net: &Network, p: &ParamVector, batch: &Batch, kind: LossKind) -> Vec<f64> {
    let seg = segment(net.model()).unwrap();
    let size = seg.len();
    let d = net.output_size();
    let isz = net.input_size();
    let big_p = p.len();
    let mut gn = vec![0.0; big_p * big_p];
    for k in 0..batch.n {
        let x = &batch.inputs[k * isz..(k + 1) * isz];
        let j = autodiff::jacobian(net, p, x).unwrap();
        let out = autodiff::forward(net, p, x, 1).unwrap();
        let r = r_matrix(&out, kind).dense(d);
        // J^T R J
        let mut rj = vec![0.0; d * big_p];
        for a in 0..d {
            for b in 0..d {
                for c in 0..big_p {
                    rj[a * big_p + c] += r[a * d + b] * j[b * big_p + c];
                }
            }
        }
        for a in 0..d {
            for u in 0..big_p {
                let ja = j[a * big_p + u];
                if ja == 0.0 {
                    continue;
                }
                for v in 0..big_p {
                    gn[u * big_p + v] += ja * rj[a * big_p + v];
                }
            }
        }
    }
    gn.iter_mut().for_each(|v| *v /= batch.n as f64);
    let g = autodiff::gradient(net, p, batch, kind).unwrap();
    let thetas: Vec<Vec<f64>> = (0..size).map(|s| extract_theta_s(p, &seg, s).unwrap().to_dense()).collect();
    let mut q = vec![0.0; size * size];
    for s in 0..size {
        let gs: Vec<f64> = (0..big_p).map(|u| dot(&gn[u * big_p..(u + 1) * big_p], &thetas[s])).collect();
        for t in 0..size {
            q[t * size + s] = 0.5 * dot(&thetas[t], &gs).abs();
        }
        q[s * size + s] += dot(&thetas[s], &g.values).abs();
    }
    q
}

/// Segmentation with `widths` structures per layer (dense layers, kernel 1).
pub fn seg_of(widths: &[usize]) -> Segmentation {
    segment(&mlp_toy(2, widths, 1, false)).unwrap()
}

/// Literal greedy: at every step evaluate objective(M + s) - objective(M) by
/// summing all pairs, lowest id wins ties.
pub fn literal_greedy(q: &QMatrix, m: usize) -> Vec<usize> {
    let objective = |set: &[usize]| -> f64 {
        let mut t = 0.0;
        for &a in set {
            for &b in set {
                t += q.get(a, b);
            }
        }
        t
    };
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..m {
        let base = objective(&chosen);
        let mut best: Option<(usize, f64)> = None;
        for s in 0..q.size {
            if chosen.contains(&s) {
                continue;
            }
            let mut with = chosen.clone();
            with.push(s);
            let inc = objective(&with) - base;
            if best.is_none() || inc < best.unwrap().1 {
                best = Some((s, inc));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

pub fn random_q(size: usize, r: &mut impl Rng, dyadic: bool) -> QMatrix {
    let mut v = vec![0.0; size * size];
    for i in 0..size {
        for j in i..size {
            let x = if dyadic {
                r.gen_range(0..64) as f64 / 8.0
            } else {
                r.gen_range(0.0..1.0)
            };
            v[i * size + j] = x;
            v[j * size + i] = x;
        }
    }
    QMatrix::new(size, v).unwrap()
}

pub fn random_mask(seg: &Segmentation, r: &mut impl Rng) -> PruningMask {
    let ratio = r.gen_range(0.0..=1.0);
    select_random(seg, &SelectionPolicy::new(Method::Random), ratio, r.gen()).unwrap()
}

/// Oracle: run the zeroed network with strictly positive inputs, weights and
/// batch-norm affine terms (zero running means) and read off which channels
/// of every tensor are nonzero. Costs are then computed from those sets.
pub fn traced_counts(model: &ModelSpec, seg: &Segmentation, mask: &PruningMask) -> (u64, u64) {
    let net = Network::new(model).unwrap();
    let mut p = ParamVector::init(model, 0).unwrap();
    let mut r = rng(3);
    for b in p.layout.blocks.clone() {
        for v in &mut p.values[b.range()] {
            *v = match b.role {
                ParamRole::BnRunningMean => 0.0,
                ParamRole::BnRunningVar => 1.0,
                _ => r.gen_range(0.1..1.0),
            };
        }
    }
    for e in &mask.entries {
        for &i in &seg.structures[e.structure].indices {
            p.values[i] = 0.0;
        }
    }
    let x: Vec<f64> = (0..net.input_size()).map(|_| r.gen_range(0.1..1.0)).collect();
    let acts = autodiff::activations(&net, &p, &x, 1).unwrap();
    let shapes = model.shapes().unwrap();
    let channels = |v: &[f64], shape: sosp::model::Shape| -> usize {
        let sp = shape.spatial();
        (0..shape.channels()).filter(|&c| v[c * sp..(c + 1) * sp].iter().any(|&a| a != 0.0)).count()
    };
    let live = |t: Option<usize>| -> usize {
        match t {
            None => channels(&x, shapes.input),
            Some(l) => channels(&acts.outputs[l], shapes.outputs[l]),
        }
    };
    let out_live = |l: usize| -> usize {
        // branch output before any add: count channels of the layer's own weights that are nonzero
        match model.layers[l].layer {
            Layer::Dense { outputs, .. } | Layer::Conv2d { out_channels: outputs, .. } => {
                let ids: Vec<usize> = seg.in_layer(l);
                if ids.is_empty() {
                    outputs
                } else {
                    ids.iter().filter(|&&s| !mask.entries.iter().any(|e| e.structure == s)).count()
                }
            }
            _ => unreachable!(),
        }
    };
    let (mut params, mut macs) = (0u64, 0u64);
    for (i, spec) in model.layers.iter().enumerate() {
        let f_in = live(if i == 0 { None } else { Some(i - 1) }) as u64;
        let osp = shapes.pre_add[i].spatial() as u64;
        match spec.layer {
            Layer::Conv2d { kernel, bias, .. } => {
                let f_out = out_live(i) as u64;
                let k2 = (kernel * kernel) as u64;
                params += f_in * f_out * k2 + if bias { f_out } else { 0 };
                macs += f_in * f_out * k2 * osp;
            }
            Layer::Dense { bias, .. } => {
                let f_out = out_live(i) as u64;
                params += f_in * f_out + if bias { f_out } else { 0 };
                macs += f_in * f_out;
            }
            Layer::BatchNorm { .. } => params += 2 * channels(&acts.pre_add[i], shapes.pre_add[i]) as u64,
            _ => {}
        }
    }
    for (ri, res) in model.residuals.iter().enumerate() {
        if let ResidualKind::Downsample { out_channels, batch_norm, .. } = res.kind {
            let f_in = live(res.from) as u64;
            let f_out = out_channels as u64;
            params += f_in * f_out + if batch_norm { 2 * f_out } else { 0 };
            macs += f_in * f_out * shapes.skips[ri].spatial() as u64;
        }
    }
    (params, macs)
}

