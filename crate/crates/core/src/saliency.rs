//! Structure saliencies: first-order terms, the Hessian-vector-product
//! saliency vector, and the pairwise Gauss-Newton sensitivity matrix `Q`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Batch, LossKind};
use crate::engine::{self, Mode, Network};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::real::pairwise_sum;
use crate::structures::{theta_struc, Segmentation};

/// Samples per forward tape when building projections.
const SAMPLE_CHUNK: usize = 256;

/// `|theta_s . grad|` for every structure.
pub fn first_order_terms(grad: &[f64], params: &ParamVector, seg: &Segmentation) -> Result<Vec<f64>> {
    if grad.len() != params.len() {
        return Err(Error::Input(format!(
            "gradient has length {}, expected P = {}",
            grad.len(),
            params.len()
        )));
    }
    Ok(seg
        .structures
        .iter()
        .map(|st| st.indices.iter().map(|&i| params.values[i] * grad[i]).sum::<f64>().abs())
        .collect())
}

/// Per-sample curvature factor of the loss w.r.t. the outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum RMatrix {
    /// Squared loss.
    Identity,
    /// Cross-entropy: `diag(p) - p p^T` with `p` the softmax probabilities.
    Softmax(Vec<f64>),
}

pub fn r_matrix(output: &[f64], kind: LossKind) -> RMatrix {
    match kind {
        LossKind::Squared => RMatrix::Identity,
        LossKind::CrossEntropy => RMatrix::Softmax(softmax(output)),
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl RMatrix {
    /// Dense row-major `d x d` form.
    pub fn dense(&self, d: usize) -> Vec<f64> {
        let mut r = vec![0.0; d * d];
        match self {
            RMatrix::Identity => (0..d).for_each(|i| r[i * d + i] = 1.0),
            RMatrix::Softmax(p) => {
                for i in 0..d {
                    for j in 0..d {
                        r[i * d + j] = if i == j { p[i] } else { 0.0 } - p[i] * p[j];
                    }
                }
            }
        }
        r
    }
}

/// `u^T R v` in `O(D)`.
pub fn contract_r(u: &[f64], v: &[f64], r: &RMatrix) -> f64 {
    match r {
        RMatrix::Identity => u.iter().zip(v).map(|(a, b)| a * b).sum(),
        RMatrix::Softmax(p) => {
            let (mut uv, mut up, mut vp) = (0.0, 0.0, 0.0);
            for ((&a, &b), &s) in u.iter().zip(v).zip(p) {
                uv += a * s * b;
                up += a * s;
                vp += b * s;
            }
            uv - up * vp
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyVector {
    pub method: String,
    pub first_order: Vec<f64>,
    pub second_order: Vec<f64>,
    pub total: Vec<f64>,
}

impl SaliencyVector {
    pub fn from_parts(method: &str, first_order: Vec<f64>, second_order: Vec<f64>) -> Self {
        let total = first_order.iter().zip(&second_order).map(|(a, b)| a + b).collect();
        SaliencyVector {
            method: method.to_string(),
            first_order,
            second_order,
            total,
        }
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// `|theta_s . g| + 1/2 |theta_s . (H theta_struc)|` with `g` and `H` the
/// gradient and exact Hessian of the mean loss over `batch`.
pub fn sosp_h_saliency(
    net: &Network,
    params: &ParamVector,
    batch: &Batch,
    seg: &Segmentation,
    kind: LossKind,
) -> Result<SaliencyVector> {
    let direction = theta_struc(params, seg);
    let (g, hv) = autodiff::gradient_and_hvp(net, params, batch, kind, &direction.values)?;
    let first = first_order_terms(&g.values, params, seg)?;
    let second = seg
        .structures
        .iter()
        .map(|st| 0.5 * st.indices.iter().map(|&i| params.values[i] * hv.values[i]).sum::<f64>().abs())
        .collect();
    Ok(SaliencyVector::from_parts("sosp_h", first, second))
}

/// Dense symmetric `S x S` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMatrix {
    pub size: usize,
    pub values: Vec<f64>,
}

impl QMatrix {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::Input(format!(
                "{} values for a {size}x{size} matrix",
                values.len()
            )));
        }
        Ok(QMatrix { size, values })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.size).map(|i| self.get(i, i)).collect()
    }

    /// Binary form: `u64` size, then `size^2` row-major `f64`, little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.size as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R, path: &Path) -> Result<Self> {
        let fmt = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| fmt("missing size header"))?;
        let size = u64::from_le_bytes(b8) as usize;
        let count = size.checked_mul(size).ok_or_else(|| fmt("size overflow"))?;
        let mut values = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            r.read_exact(&mut b8).map_err(|_| fmt("truncated matrix data"))?;
            values.push(f64::from_le_bytes(b8));
        }
        if r.read(&mut b8).map_err(|e| Error::io(path, e))? != 0 {
            return Err(fmt("trailing bytes after matrix data"));
        }
        Ok(QMatrix { size, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}

/// Projected output vectors `(grad_theta f(x_n)) theta_s` and the network
/// outputs `f(x_n)`, for every structure and sample.
#[derive(Debug, Clone)]
pub struct Projections {
    pub samples: usize,
    pub outputs_dim: usize,
    /// `[s][n * D + j]`.
    pub per_structure: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
}

/// One forward-mode tangent per structure, each started at the structure's
/// own layer on a shared inference-mode tape.
pub fn projections(net: &Network, params: &ParamVector, inputs: &[f64], n: usize, seg: &Segmentation) -> Result<Projections> {
    net.check_params(params.len())?;
    net.check_inputs(inputs.len(), n)?;
    let (isz, d) = (net.input_size(), net.output_size());
    let mut per_structure = vec![Vec::with_capacity(n * d); seg.len()];
    let mut outputs = Vec::with_capacity(n * d);
    for start in (0..n).step_by(SAMPLE_CHUNK) {
        let end = (start + SAMPLE_CHUNK).min(n);
        let x = inputs[start * isz..end * isz].to_vec();
        let tape = engine::forward(net, &params.values, x, end - start, Mode::Eval, None);
        outputs.extend_from_slice(tape.output());
        let chunk: Vec<Vec<f64>> = (0..seg.len())
            .into_par_iter()
            .map(|s| engine::channel_jvp(net, &params.values, &tape, &seg.direction(s)))
            .collect();
        for (dst, src) in per_structure.iter_mut().zip(chunk) {
            dst.extend(src);
        }
    }
    Ok(Projections {
        samples: n,
        outputs_dim: d,
        per_structure,
        outputs,
    })
}

/// `Q[s][t] = 1/2 |mean_n u_sn^T R_n u_tn| + first_order[s] * [s == t]`.
/// Per-pair sums over samples use pairwise summation in sample order.
pub fn q_from_projections(proj: &Projections, kind: LossKind, first_order: &[f64]) -> Result<QMatrix> {
    let (n, d) = (proj.samples, proj.outputs_dim);
    let size = proj.per_structure.len();
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if first_order.len() != size {
        return Err(Error::Input(format!(
            "{} first-order terms for {size} structures",
            first_order.len()
        )));
    }
    // Cross-entropy: u^T R v = (u*p).v - (u.p)(v.p); precompute u*p and u.p.
    let (weighted, centers): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match kind {
        LossKind::Squared => (proj.per_structure.clone(), vec![Vec::new(); size]),
        LossKind::CrossEntropy => {
            let probs: Vec<f64> = proj.outputs.chunks(d).flat_map(softmax).collect();
            proj.per_structure
                .par_iter()
                .map(|u| {
                    let w: Vec<f64> = u.iter().zip(&probs).map(|(a, p)| a * p).collect();
                    let c: Vec<f64> = w.chunks(d).map(|r| r.iter().sum()).collect();
                    (w, c)
                })
                .unzip()
        }
    };
    let rows: Vec<Vec<f64>> = (0..size)
        .into_par_iter()
        .map(|s| {
            let mut terms = vec![0.0; n];
            let ws = &weighted[s];
            (s..size)
                .map(|t| {
                    let ut = &proj.per_structure[t];
                    for (k, term) in terms.iter_mut().enumerate() {
                        let a = &ws[k * d..(k + 1) * d];
                        let b = &ut[k * d..(k + 1) * d];
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += a[j] * b[j];
                        }
                        if kind == LossKind::CrossEntropy {
                            dot -= centers[s][k] * centers[t][k];
                        }
                        *term = dot;
                    }
                    0.5 * (pairwise_sum(&terms) / n as f64).abs()
                })
                .collect()
        })
        .collect();
    let mut values = vec![0.0; size * size];
    for (s, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            let t = s + k;
            values[s * size + t] = v;
            values[t * size + s] = v;
        }
        values[s * size + s] += first_order[s];
    }
    QMatrix::new(size, values)
}

/// Pairwise sensitivities under the Gauss-Newton approximation, with the
/// first-order terms computed on the same batch.
pub fn q_matrix(
    net: &Network,
    params: &ParamVector,
    batch: &Batch,
    seg: &Segmentation,
    kind: LossKind,
) -> Result<QMatrix> {
    let g = autodiff::gradient(net, params, batch, kind)?;
    let first = first_order_terms(&g.values, params, seg)?;
    q_matrix_with_first_order(net, params, batch, seg, kind, &first)
}

pub fn q_matrix_with_first_order(
    net: &Network,
    params: &ParamVector,
    batch: &Batch,
    seg: &Segmentation,
    kind: LossKind,
    first_order: &[f64],
) -> Result<QMatrix> {
    let proj = projections(net, params, &batch.inputs, batch.n, seg)?;
    q_from_projections(&proj, kind, first_order)
}

/// `count` distinct indices from `0..total`, uniform, seeded.
pub fn subsample_indices(total: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > total {
        return Err(Error::Input(format!(
            "subsample of {count} requested from {total} samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, total, count).into_vec())
}

pub fn subsample(data: &Batch, count: usize, seed: u64) -> Result<Batch> {
    if count == 0 {
        return Err(Error::Input("subsample size must be at least 1".into()));
    }
    Ok(data.select(&subsample_indices(data.n, count, seed)?))
}
