//! Forward evaluation, losses, gradients, Jacobians and exact Hessian-vector
//! products over a [`Network`].
//!
//! Losses are averaged over the batch. Large batches are processed in fixed
//! chunks whose results are summed in chunk order, so every result is a pure
//! function of its arguments.

use serde::{Deserialize, Serialize};

use crate::engine::{self, BnUpdate, Mode, Network};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::real::{Dual, Real};

const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    CrossEntropy,
}

/// Class labels are zero-based indices into the `D` outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Vec<f64>),
}

/// `n` samples stored row-major in `inputs`, with matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub n: usize,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, n: usize, targets: Targets) -> Result<Self> {
        if n == 0 {
            return Err(Error::Input("batch must contain at least one sample".into()));
        }
        if !inputs.len().is_multiple_of(n) {
            return Err(Error::Input(format!(
                "{} input values do not split into {n} samples",
                inputs.len()
            )));
        }
        match &targets {
            Targets::Labels(l) if l.len() != n => {
                return Err(Error::Input(format!("{} labels for {n} samples", l.len())))
            }
            Targets::Values(v) if v.len() % n != 0 => {
                return Err(Error::Input(format!(
                    "{} target values do not split into {n} samples",
                    v.len()
                )))
            }
            _ => {}
        }
        Ok(Batch { inputs, n, targets })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sample_size(&self) -> usize {
        self.inputs.len() / self.n
    }

    /// Samples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let d = self.sample_size();
        let mut inputs = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            inputs.extend_from_slice(&self.inputs[i * d..(i + 1) * d]);
        }
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => {
                let k = v.len() / self.n;
                let mut out = Vec::with_capacity(idx.len() * k);
                for &i in idx {
                    out.extend_from_slice(&v[i * k..(i + 1) * k]);
                }
                Targets::Values(out)
            }
        };
        Batch {
            inputs,
            n: idx.len(),
            targets,
        }
    }

    pub fn range(&self, start: usize, end: usize) -> Batch {
        self.select(&(start..end).collect::<Vec<_>>())
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            Targets::Values(_) => None,
        }
    }
}

fn check_targets(targets: &Targets, kind: LossKind, n: usize, d: usize) -> Result<()> {
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Labels(l)) => {
            if let Some(bad) = l.iter().find(|&&y| y >= d) {
                return Err(Error::Input(format!("label {bad} out of range for {d} classes")));
            }
            Ok(())
        }
        (LossKind::Squared, Targets::Values(v)) => {
            if v.len() != n * d {
                return Err(Error::Input(format!(
                    "regression targets have dimension {}, model outputs {d}",
                    v.len() / n.max(1)
                )));
            }
            Ok(())
        }
        (LossKind::CrossEntropy, Targets::Values(_)) => {
            Err(Error::Input("cross-entropy loss requires class labels".into()))
        }
        (LossKind::Squared, Targets::Labels(_)) => {
            Err(Error::Input("squared loss requires real-vector targets".into()))
        }
    }
}

/// Summed per-sample losses and the gradient of `scale * sum` w.r.t. the
/// outputs. Targets must already be validated.
fn loss_terms<T: Real>(
    out: &[T],
    d: usize,
    targets: &Targets,
    first: usize,
    kind: LossKind,
    scale: f64,
) -> (T, Vec<T>) {
    let n = out.len() / d;
    let mut total = T::zero();
    let mut grad = vec![T::zero(); out.len()];
    for s in 0..n {
        let z = &out[s * d..(s + 1) * d];
        let g = &mut grad[s * d..(s + 1) * d];
        match (kind, targets) {
            (LossKind::Squared, Targets::Values(v)) => {
                let y = &v[(first + s) * d..(first + s + 1) * d];
                for j in 0..d {
                    let r = z[j] - T::from_f64(y[j]);
                    total += (r * r).scale(0.5);
                    g[j] = r.scale(scale);
                }
            }
            (LossKind::CrossEntropy, Targets::Labels(l)) => {
                let y = l[first + s];
                let m = z.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<T> = z.iter().map(|&v| (v - T::from_f64(m)).exp()).collect();
                let sum: T = e.iter().copied().sum();
                total += sum.ln() + T::from_f64(m) - z[y];
                for j in 0..d {
                    let p = e[j] / sum;
                    g[j] = if j == y { p - T::from_f64(1.0) } else { p }.scale(scale);
                }
            }
            _ => unreachable!("targets validated against loss kind"),
        }
    }
    (total, grad)
}

/// Mean loss of `outputs` (`n x d`, row-major) against `targets`.
pub fn loss(outputs: &[f64], d: usize, targets: &Targets, kind: LossKind) -> Result<f64> {
    if d == 0 || !outputs.len().is_multiple_of(d) || outputs.is_empty() {
        return Err(Error::Input(format!(
            "{} outputs do not form rows of width {d}",
            outputs.len()
        )));
    }
    let n = outputs.len() / d;
    check_targets(targets, kind, n, d)?;
    let (total, _) = loss_terms(outputs, d, targets, 0, kind, 1.0);
    Ok(total / n as f64)
}

fn check(net: &Network, params: &ParamVector, inputs: &[f64], n: usize) -> Result<()> {
    net.check_params(params.len())?;
    net.check_inputs(inputs.len(), n)
}

fn check_batch(net: &Network, params: &ParamVector, batch: &Batch, kind: LossKind) -> Result<()> {
    check(net, params, &batch.inputs, batch.n)?;
    check_targets(&batch.targets, kind, batch.n, net.output_size())
}

/// Network outputs (`n x D`) with batch norm in inference mode.
pub fn forward(net: &Network, params: &ParamVector, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
    check(net, params, inputs, n)?;
    let isz = net.input_size();
    let mut out = Vec::with_capacity(n * net.output_size());
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let tape = engine::forward(
            net,
            &params.values,
            inputs[start * isz..end * isz].to_vec(),
            end - start,
            Mode::Eval,
            None,
        );
        out.extend_from_slice(tape.output());
    }
    Ok(out)
}

/// Per-layer activations of one inference-mode forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    /// Layer outputs before any residual add.
    pub pre_add: Vec<Vec<f64>>,
    /// Layer outputs after any residual add.
    pub outputs: Vec<Vec<f64>>,
}

pub fn activations(net: &Network, params: &ParamVector, inputs: &[f64], n: usize) -> Result<Activations> {
    check(net, params, inputs, n)?;
    let tape = engine::forward(net, &params.values, inputs.to_vec(), n, Mode::Eval, None);
    let pre_add = tape
        .pre_adds
        .into_iter()
        .zip(&tape.outs)
        .map(|(p, o)| p.unwrap_or_else(|| o.clone()))
        .collect();
    Ok(Activations {
        pre_add,
        outputs: tape.outs,
    })
}

/// Mean loss and its gradient in scalar type `T`, in inference mode.
fn loss_and_grad<T: Real>(
    net: &Network,
    params: &[T],
    batch: &Batch,
    kind: LossKind,
    lift: impl Fn(f64) -> T,
) -> (T, Vec<T>) {
    let (n, isz, d) = (batch.n, net.input_size(), net.output_size());
    let scale = 1.0 / n as f64;
    let mut total = T::zero();
    let mut grad = vec![T::zero(); params.len()];
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let x: Vec<T> = batch.inputs[start * isz..end * isz].iter().map(|&v| lift(v)).collect();
        let tape = engine::forward(net, params, x, end - start, Mode::Eval, None);
        let (l, gout) = loss_terms(tape.output(), d, &batch.targets, start, kind, scale);
        total += l;
        let (g, _) = engine::backward(net, params, &tape, gout, false);
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    (total.scale(scale), grad)
}

/// Mean data loss over the batch (no weight decay), inference mode.
pub fn mean_loss(net: &Network, params: &ParamVector, batch: &Batch, kind: LossKind) -> Result<f64> {
    check_batch(net, params, batch, kind)?;
    let out = forward(net, params, &batch.inputs, batch.n)?;
    loss(&out, net.output_size(), &batch.targets, kind)
}

/// `dL/dtheta` of the mean loss, inference-mode batch norm. Frozen blocks
/// (running statistics) receive zeros.
pub fn gradient(net: &Network, params: &ParamVector, batch: &Batch, kind: LossKind) -> Result<ParamVector> {
    Ok(loss_gradient(net, params, batch, kind)?.1)
}

pub fn loss_gradient(
    net: &Network,
    params: &ParamVector,
    batch: &Batch,
    kind: LossKind,
) -> Result<(f64, ParamVector)> {
    check_batch(net, params, batch, kind)?;
    let (l, g) = loss_and_grad(net, &params.values, batch, kind, |v| v);
    Ok((l, ParamVector::from_values(params.layout.clone(), g)?))
}

fn dual_params(params: &ParamVector, v: &[f64]) -> Vec<Dual> {
    let trainable = params.layout.trainable_mask();
    params
        .values
        .iter()
        .zip(v)
        .zip(trainable)
        .map(|((&p, &t), tr)| Dual::new(p, if tr { t } else { 0.0 }))
        .collect()
}

/// Gradient and `H v` with `H` the exact Hessian of the mean loss
/// (forward-over-reverse). Components of `v` on frozen blocks are ignored.
pub fn gradient_and_hvp(
    net: &Network,
    params: &ParamVector,
    batch: &Batch,
    kind: LossKind,
    v: &[f64],
) -> Result<(ParamVector, ParamVector)> {
    check_batch(net, params, batch, kind)?;
    if v.len() != params.len() {
        return Err(Error::Input(format!(
            "direction has length {}, expected P = {}",
            v.len(),
            params.len()
        )));
    }
    let pd = dual_params(params, v);
    let (_, g) = loss_and_grad(net, &pd, batch, kind, Dual::from_f64);
    let grad = g.iter().map(|d| d.re).collect();
    let hv = g.iter().map(|d| d.eps).collect();
    Ok((
        ParamVector::from_values(params.layout.clone(), grad)?,
        ParamVector::from_values(params.layout.clone(), hv)?,
    ))
}

pub fn hvp(net: &Network, params: &ParamVector, batch: &Batch, kind: LossKind, v: &[f64]) -> Result<ParamVector> {
    Ok(gradient_and_hvp(net, params, batch, kind, v)?.1)
}

/// Directional derivative of the outputs, `(grad_theta f(x)) v`, for each
/// sample (`n x D`). Components of `v` on frozen blocks are ignored.
pub fn jvp(net: &Network, params: &ParamVector, inputs: &[f64], n: usize, v: &[f64]) -> Result<Vec<f64>> {
    check(net, params, inputs, n)?;
    let pd = dual_params(params, v);
    let x = inputs.iter().map(|&v| Dual::from_f64(v)).collect();
    let tape = engine::forward(net, &pd, x, n, Mode::Eval, None);
    Ok(tape.output().iter().map(|d| d.eps).collect())
}

/// Row-major `D x P` Jacobian of the outputs at a single input.
pub fn jacobian(net: &Network, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    check(net, params, x, 1)?;
    let d = net.output_size();
    let tape = engine::forward(net, &params.values, x.to_vec(), 1, Mode::Eval, None);
    let mut out = Vec::with_capacity(d * params.len());
    for j in 0..d {
        let mut seed = vec![0.0; d];
        seed[j] = 1.0;
        let (g, _) = engine::backward(net, &params.values, &tape, seed, false);
        out.extend(g);
    }
    Ok(out)
}

/// Result of a training-mode step: batch statistics drive batch norm.
#[derive(Debug, Clone)]
pub struct TrainGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub outputs: Vec<f64>,
    pub(crate) bn: Vec<BnUpdate>,
}

impl TrainGradient {
    /// Folds this batch's statistics into the running statistics.
    pub fn update_running_stats(&self, params: &mut ParamVector, momentum: f64) {
        for u in &self.bn {
            for (c, (&m, &v)) in u.mean.iter().zip(&u.var).enumerate() {
                let rm = &mut params.values[u.mean_off + c];
                *rm = (1.0 - momentum) * *rm + momentum * m;
                let rv = &mut params.values[u.var_off + c];
                *rv = (1.0 - momentum) * *rv + momentum * v;
            }
        }
    }
}

/// Mean loss and gradient with batch norm using the statistics of this batch.
pub fn train_gradient(net: &Network, params: &ParamVector, batch: &Batch, kind: LossKind) -> Result<TrainGradient> {
    check_batch(net, params, batch, kind)?;
    let n = batch.n;
    let tape = engine::forward(net, &params.values, batch.inputs.clone(), n, Mode::Train, None);
    let (l, gout) = loss_terms(tape.output(), net.output_size(), &batch.targets, 0, kind, 1.0 / n as f64);
    let (grad, _) = engine::backward(net, &params.values, &tape, gout, false);
    Ok(TrainGradient {
        loss: l / n as f64,
        grad,
        outputs: tape.output().to_vec(),
        bn: engine::bn_updates(net, &tape),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, ModelSpec, Shape};
    use crate::zoo::mlp_toy;

    fn linear(w: &[f64], inputs: usize, outputs: usize) -> (Network, ParamVector) {
        let m = ModelSpec {
            name: "linear".into(),
            input: Shape::flat(inputs),
            layers: vec![Layer::Dense {
                inputs,
                outputs,
                bias: false,
            }
            .into()],
            residuals: vec![],
            outputs,
        };
        let net = Network::new(&m).unwrap();
        let p = ParamVector::from_values(net.layout().clone(), w.to_vec()).unwrap();
        (net, p)
    }

    #[test]
    fn identity_layer_forward() {
        let (net, p) = linear(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        assert_eq!(forward(&net, &p, &[1.0, 2.0], 1).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = mlp_toy(3, &[4, 4], 2, true);
        let net = Network::new(&m).unwrap();
        let p = ParamVector::zeros(net.layout().clone());
        assert_eq!(forward(&net, &p, &[0.3, -1.0, 2.0], 1).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn loss_examples() {
        let sq = loss(&[1.0, 0.0], 2, &Targets::Values(vec![0.0, 0.0]), LossKind::Squared).unwrap();
        assert_eq!(sq, 0.5);
        let same = loss(&[0.3, 0.7], 2, &Targets::Values(vec![0.3, 0.7]), LossKind::Squared).unwrap();
        assert_eq!(same, 0.0);
        let ce = loss(&[0.0, 0.0], 2, &Targets::Labels(vec![0]), LossKind::CrossEntropy).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let e = loss(&[0.0, 0.0], 2, &Targets::Labels(vec![2]), LossKind::CrossEntropy).unwrap_err();
        assert_eq!(e.category(), "input");
        let e = loss(&[0.0, 0.0], 2, &Targets::Labels(vec![0]), LossKind::Squared).unwrap_err();
        assert_eq!(e.category(), "input");
    }

    #[test]
    fn stationary_linear_model_has_zero_gradient() {
        let (net, p) = linear(&[0.0; 6], 3, 2);
        let b = Batch::new(vec![1.0, 2.0, 3.0], 1, Targets::Values(vec![0.0, 0.0])).unwrap();
        let g = gradient(&net, &p, &b, LossKind::Squared).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_jacobian_rows_hold_the_input() {
        let (net, p) = linear(&[0.5; 6], 3, 2);
        let j = jacobian(&net, &p, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(j, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn wrong_input_width_is_dimension_error() {
        let (net, p) = linear(&[0.5; 6], 3, 2);
        let e = forward(&net, &p, &[1.0, 2.0], 1).unwrap_err();
        assert_eq!(e.category(), "dimension");
    }
}
