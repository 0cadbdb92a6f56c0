//! Segmentation of the parameter vector into prunable structures.
//!
//! A structure is one output channel of a convolution or one neuron of a
//! dense layer. It owns the weights going into it, its bias, and the scale
//! and shift of a batch norm that directly follows its layer. The final
//! classifier and downsampling projections own no structures.

use serde::{Deserialize, Serialize};

use crate::engine::{self, ChannelDirection, Mode, Network};
use crate::error::{Error, Result};
use crate::model::{Layer, ModelSpec};
use crate::params::{ParamOwner, ParamRole, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub id: usize,
    pub layer: usize,
    pub channel: usize,
    /// Linear kernel size (1 for dense neurons).
    pub kernel: usize,
    /// Owned parameter indices, strictly increasing.
    pub indices: Vec<usize>,
    pub batch_norm: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub structures: Vec<Structure>,
    pub param_len: usize,
}

impl Segmentation {
    pub fn len(&self) -> usize {
        self.structures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.structures.is_empty()
    }

    pub fn get(&self, s: usize) -> Result<&Structure> {
        self.structures
            .get(s)
            .ok_or_else(|| Error::Index(format!("structure {s} (S = {})", self.len())))
    }

    /// Prunable layers in network order.
    pub fn layers(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for st in &self.structures {
            if out.last() != Some(&st.layer) {
                out.push(st.layer);
            }
        }
        out
    }

    /// Structure ids of `layer`, ascending.
    pub fn in_layer(&self, layer: usize) -> Vec<usize> {
        self.structures.iter().filter(|s| s.layer == layer).map(|s| s.id).collect()
    }

    pub fn kernels(&self) -> Vec<usize> {
        self.structures.iter().map(|s| s.kernel).collect()
    }

    pub(crate) fn direction(&self, s: usize) -> ChannelDirection {
        let st = &self.structures[s];
        ChannelDirection {
            layer: st.layer,
            channel: st.channel,
            bn_layer: st.batch_norm,
        }
    }
}

pub fn segment(model: &ModelSpec) -> Result<Segmentation> {
    let layout = crate::params::ParamLayout::for_model(model)?;
    let classifier = model.classifier();
    let mut structures = Vec::new();
    for (i, spec) in model.layers.iter().enumerate() {
        if Some(i) == classifier {
            continue;
        }
        let (width, fan_in, kernel) = match spec.layer {
            Layer::Dense { inputs, outputs, .. } => (outputs, inputs, 1),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels, in_channels * kernel * kernel, kernel),
            _ => continue,
        };
        let owner = ParamOwner::Layer(i);
        let w = layout.offset(owner, ParamRole::Weight).expect("weighted layer");
        let bias = layout.offset(owner, ParamRole::Bias);
        let bn = model.batch_norm_after(i);
        let bn_offsets = bn.map(|b| {
            let o = ParamOwner::Layer(b);
            (
                layout.offset(o, ParamRole::BnScale).expect("bn scale"),
                layout.offset(o, ParamRole::BnShift).expect("bn shift"),
            )
        });
        for c in 0..width {
            let mut indices: Vec<usize> = (w + c * fan_in..w + (c + 1) * fan_in).collect();
            indices.extend(bias.map(|b| b + c));
            if let Some((sc, sh)) = bn_offsets {
                indices.push(sc + c);
                indices.push(sh + c);
            }
            indices.sort_unstable();
            structures.push(Structure {
                id: structures.len(),
                layer: i,
                channel: c,
                kernel,
                indices,
                batch_norm: bn,
            });
        }
    }
    if structures.is_empty() {
        return Err(Error::Config(format!(
            "model '{}' has no prunable layers",
            model.name
        )));
    }
    Ok(Segmentation {
        structures,
        param_len: layout.len,
    })
}

/// Sparse vector over `[0, len)` with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseParamVector {
    pub len: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseParamVector {
    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| v * dense[i]).sum()
    }

    pub fn norm2(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn norm1(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v.abs()).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }
}

pub fn extract_theta_s(params: &ParamVector, seg: &Segmentation, s: usize) -> Result<SparseParamVector> {
    let st = seg.get(s)?;
    Ok(SparseParamVector {
        len: params.len(),
        entries: st.indices.iter().map(|&i| (i, params.values[i])).collect(),
    })
}

/// `params` on structure-owned indices, zero elsewhere.
pub fn theta_struc(params: &ParamVector, seg: &Segmentation) -> ParamVector {
    let mut out = ParamVector::zeros(params.layout.clone());
    for st in &seg.structures {
        for &i in &st.indices {
            out.values[i] = params.values[i];
        }
    }
    out
}

/// Evaluates the network with every structure of `s`'s layer zeroed except
/// `s` itself, holding each ReLU's on/off pattern at the one produced by the
/// unmodified parameters. For bias-free ReLU networks this equals the output
/// Jacobian contracted with `theta_s`.
pub fn masked_forward_single_structure(
    net: &Network,
    params: &ParamVector,
    seg: &Segmentation,
    s: usize,
    inputs: &[f64],
    n: usize,
) -> Result<Vec<f64>> {
    let model = net.model();
    if model.has_batch_norm() {
        return Err(Error::UnsupportedModel(format!(
            "'{}' uses batch normalization",
            model.name
        )));
    }
    if !model.residuals.is_empty() {
        return Err(Error::UnsupportedModel(format!(
            "'{}' has residual connections",
            model.name
        )));
    }
    let biased = params
        .layout
        .blocks
        .iter()
        .filter(|b| b.role == ParamRole::Bias)
        .any(|b| params.values[b.range()].iter().any(|&v| v != 0.0));
    if biased {
        return Err(Error::UnsupportedModel(format!(
            "'{}' has nonzero biases",
            model.name
        )));
    }
    net.check_params(params.len())?;
    net.check_inputs(inputs.len(), n)?;
    let st = seg.get(s)?;
    let gates = engine::forward(net, &params.values, inputs.to_vec(), n, Mode::Eval, None);
    let mut masked = params.values.clone();
    for other in seg.in_layer(st.layer) {
        if other != s {
            for &i in &seg.structures[other].indices {
                masked[i] = 0.0;
            }
        }
    }
    let tape = engine::forward(net, &masked, inputs.to_vec(), n, Mode::Eval, Some(&gates));
    Ok(tape.output().to_vec())
}
