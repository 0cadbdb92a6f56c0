//! Network descriptions.
//!
//! A [`ModelSpec`] is an ordered list of layers plus residual descriptors that
//! add a (possibly downsampled) earlier tensor onto the output of a later
//! layer. Everything downstream (execution, segmentation, counting) reads the
//! model through the shapes computed by [`ModelSpec::shapes`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample tensor shape. Flat tensors are treated as `n` channels with a
/// single spatial position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Flat { features: usize },
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn flat(features: usize) -> Self {
        Shape::Flat { features }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Shape::Image {
            channels,
            height,
            width,
        }
    }

    pub fn size(&self) -> usize {
        self.channels() * self.spatial()
    }

    pub fn channels(&self) -> usize {
        match *self {
            Shape::Flat { features } => features,
            Shape::Image { channels, .. } => channels,
        }
    }

    pub fn spatial(&self) -> usize {
        match *self {
            Shape::Flat { .. } => 1,
            Shape::Image { height, width, .. } => height * width,
        }
    }

    pub fn hw(&self) -> (usize, usize) {
        match *self {
            Shape::Flat { .. } => (1, 1),
            Shape::Image { height, width, .. } => (height, width),
        }
    }

    pub(crate) fn with_channels(&self, c: usize) -> Shape {
        match *self {
            Shape::Flat { .. } => Shape::flat(c),
            Shape::Image { height, width, .. } => Shape::image(c, height, width),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Flat { features } => write!(f, "[{features}]"),
            Shape::Image {
                channels,
                height,
                width,
            } => write!(f, "[{channels}x{height}x{width}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default)]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// Non-overlapping average pooling with window and stride `size`.
    AvgPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
}

fn one() -> usize {
    1
}

impl Layer {
    /// Dense and convolution layers; the only layers that can own structures.
    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    pub fn out_width(&self) -> Option<usize> {
        match *self {
            Layer::Dense { outputs, .. } => Some(outputs),
            Layer::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }

    /// Linear kernel size (kernel height); 1 for dense layers.
    pub fn kernel_size(&self) -> usize {
        match *self {
            Layer::Conv2d { kernel, .. } => kernel,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm { .. } => "batch_norm",
            Layer::Relu => "relu",
            Layer::AvgPool { .. } => "avg_pool",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub layer: Layer,
    /// Coarse building-block id (stage of a residual network). Used for
    /// block-level bottleneck aggregation and block expansion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
}

impl From<Layer> for LayerSpec {
    fn from(layer: Layer) -> Self {
        LayerSpec { layer, block: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResidualKind {
    IdentitySkip,
    /// 1x1 strided projection (optionally batch-normalized) on the skip path.
    Downsample {
        out_channels: usize,
        stride: usize,
        #[serde(default)]
        batch_norm: bool,
    },
}

/// Scatter description used by compact (pruned) residual networks where the
/// branch and skip carry different channel subsets of the residual stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub width: usize,
    pub branch: Vec<usize>,
    pub skip: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Residual {
    /// Layer whose output feeds the skip path; `None` is the network input.
    pub from: Option<usize>,
    /// The skip is added to this layer's output.
    pub to: usize,
    #[serde(flatten)]
    pub kind: ResidualKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remap: Option<ChannelMap>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub residuals: Vec<Residual>,
    pub outputs: usize,
}

/// Shapes of every tensor in the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Shapes {
    pub input: Shape,
    /// Output shape of each layer, after any residual add at that layer.
    pub outputs: Vec<Shape>,
    /// Output of each layer before its residual add (equal to `outputs`
    /// where no residual lands).
    pub pre_add: Vec<Shape>,
    /// Output shape of each residual's skip path.
    pub skips: Vec<Shape>,
}

impl Shapes {
    pub fn layer_input(&self, layer: usize) -> Shape {
        if layer == 0 {
            self.input
        } else {
            self.outputs[layer - 1]
        }
    }

    pub fn tensor(&self, from: Option<usize>) -> Shape {
        match from {
            None => self.input,
            Some(l) => self.outputs[l],
        }
    }
}

impl ModelSpec {
    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i].layer
    }

    pub fn residual_into(&self, layer: usize) -> Option<(usize, &Residual)> {
        self.residuals.iter().enumerate().find(|(_, r)| r.to == layer)
    }

    /// Index of the final classifier (last dense layer).
    pub fn classifier(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l.layer, Layer::Dense { .. }))
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.layer, Layer::BatchNorm { .. }))
            || self.residuals.iter().any(|r| {
                matches!(
                    r.kind,
                    ResidualKind::Downsample {
                        batch_norm: true,
                        ..
                    }
                )
            })
    }

    pub fn has_bias(&self) -> bool {
        self.layers.iter().any(|l| {
            matches!(
                l.layer,
                Layer::Dense { bias: true, .. } | Layer::Conv2d { bias: true, .. }
            )
        })
    }

    /// BatchNorm layer directly following weighted layer `i` (its per-channel
    /// scale and shift vanish together with the channel).
    pub fn batch_norm_after(&self, i: usize) -> Option<usize> {
        match self.layers.get(i + 1).map(|l| &l.layer) {
            Some(Layer::BatchNorm { .. }) => Some(i + 1),
            _ => None,
        }
    }

    /// Validates the model and returns the shape of every tensor.
    pub fn shapes(&self) -> Result<Shapes> {
        if self.layers.is_empty() {
            return Err(Error::Config(format!("model '{}' has no layers", self.name)));
        }
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut pre_add = Vec::with_capacity(self.layers.len());
        let mut skips = vec![Shape::flat(0); self.residuals.len()];
        let mut seen_targets = vec![false; self.layers.len()];
        for r in &self.residuals {
            if r.to >= self.layers.len() || r.from.is_some_and(|f| f >= r.to) {
                return Err(Error::structural(
                    format!("residual {:?} -> {} is out of order", r.from, r.to),
                    "the skip source must precede the target layer",
                ));
            }
            if std::mem::replace(&mut seen_targets[r.to], true) {
                return Err(Error::structural(
                    format!("more than one residual lands on layer {}", r.to),
                    "merge the skip paths",
                ));
            }
        }

        let mut cur = self.input;
        for (i, spec) in self.layers.iter().enumerate() {
            let out = layer_output(i, &spec.layer, cur)?;
            pre_add.push(out);
            let mut after = out;
            if let Some((ri, r)) = self.residual_into(i) {
                let src = match r.from {
                    None => self.input,
                    Some(f) => outputs[f],
                };
                let skip = match r.kind {
                    ResidualKind::IdentitySkip => src,
                    ResidualKind::Downsample {
                        out_channels,
                        stride,
                        ..
                    } => {
                        let (h, w) = src.hw();
                        if stride == 0 {
                            return Err(Error::Config("downsample stride must be positive".into()));
                        }
                        Shape::image(out_channels, (h - 1) / stride + 1, (w - 1) / stride + 1)
                    }
                };
                skips[ri] = skip;
                after = match &r.remap {
                    None => {
                        if skip != out {
                            return Err(Error::structural(
                                format!("residual into layer {i}: skip {skip} vs branch {out}"),
                                "expand the whole block so both paths keep equal widths",
                            ));
                        }
                        out
                    }
                    Some(map) => {
                        let ok = skip.hw() == out.hw()
                            && map.branch.len() == out.channels()
                            && map.skip.len() == skip.channels()
                            && map.branch.iter().chain(&map.skip).all(|&c| c < map.width);
                        if !ok {
                            return Err(Error::structural(
                                format!("channel map at layer {i} does not fit its paths"),
                                "rebuild the compact model from the pruned architecture",
                            ));
                        }
                        out.with_channels(map.width)
                    }
                };
            }
            outputs.push(after);
            cur = after;
        }

        let cls = self.classifier().ok_or_else(|| {
            Error::Config(format!("model '{}' has no final dense classifier", self.name))
        })?;
        if cls != self.layers.len() - 1 {
            return Err(Error::Config(format!(
                "model '{}': the final dense classifier must be the last layer",
                self.name
            )));
        }
        if cur != Shape::flat(self.outputs) {
            return Err(Error::Dimension {
                layer: self.layers.len() - 1,
                expected: Shape::flat(self.outputs).to_string(),
                got: cur.to_string(),
            });
        }
        Ok(Shapes {
            input: self.input,
            outputs,
            pre_add,
            skips,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: ModelSpec = serde_json::from_str(s)?;
        m.shapes()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Recomputes every consumer's input width from the tensor it reads, after
    /// output widths of some layers changed. Downsample projections follow the
    /// width of the layer they are added onto.
    pub(crate) fn rewire(&mut self) -> Result<()> {
        let mut cur = self.input;
        let mut outs: Vec<Shape> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let c = cur.channels();
            match &mut self.layers[i].layer {
                Layer::Dense { inputs, .. } => *inputs = cur.size(),
                Layer::Conv2d { in_channels, .. } => *in_channels = c,
                Layer::BatchNorm { channels } => *channels = c,
                _ => {}
            }
            let out = layer_output(i, &self.layers[i].layer, cur)?;
            let mut after = out;
            if let Some(ri) = self.residuals.iter().position(|r| r.to == i) {
                if let ResidualKind::Downsample { out_channels, .. } = &mut self.residuals[ri].kind {
                    *out_channels = out.channels();
                }
                if let Some(map) = &self.residuals[ri].remap {
                    after = out.with_channels(map.width);
                }
            }
            outs.push(after);
            cur = after;
        }
        if let Some(Layer::Dense { outputs, .. }) = self.layers.last().map(|l| &l.layer) {
            self.outputs = *outputs;
        }
        self.shapes().map(|_| ())
    }
}

fn layer_output(i: usize, layer: &Layer, cur: Shape) -> Result<Shape> {
    let dim_err = |expected: String| Error::Dimension {
        layer: i,
        expected,
        got: cur.to_string(),
    };
    Ok(match *layer {
        Layer::Dense {
            inputs, outputs, ..
        } => {
            if !matches!(cur, Shape::Flat { .. }) || cur.size() != inputs {
                return Err(dim_err(format!("flat [{inputs}] input to {}", layer.name())));
            }
            Shape::flat(outputs)
        }
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let Shape::Image {
                channels,
                height,
                width,
            } = cur
            else {
                return Err(dim_err(format!("image input with {in_channels} channels")));
            };
            if channels != in_channels {
                return Err(dim_err(format!("{in_channels} input channels")));
            }
            if kernel == 0 || stride == 0 || height + 2 * padding < kernel || width + 2 * padding < kernel
            {
                return Err(dim_err(format!("spatial size compatible with kernel {kernel}")));
            }
            Shape::image(
                out_channels,
                (height + 2 * padding - kernel) / stride + 1,
                (width + 2 * padding - kernel) / stride + 1,
            )
        }
        Layer::BatchNorm { channels } => {
            if cur.channels() != channels {
                return Err(dim_err(format!("{channels} channels for batch norm")));
            }
            cur
        }
        Layer::Relu => cur,
        Layer::AvgPool { size } => {
            let Shape::Image {
                channels,
                height,
                width,
            } = cur
            else {
                return Err(dim_err("image input to avg_pool".into()));
            };
            if size == 0 || height % size != 0 || width % size != 0 {
                return Err(dim_err(format!("spatial size divisible by {size}")));
            }
            Shape::image(channels, height / size, width / size)
        }
        Layer::GlobalAvgPool => match cur {
            Shape::Image { channels, .. } => Shape::image(channels, 1, 1),
            Shape::Flat { .. } => return Err(dim_err("image input to global_avg_pool".into())),
        },
        Layer::Flatten => Shape::flat(cur.size()),
    })
}
