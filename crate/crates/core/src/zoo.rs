//! Toy model zoo: a dense MLP, a VGG-style ConvNet and a small CIFAR-style
//! residual network. All three are small enough for exhaustive oracles.

use crate::model::{Layer, LayerSpec, ModelSpec, Residual, ResidualKind, Shape};

/// `inputs -> hidden[0] -> ... -> outputs` with ReLU between dense layers.
pub fn mlp_toy(inputs: usize, hidden: &[usize], outputs: usize, bias: bool) -> ModelSpec {
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut width = inputs;
    for &h in hidden {
        layers.push(
            Layer::Dense {
                inputs: width,
                outputs: h,
                bias,
            }
            .into(),
        );
        layers.push(Layer::Relu.into());
        width = h;
    }
    layers.push(
        Layer::Dense {
            inputs: width,
            outputs,
            bias,
        }
        .into(),
    );
    ModelSpec {
        name: "mlp_toy".into(),
        input: Shape::flat(inputs),
        layers,
        residuals: vec![],
        outputs,
    }
}

/// VGG-style network: three stages of two 3x3 convolutions, average pooling
/// between stages, global pooling and a dense classifier.
#[derive(Debug, Clone)]
pub struct ConvNetToy {
    pub input: (usize, usize, usize),
    pub widths: Vec<usize>,
    pub classes: usize,
    pub batch_norm: bool,
    pub bias: bool,
}

impl Default for ConvNetToy {
    fn default() -> Self {
        ConvNetToy {
            input: (3, 8, 8),
            widths: vec![8, 8, 16, 16, 32, 32],
            classes: 10,
            batch_norm: true,
            bias: false,
        }
    }
}

impl ConvNetToy {
    pub fn build(&self) -> ModelSpec {
        let (c, h, w) = self.input;
        let mut layers: Vec<LayerSpec> = Vec::new();
        let mut ch = c;
        let per_stage = self.widths.len().div_ceil(3).max(1);
        for (i, &width) in self.widths.iter().enumerate() {
            if i > 0 && i % per_stage == 0 {
                layers.push(Layer::AvgPool { size: 2 }.into());
            }
            layers.push(
                Layer::Conv2d {
                    in_channels: ch,
                    out_channels: width,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    bias: self.bias,
                }
                .into(),
            );
            if self.batch_norm {
                layers.push(Layer::BatchNorm { channels: width }.into());
            }
            layers.push(Layer::Relu.into());
            ch = width;
        }
        layers.push(Layer::GlobalAvgPool.into());
        layers.push(Layer::Flatten.into());
        layers.push(
            Layer::Dense {
                inputs: ch,
                outputs: self.classes,
                bias: true,
            }
            .into(),
        );
        ModelSpec {
            name: "convnet_toy".into(),
            input: Shape::image(c, h, w),
            layers,
            residuals: vec![],
            outputs: self.classes,
        }
    }
}

/// CIFAR-style residual network: a stem convolution followed by three stages
/// of basic blocks. Stages two and three open with a strided block whose skip
/// path is a 1x1 downsampling projection; all other skips are identities.
#[derive(Debug, Clone)]
pub struct ResToy {
    pub input: (usize, usize, usize),
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub classes: usize,
    pub batch_norm: bool,
}

impl Default for ResToy {
    fn default() -> Self {
        ResToy {
            input: (3, 8, 8),
            widths: [8, 16, 32],
            blocks_per_stage: 2,
            classes: 10,
            batch_norm: true,
        }
    }
}

impl ResToy {
    pub fn build(&self) -> ModelSpec {
        let (c, h, w) = self.input;
        let mut layers: Vec<LayerSpec> = Vec::new();
        let mut residuals = Vec::new();
        let bn = self.batch_norm;

        let push = |layers: &mut Vec<LayerSpec>, layer: Layer, block: usize| {
            layers.push(LayerSpec {
                layer,
                block: Some(block),
            });
            layers.len() - 1
        };
        let conv = |i: usize, o: usize, stride: usize| Layer::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            padding: 1,
            bias: false,
        };

        push(&mut layers, conv(c, self.widths[0], 1), 0);
        if bn {
            push(&mut layers, Layer::BatchNorm { channels: self.widths[0] }, 0);
        }
        let mut last = push(&mut layers, Layer::Relu, 0);
        let mut ch = self.widths[0];

        for (stage, &width) in self.widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage.max(1) {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let from = last;
                push(&mut layers, conv(ch, width, stride), stage);
                if bn {
                    push(&mut layers, Layer::BatchNorm { channels: width }, stage);
                }
                push(&mut layers, Layer::Relu, stage);
                let mut to = push(&mut layers, conv(width, width, 1), stage);
                if bn {
                    to = push(&mut layers, Layer::BatchNorm { channels: width }, stage);
                }
                let kind = if stride == 1 && ch == width {
                    ResidualKind::IdentitySkip
                } else {
                    ResidualKind::Downsample {
                        out_channels: width,
                        stride,
                        batch_norm: bn,
                    }
                };
                residuals.push(Residual {
                    from: Some(from),
                    to,
                    kind,
                    remap: None,
                });
                last = push(&mut layers, Layer::Relu, stage);
                ch = width;
            }
        }
        layers.push(Layer::GlobalAvgPool.into());
        layers.push(Layer::Flatten.into());
        layers.push(
            Layer::Dense {
                inputs: ch,
                outputs: self.classes,
                bias: true,
            }
            .into(),
        );
        ModelSpec {
            name: "res_toy".into(),
            input: Shape::image(c, h, w),
            layers,
            residuals,
            outputs: self.classes,
        }
    }
}
