//! Flat parameter vectors, their layout and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   b"SOSPCKPT"
//! version  u32       1
//! P        u64       total length of the parameter vector
//! blocks   u32       number of block records
//! record*            owner_kind u8 (0 layer, 1 downsample), owner u32,
//!                    role u8, trainable u8, kernel u32, offset u64, len u64,
//!                    ndim u8, dims u64 * ndim
//! values   f64 * P
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, ModelSpec, ResidualKind};

const MAGIC: &[u8; 8] = b"SOSPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamOwner {
    Layer(usize),
    /// Projection on the skip path of residual `i`.
    Downsample(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamRole {
    fn code(self) -> u8 {
        match self {
            ParamRole::Weight => 0,
            ParamRole::Bias => 1,
            ParamRole::BnScale => 2,
            ParamRole::BnShift => 3,
            ParamRole::BnRunningMean => 4,
            ParamRole::BnRunningVar => 5,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ParamRole::Weight,
            1 => ParamRole::Bias,
            2 => ParamRole::BnScale,
            3 => ParamRole::BnShift,
            4 => ParamRole::BnRunningMean,
            5 => ParamRole::BnRunningVar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub owner: ParamOwner,
    pub role: ParamRole,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
    /// Linear kernel size of the owning layer (1 for dense and batch norm).
    pub kernel: usize,
    /// Frozen blocks (batch-norm running statistics) are state, not
    /// parameters: gradients and Hessian products are zero there.
    pub trainable: bool,
}

impl ParamBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
    pub len: usize,
}

impl ParamLayout {
    pub fn for_model(model: &ModelSpec) -> Result<Self> {
        let shapes = model.shapes()?;
        let mut blocks = Vec::new();
        let mut offset = 0usize;
        let mut add = |owner, role, shape: Vec<usize>, kernel, trainable| {
            let len = shape.iter().product::<usize>();
            blocks.push(ParamBlock {
                owner,
                role,
                offset,
                len,
                shape,
                kernel,
                trainable,
            });
            offset += len;
        };
        let add_bn = |add: &mut dyn FnMut(ParamOwner, ParamRole, Vec<usize>, usize, bool),
                          owner,
                          c: usize| {
            add(owner, ParamRole::BnScale, vec![c], 1, true);
            add(owner, ParamRole::BnShift, vec![c], 1, true);
            add(owner, ParamRole::BnRunningMean, vec![c], 1, false);
            add(owner, ParamRole::BnRunningVar, vec![c], 1, false);
        };

        for (i, spec) in model.layers.iter().enumerate() {
            let owner = ParamOwner::Layer(i);
            match spec.layer {
                Layer::Dense {
                    inputs,
                    outputs,
                    bias,
                } => {
                    add(owner, ParamRole::Weight, vec![outputs, inputs], 1, true);
                    if bias {
                        add(owner, ParamRole::Bias, vec![outputs], 1, true);
                    }
                }
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    add(
                        owner,
                        ParamRole::Weight,
                        vec![out_channels, in_channels, kernel, kernel],
                        kernel,
                        true,
                    );
                    if bias {
                        add(owner, ParamRole::Bias, vec![out_channels], kernel, true);
                    }
                }
                Layer::BatchNorm { channels } => add_bn(&mut add, owner, channels),
                _ => {}
            }
        }
        for (ri, r) in model.residuals.iter().enumerate() {
            if let ResidualKind::Downsample {
                out_channels,
                batch_norm,
                ..
            } = r.kind
            {
                let owner = ParamOwner::Downsample(ri);
                let in_c = shapes.tensor(r.from).channels();
                add(owner, ParamRole::Weight, vec![out_channels, in_c, 1, 1], 1, true);
                if batch_norm {
                    add_bn(&mut add, owner, out_channels);
                }
            }
        }
        Ok(ParamLayout { blocks, len: offset })
    }

    pub fn block(&self, owner: ParamOwner, role: ParamRole) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.owner == owner && b.role == role)
    }

    pub fn offset(&self, owner: ParamOwner, role: ParamRole) -> Option<usize> {
        self.block(owner, role).map(|b| b.offset)
    }

    /// Mask with `true` at every trainable coordinate.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.len];
        for b in self.blocks.iter().filter(|b| b.trainable) {
            m[b.range()].iter_mut().for_each(|x| *x = true);
        }
        m
    }

    pub fn trainable_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.trainable).map(|b| b.len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        ParamVector {
            values: vec![0.0; layout.len],
            layout,
        }
    }

    pub fn from_values(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len {
            return Err(Error::Input(format!(
                "parameter vector has length {}, layout expects {}",
                values.len(),
                layout.len
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// He-normal weights, zero biases, unit batch-norm scale, zero shift,
    /// and running statistics (mean 0, variance 1).
    pub fn init(model: &ModelSpec, seed: u64) -> Result<Self> {
        let layout = ParamLayout::for_model(model)?;
        let classifier = model.classifier();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.len];
        for b in &layout.blocks {
            let dst = &mut values[b.range()];
            match b.role {
                ParamRole::Weight => {
                    let fan_in: usize = b.shape[1..].iter().product();
                    let gain = if b.owner == ParamOwner::Layer(classifier.unwrap_or(usize::MAX)) {
                        1.0
                    } else {
                        2.0
                    };
                    let normal = Normal::new(0.0, (gain / fan_in.max(1) as f64).sqrt())
                        .expect("finite std");
                    dst.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
                }
                ParamRole::BnScale | ParamRole::BnRunningVar => dst.fill(1.0),
                ParamRole::Bias | ParamRole::BnShift | ParamRole::BnRunningMean => dst.fill(0.0),
            }
        }
        Ok(ParamVector { values, layout })
    }

    pub fn check_model(&self, model: &ModelSpec) -> Result<()> {
        let expected = ParamLayout::for_model(model)?;
        if expected != self.layout {
            return Err(Error::Input(format!(
                "parameter layout does not match model '{}' (P = {} vs {})",
                model.name, self.layout.len, expected.len
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.values.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.layout.len as u64).to_le_bytes())?;
        w.write_all(&(self.layout.blocks.len() as u32).to_le_bytes())?;
        for b in &self.layout.blocks {
            let (kind, idx) = match b.owner {
                ParamOwner::Layer(i) => (0u8, i),
                ParamOwner::Downsample(i) => (1u8, i),
            };
            w.write_all(&[kind])?;
            w.write_all(&(idx as u32).to_le_bytes())?;
            w.write_all(&[b.role.code(), b.trainable as u8])?;
            w.write_all(&(b.kernel as u32).to_le_bytes())?;
            w.write_all(&(b.offset as u64).to_le_bytes())?;
            w.write_all(&(b.len as u64).to_le_bytes())?;
            w.write_all(&[b.shape.len() as u8])?;
            for &d in &b.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, path: &Path) -> Result<Self> {
        let fmt = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let io = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                fmt("truncated checkpoint")
            } else {
                Error::io(path, e)
            }
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let len = read_u64(&mut r).map_err(io)? as usize;
        let n = read_u32(&mut r).map_err(io)? as usize;
        let mut blocks = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let mut b1 = [0u8; 1];
            r.read_exact(&mut b1).map_err(io)?;
            let idx = read_u32(&mut r).map_err(io)? as usize;
            let owner = match b1[0] {
                0 => ParamOwner::Layer(idx),
                1 => ParamOwner::Downsample(idx),
                _ => return Err(fmt("bad owner kind")),
            };
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2).map_err(io)?;
            let role = ParamRole::from_code(b2[0]).ok_or_else(|| fmt("bad role"))?;
            let kernel = read_u32(&mut r).map_err(io)? as usize;
            let offset = read_u64(&mut r).map_err(io)? as usize;
            let blen = read_u64(&mut r).map_err(io)? as usize;
            r.read_exact(&mut b1).map_err(io)?;
            let mut shape = Vec::with_capacity(b1[0] as usize);
            for _ in 0..b1[0] {
                shape.push(read_u64(&mut r).map_err(io)? as usize);
            }
            blocks.push(ParamBlock {
                owner,
                role,
                offset,
                len: blen,
                shape,
                kernel,
                trainable: b2[1] != 0,
            });
        }
        let mut values = Vec::with_capacity(len.min(1 << 26));
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf).map_err(io)?;
            values.push(f64::from_le_bytes(buf));
        }
        let layout = ParamLayout { blocks, len };
        let covered: usize = layout.blocks.iter().map(|b| b.len).sum();
        if covered != len {
            return Err(fmt("block records do not partition the vector"));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
