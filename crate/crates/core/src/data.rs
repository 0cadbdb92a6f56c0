//! Labeled datasets: a seeded synthetic image generator, a linearly
//! separable toy set and a loader for flat binary image files.
//!
//! Flat binary files hold fixed-size records of one label byte followed by
//! `channels * height * width` pixel bytes in channel-major order. Pixels
//! are scaled to `[0, 1]`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Batch, LossKind, Targets};
use crate::error::{Error, Result};
use crate::model::Shape;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Shape,
    pub classes: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: Shape, classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() * shape.size() {
            return Err(Error::Input(format!(
                "{} input values for {} samples of size {}",
                inputs.len(),
                labels.len(),
                shape.size()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            shape,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples `idx` as a batch; squared loss gets one-hot targets.
    pub fn batch_of(&self, idx: &[usize], kind: LossKind) -> Batch {
        let sz = self.shape.size();
        let mut inputs = Vec::with_capacity(idx.len() * sz);
        for &i in idx {
            inputs.extend_from_slice(&self.inputs[i * sz..(i + 1) * sz]);
        }
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        let targets = match kind {
            LossKind::CrossEntropy => Targets::Labels(labels),
            LossKind::Squared => Targets::Values(one_hot(&labels, self.classes)),
        };
        Batch {
            inputs,
            n: idx.len(),
            targets,
        }
    }

    pub fn batch(&self, kind: LossKind) -> Batch {
        self.batch_of(&(0..self.len()).collect::<Vec<_>>(), kind)
    }

    pub fn write_flat_binary(&self, path: &Path) -> Result<()> {
        if self.classes > 256 {
            return Err(Error::Config("flat binary labels hold at most 256 classes".into()));
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let sz = self.shape.size();
        let mut rec = vec![0u8; sz + 1];
        for (i, &y) in self.labels.iter().enumerate() {
            rec[0] = y as u8;
            for (b, &v) in rec[1..].iter_mut().zip(&self.inputs[i * sz..(i + 1) * sz]) {
                *b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            w.write_all(&rec).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        v[i * classes + y] = 1.0;
    }
    v
}

pub fn load_flat_binary(path: &Path, shape: Shape, classes: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let rec = shape.size() + 1;
    let fmt = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.is_empty() {
        return Err(fmt("no records".into()));
    }
    if bytes.len() % rec != 0 {
        return Err(fmt(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut inputs = Vec::with_capacity(n * shape.size());
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let y = r[0] as usize;
        if y >= classes {
            return Err(fmt(format!("record {i} has label {y}, expected fewer than {classes} classes")));
        }
        labels.push(y);
        inputs.extend(r[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(shape, classes, inputs, labels)
}

/// Class-conditional images: each class owns a smooth random prototype;
/// samples are randomly scaled, cyclically shifted by up to one pixel and
/// corrupted with Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticImages {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticImages {
    fn default() -> Self {
        SyntheticImages {
            channels: 3,
            height: 8,
            width: 8,
            classes: 10,
            noise: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticImages {
    pub fn shape(&self) -> Shape {
        Shape::image(self.channels, self.height, self.width)
    }

    fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (h, w) = (self.height, self.width);
        let tau = std::f64::consts::TAU;
        (0..self.classes)
            .map(|_| {
                let mut p = vec![0.0; self.channels * h * w];
                for c in 0..self.channels {
                    for _ in 0..3 {
                        let fy = rng.gen_range(0..=2) as f64 / h as f64;
                        let fx = rng.gen_range(0..=2) as f64 / w as f64;
                        let phase = rng.gen_range(0.0..tau);
                        let amp = rng.gen_range(-1.0..1.0);
                        for y in 0..h {
                            for x in 0..w {
                                p[(c * h + y) * w + x] += amp * (tau * (fy * y as f64 + fx * x as f64) + phase).cos();
                            }
                        }
                    }
                }
                p
            })
            .collect()
    }

    /// `n` samples with balanced labels. Different `stream` values give
    /// independent samples of the same classes.
    pub fn generate(&self, n: usize, stream: u64) -> Result<Dataset> {
        if self.classes == 0 || self.shape().size() == 0 {
            return Err(Error::Config("synthetic images need at least one class and pixel".into()));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Config(format!("noise level {} must be nonnegative", self.noise)));
        }
        let protos = self.prototypes();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let (h, w) = (self.height, self.width);
        let sz = self.shape().size();
        let mut inputs = Vec::with_capacity(n * sz);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % self.classes;
            let scale = rng.gen_range(0.6..1.4);
            let dy = rng.gen_range(0..3) + h - 1;
            let dx = rng.gen_range(0..3) + w - 1;
            let p = &protos[y];
            for c in 0..self.channels {
                for yy in 0..h {
                    for xx in 0..w {
                        let src = (c * h + (yy + dy) % h) * w + (xx + dx) % w;
                        inputs.push(scale * p[src] + self.noise * normal.sample(&mut rng));
                    }
                }
            }
            labels.push(y);
        }
        Dataset::new(self.shape(), self.classes, inputs, labels)
    }
}

/// Two Gaussian clouds in `dim` dimensions, separated by `margin` along a
/// random unit direction with every point at least `margin / 2` from the
/// separating hyperplane. Returns the data and the direction.
pub fn linearly_separable(n: usize, dim: usize, margin: f64, seed: u64) -> Result<(Dataset, Vec<f64>)> {
    if dim == 0 {
        return Err(Error::Config("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut dir: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let mut x: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let along: f64 = x.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let sign = if y == 1 { 1.0 } else { -1.0 };
        let target = sign * (0.5 * margin + along.abs());
        for (v, d) in x.iter_mut().zip(&dir) {
            *v += (target - along) * d;
        }
        inputs.extend(x);
        labels.push(y);
    }
    Ok((Dataset::new(Shape::flat(dim), 2, inputs, labels)?, dir))
}

/// Where a run's train and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(flatten)]
        images: SyntheticImages,
        train: usize,
        test: usize,
    },
    FlatBinary {
        train: PathBuf,
        test: PathBuf,
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            images: SyntheticImages::default(),
            train: 5000,
            test: 1000,
        }
    }
}

impl DataSource {
    pub fn shape(&self) -> Shape {
        match self {
            DataSource::Synthetic { images, .. } => images.shape(),
            DataSource::FlatBinary {
                channels,
                height,
                width,
                ..
            } => Shape::image(*channels, *height, *width),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DataSource::Synthetic { images, .. } => images.classes,
            DataSource::FlatBinary { classes, .. } => *classes,
        }
    }

    /// `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic { images, train, test } => Ok((images.generate(*train, 0)?, images.generate(*test, 1)?)),
            DataSource::FlatBinary {
                train, test, classes, ..
            } => Ok((
                load_flat_binary(train, self.shape(), *classes)?,
                load_flat_binary(test, self.shape(), *classes)?,
            )),
        }
    }
}
