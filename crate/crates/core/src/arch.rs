//! Pruned architectures: applying masks, exact and approximate parameter /
//! MAC counts, layer-wise pruning ratios, bottleneck detection and width
//! transforms.
//!
//! Exact counting tracks, for every tensor, the set of original channels
//! that can still carry a nonzero value. A weighted layer emits its surviving
//! channels, an identity skip add emits the union of both paths, and a
//! downsampling add emits all channels (projections are never pruned). The
//! approximate count instead assumes each weighted layer consumes exactly the
//! surviving width of the previous one.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChannelMap, Layer, ModelSpec, Residual, ResidualKind, Shape, Shapes};
use crate::params::{ParamLayout, ParamOwner, ParamRole, ParamVector};
use crate::selection::PruningMask;
use crate::structures::Segmentation;

/// Base model plus surviving output channels of every weighted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedArch {
    pub base: ModelSpec,
    /// `survivors[l]` is `Some` for dense/conv layers.
    pub survivors: Vec<Option<Vec<usize>>>,
}

impl PrunedArch {
    pub fn unpruned(model: &ModelSpec) -> Self {
        let survivors = model
            .layers
            .iter()
            .map(|l| l.layer.out_width().map(|w| (0..w).collect()))
            .collect();
        PrunedArch {
            base: model.clone(),
            survivors,
        }
    }

    pub fn from_mask(model: &ModelSpec, seg: &Segmentation, mask: &PruningMask) -> Result<Self> {
        mask.validate(seg)?;
        let mut arch = Self::unpruned(model);
        let pruned = mask.pruned_flags(seg.len());
        for st in &seg.structures {
            if pruned[st.id] {
                if let Some(s) = arch.survivors[st.layer].as_mut() {
                    s.retain(|&c| c != st.channel);
                }
            }
        }
        Ok(arch)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    fn survivors_of(&self, layer: usize) -> &[usize] {
        self.survivors[layer].as_deref().expect("weighted layer")
    }
}

/// Live channel sets of every tensor (sorted original indices). For flat
/// tensors the "channels" are features.
#[derive(Debug, Clone)]
struct LiveSets {
    input: Vec<usize>,
    pre_add: Vec<Vec<usize>>,
    outputs: Vec<Vec<usize>>,
    skips: Vec<Vec<usize>>,
}

impl LiveSets {
    fn tensor(&self, from: Option<usize>) -> &[usize] {
        match from {
            None => &self.input,
            Some(l) => &self.outputs[l],
        }
    }

    fn layer_input(&self, l: usize) -> &[usize] {
        if l == 0 {
            &self.input
        } else {
            &self.outputs[l - 1]
        }
    }
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn flatten_set(set: &[usize], spatial: usize) -> Vec<usize> {
    set.iter().flat_map(|&c| c * spatial..(c + 1) * spatial).collect()
}

fn live_sets(arch: &PrunedArch, shapes: &Shapes) -> LiveSets {
    let model = &arch.base;
    let input: Vec<usize> = (0..shapes.input.channels()).collect();
    let n = model.layers.len();
    let mut sets = LiveSets {
        input,
        pre_add: Vec::with_capacity(n),
        outputs: Vec::with_capacity(n),
        skips: vec![Vec::new(); model.residuals.len()],
    };
    for (i, spec) in model.layers.iter().enumerate() {
        let prev = sets.layer_input(i).to_vec();
        let pre = match spec.layer {
            Layer::Dense { .. } | Layer::Conv2d { .. } => arch.survivors_of(i).to_vec(),
            Layer::Flatten => flatten_set(&prev, shapes.layer_input(i).spatial()),
            _ => prev,
        };
        let out = match model.residual_into(i) {
            None => pre.clone(),
            Some((ri, r)) => {
                let skip = match r.kind {
                    ResidualKind::IdentitySkip => sets.tensor(r.from).to_vec(),
                    ResidualKind::Downsample { out_channels, .. } => (0..out_channels).collect(),
                };
                let u = match &r.remap {
                    None => union(&pre, &skip),
                    Some(m) => {
                        let b: Vec<usize> = pre.iter().map(|&c| m.branch[c]).collect();
                        let s: Vec<usize> = skip.iter().map(|&c| m.skip[c]).collect();
                        union(&b, &s)
                    }
                };
                sets.skips[ri] = skip;
                u
            }
        };
        sets.pre_add.push(pre);
        sets.outputs.push(out);
    }
    sets
}

/// Cost of one layer (or downsampling projection) under both conventions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    /// Layer index, or `ds<r>` for the projection of residual `r`.
    pub name: String,
    pub kind: String,
    pub f_in: usize,
    pub f_out: usize,
    pub params: u64,
    pub macs: u64,
    pub approx_f_in: usize,
    pub approx_f_out: usize,
    pub approx_params: u64,
    pub approx_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub exact_params: u64,
    pub exact_macs: u64,
    pub approx_params: u64,
    pub approx_macs: u64,
    pub layers: Vec<LayerCount>,
}

pub const COUNT_CSV_HEADER: [&str; 7] = [
    "model",
    "method",
    "ratio",
    "exact_params",
    "exact_macs",
    "approx_params",
    "approx_macs",
];

impl CountReport {
    pub fn csv_row(&self, model: &str, method: &str, ratio: f64) -> Vec<String> {
        vec![
            model.to_string(),
            method.to_string(),
            ratio.to_string(),
            self.exact_params.to_string(),
            self.exact_macs.to_string(),
            self.approx_params.to_string(),
            self.approx_macs.to_string(),
        ]
    }

    pub fn write_csv(&self, path: &Path, model: &str, method: &str, ratio: f64) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_path_buf(),
                message: format!("{other:?}"),
            },
        })?;
        w.write_record(COUNT_CSV_HEADER)?;
        w.write_record(self.csv_row(model, method, ratio))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Cost {
    f_in: usize,
    f_out: usize,
    params: u64,
    macs: u64,
}

fn layer_cost(layer: &Layer, f_in: usize, f_out: usize, out: Shape) -> Cost {
    let (fi, fo) = (f_in as u64, f_out as u64);
    let (params, macs) = match *layer {
        Layer::Conv2d { kernel, bias, .. } => {
            let w = fi * fo * (kernel * kernel) as u64;
            (w + if bias { fo } else { 0 }, w * out.spatial() as u64)
        }
        Layer::Dense { bias, .. } => (fi * fo + if bias { fo } else { 0 }, fi * fo),
        Layer::BatchNorm { .. } => (2 * fo, 0),
        _ => (0, 0),
    };
    Cost {
        f_in,
        f_out,
        params,
        macs,
    }
}

fn downsample_cost(f_in: usize, f_out: usize, batch_norm: bool, out: Shape) -> Cost {
    let w = (f_in * f_out) as u64;
    Cost {
        f_in,
        f_out,
        params: w + if batch_norm { 2 * f_out as u64 } else { 0 },
        macs: w * out.spatial() as u64,
    }
}

fn exact_costs(arch: &PrunedArch, shapes: &Shapes, live: &LiveSets) -> Vec<(String, String, Cost)> {
    let model = &arch.base;
    let mut out = Vec::new();
    for (i, spec) in model.layers.iter().enumerate() {
        let cost = match spec.layer {
            Layer::Dense { .. } | Layer::Conv2d { .. } | Layer::BatchNorm { .. } => {
                let f_in = live.layer_input(i).len();
                let f_out = live.pre_add[i].len();
                layer_cost(&spec.layer, f_in, f_out, shapes.pre_add[i])
            }
            _ => continue,
        };
        out.push((i.to_string(), spec.layer.name().to_string(), cost));
    }
    for (ri, r) in model.residuals.iter().enumerate() {
        if let ResidualKind::Downsample {
            out_channels,
            batch_norm,
            ..
        } = r.kind
        {
            let f_in = live.tensor(r.from).len();
            out.push((
                format!("ds{ri}"),
                "downsample".into(),
                downsample_cost(f_in, out_channels, batch_norm, shapes.skips[ri]),
            ));
        }
    }
    out
}

fn approx_costs(arch: &PrunedArch, shapes: &Shapes) -> Vec<Cost> {
    let model = &arch.base;
    let n = model.layers.len();
    // chain width of every layer output, ignoring skip paths
    let mut width = Vec::with_capacity(n);
    let mut costs = Vec::new();
    let mut cur = shapes.input.channels();
    for (i, spec) in model.layers.iter().enumerate() {
        let f_in = cur;
        let f_out = match spec.layer {
            Layer::Dense { .. } | Layer::Conv2d { .. } => arch.survivors_of(i).len(),
            Layer::Flatten => cur * shapes.layer_input(i).spatial(),
            _ => cur,
        };
        if matches!(
            spec.layer,
            Layer::Dense { .. } | Layer::Conv2d { .. } | Layer::BatchNorm { .. }
        ) {
            costs.push(layer_cost(&spec.layer, f_in, f_out, shapes.pre_add[i]));
        }
        width.push(f_out);
        cur = f_out;
    }
    for (ri, r) in model.residuals.iter().enumerate() {
        if let ResidualKind::Downsample { batch_norm, .. } = r.kind {
            let f_in = match r.from {
                None => shapes.input.channels(),
                Some(f) => width[f],
            };
            costs.push(downsample_cost(f_in, width[r.to], batch_norm, shapes.skips[ri]));
        }
    }
    costs
}

/// Exact and approximate counts of a pruned architecture.
pub fn count(arch: &PrunedArch) -> Result<CountReport> {
    let shapes = arch.base.shapes()?;
    check_survivors(arch)?;
    let live = live_sets(arch, &shapes);
    let exact = exact_costs(arch, &shapes, &live);
    let approx = approx_costs(arch, &shapes);
    let layers: Vec<LayerCount> = exact
        .into_iter()
        .zip(approx)
        .map(|((name, kind, e), a)| LayerCount {
            name,
            kind,
            f_in: e.f_in,
            f_out: e.f_out,
            params: e.params,
            macs: e.macs,
            approx_f_in: a.f_in,
            approx_f_out: a.f_out,
            approx_params: a.params,
            approx_macs: a.macs,
        })
        .collect();
    Ok(CountReport {
        exact_params: layers.iter().map(|l| l.params).sum(),
        exact_macs: layers.iter().map(|l| l.macs).sum(),
        approx_params: layers.iter().map(|l| l.approx_params).sum(),
        approx_macs: layers.iter().map(|l| l.approx_macs).sum(),
        layers,
    })
}

/// `(exact_params, exact_macs)`.
pub fn count_exact(arch: &PrunedArch) -> Result<(u64, u64)> {
    let r = count(arch)?;
    Ok((r.exact_params, r.exact_macs))
}

/// `(approx_params, approx_macs)`.
pub fn count_approx(arch: &PrunedArch) -> Result<(u64, u64)> {
    let r = count(arch)?;
    Ok((r.approx_params, r.approx_macs))
}

fn check_survivors(arch: &PrunedArch) -> Result<()> {
    if arch.survivors.len() != arch.base.layers.len() {
        return Err(Error::structural(
            "survivor list does not match the layer list",
            "rebuild the pruned architecture from its mask",
        ));
    }
    for (i, (spec, s)) in arch.base.layers.iter().zip(&arch.survivors).enumerate() {
        let ok = match (spec.layer.out_width(), s) {
            (Some(w), Some(s)) => s.windows(2).all(|p| p[0] < p[1]) && s.iter().all(|&c| c < w),
            (None, None) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::structural(
                format!("survivor set of layer {i} is inconsistent with the model"),
                "rebuild the pruned architecture from its mask",
            ));
        }
    }
    let classifier = arch.base.classifier().expect("validated model");
    if arch.survivors_of(classifier).len() != arch.base.outputs {
        return Err(Error::structural(
            "classifier outputs were pruned",
            "the final classifier keeps all outputs",
        ));
    }
    Ok(())
}

/// A mask applied to a model.
#[derive(Debug, Clone)]
pub struct AppliedMask {
    pub arch: PrunedArch,
    /// Original layout with every pruned structure zeroed.
    pub zeroed: ParamVector,
    /// Model with only surviving channels.
    pub compact: ModelSpec,
    pub compact_params: ParamVector,
}

pub fn apply_mask(model: &ModelSpec, params: &ParamVector, mask: &PruningMask, seg: &Segmentation) -> Result<AppliedMask> {
    params.check_model(model)?;
    if model.residuals.iter().any(|r| r.remap.is_some()) {
        return Err(Error::structural(
            "model already carries residual channel maps",
            "apply masks to the unpruned model",
        ));
    }
    let arch = PrunedArch::from_mask(model, seg, mask)?;
    let mut zeroed = params.clone();
    for e in &mask.entries {
        for &i in &seg.structures[e.structure].indices {
            zeroed.values[i] = 0.0;
        }
    }
    let (compact, compact_params) = compact_rebuild(&arch, params)?;
    Ok(AppliedMask {
        arch,
        zeroed,
        compact,
        compact_params,
    })
}

fn positions(sub: &[usize], full: &[usize]) -> Vec<usize> {
    sub.iter()
        .map(|c| full.binary_search(c).expect("subset of the union"))
        .collect()
}

/// Rows `rows` and columns `cols` of a `[R][C][inner]` block.
fn gather_block(values: &[f64], cols_total: usize, inner: usize, rows: &[usize], cols: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len() * inner);
    for &r in rows {
        for &c in cols {
            let at = (r * cols_total + c) * inner;
            out.extend_from_slice(&values[at..at + inner]);
        }
    }
    out
}

/// Model and parameters restricted to live channels, with the original
/// values of every surviving weight and batch-norm statistic.
fn compact_rebuild(arch: &PrunedArch, params: &ParamVector) -> Result<(ModelSpec, ParamVector)> {
    let base = &arch.base;
    let shapes = base.shapes()?;
    let live = live_sets(arch, &shapes);
    let mut layers = base.layers.clone();
    for (i, spec) in layers.iter_mut().enumerate() {
        let f_in = live.layer_input(i).len();
        let f_out = live.pre_add[i].len();
        match &mut spec.layer {
            Layer::Dense {
                inputs, outputs, ..
            } => {
                *inputs = f_in;
                *outputs = f_out;
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                ..
            } => {
                *in_channels = f_in;
                *out_channels = f_out;
            }
            Layer::BatchNorm { channels } => *channels = f_out,
            _ => {}
        }
    }
    let mut residuals: Vec<Residual> = Vec::with_capacity(base.residuals.len());
    for (ri, r) in base.residuals.iter().enumerate() {
        let branch = &live.pre_add[r.to];
        let skip = &live.skips[ri];
        let out = &live.outputs[r.to];
        let remap = if branch == out && skip == out {
            None
        } else {
            Some(ChannelMap {
                width: out.len(),
                branch: positions(branch, out),
                skip: positions(skip, out),
            })
        };
        residuals.push(Residual {
            from: r.from,
            to: r.to,
            kind: r.kind.clone(),
            remap,
        });
    }
    let compact = ModelSpec {
        name: base.name.clone(),
        input: base.input,
        layers,
        residuals,
        outputs: base.outputs,
    };
    let layout = ParamLayout::for_model(&compact)?;
    let mut values = vec![0.0; layout.len];
    for b in &layout.blocks {
        let src = params
            .layout
            .block(b.owner, b.role)
            .expect("compact blocks mirror the original layout");
        let sv = &params.values[src.range()];
        let (rows, cols): (Vec<usize>, Vec<usize>) = match b.owner {
            ParamOwner::Layer(i) => (live.pre_add[i].clone(), live.layer_input(i).to_vec()),
            ParamOwner::Downsample(ri) => (live.skips[ri].clone(), live.tensor(base.residuals[ri].from).to_vec()),
        };
        let dst = &mut values[b.range()];
        let data = match b.role {
            ParamRole::Weight => {
                let cols_total = src.shape[1];
                let inner: usize = src.shape[2..].iter().product();
                gather_block(sv, cols_total, inner, &rows, &cols)
            }
            _ => rows.iter().map(|&r| sv[r]).collect(),
        };
        dst.copy_from_slice(&data);
    }
    Ok((compact.clone(), ParamVector::from_values(layout, values)?))
}

/// Per-layer pruned fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRatio {
    pub layer: usize,
    pub block: Option<usize>,
    pub structures: usize,
    pub pruned: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRatioHistogram {
    pub layers: Vec<LayerRatio>,
}

impl LayerRatioHistogram {
    pub fn ratios(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.ratio).collect()
    }

    /// Aggregated by block tag: `(block, pruned / structures)`.
    pub fn by_block(&self) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for l in &self.layers {
            if let Some(b) = l.block {
                let e = acc.entry(b).or_default();
                e.0 += l.pruned;
                e.1 += l.structures;
            }
        }
        acc.into_iter()
            .map(|(b, (p, s))| (b, if s == 0 { 0.0 } else { p as f64 / s as f64 }))
            .collect()
    }
}

pub fn layer_ratios(mask: &PruningMask, seg: &Segmentation, model: &ModelSpec) -> Result<LayerRatioHistogram> {
    mask.validate(seg)?;
    let layers = seg
        .layers()
        .into_iter()
        .map(|layer| {
            let structures = seg.in_layer(layer).len();
            let pruned = mask.entries.iter().filter(|e| e.layer == layer).count();
            LayerRatio {
                layer,
                block: model.layers.get(layer).and_then(|l| l.block),
                structures,
                pruned,
                ratio: pruned as f64 / structures as f64,
            }
        })
        .collect();
    Ok(LayerRatioHistogram { layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Layer,
    Block,
}

impl Granularity {
    /// Block level for residual networks, where single layers cannot be
    /// widened without breaking the skip additions.
    pub fn for_model(model: &ModelSpec) -> Self {
        if model.residuals.is_empty() {
            Granularity::Layer
        } else {
            Granularity::Block
        }
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Units whose ratio is below `threshold * median ratio`. Returns layer
/// indices or block ids depending on `unit`; empty when the median is zero.
pub fn detect_bottlenecks(hist: &LayerRatioHistogram, threshold: f64, unit: Granularity) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("bottleneck threshold {threshold} outside (0, 1)")));
    }
    let units: Vec<(usize, f64)> = match unit {
        Granularity::Layer => hist.layers.iter().map(|l| (l.layer, l.ratio)).collect(),
        Granularity::Block => hist.by_block(),
    };
    let ratios: Vec<f64> = units.iter().map(|u| u.1).collect();
    let med = median(&ratios);
    if med <= 0.0 {
        return Ok(Vec::new());
    }
    Ok(units
        .into_iter()
        .filter(|&(_, r)| r < threshold * med)
        .map(|(id, _)| id)
        .collect())
}

fn prunable_layers(model: &ModelSpec) -> Vec<usize> {
    let classifier = model.classifier();
    model
        .layers
        .iter()
        .enumerate()
        .filter(|(i, l)| l.layer.is_weighted() && Some(*i) != classifier)
        .map(|(i, _)| i)
        .collect()
}

fn set_width(layer: &mut Layer, width: usize) {
    match layer {
        Layer::Dense { outputs, .. } => *outputs = width,
        Layer::Conv2d { out_channels, .. } => *out_channels = width,
        _ => {}
    }
}

/// Multiplies the width of the targeted layers (or every layer of the
/// targeted blocks) by `multiplier`, rounding to the nearest integer and
/// adding at least one channel.
pub fn expand(model: &ModelSpec, targets: &[usize], unit: Granularity, multiplier: f64) -> Result<ModelSpec> {
    if !multiplier.is_finite() || multiplier < 1.0 {
        return Err(Error::Config(format!("width multiplier {multiplier} must be at least 1")));
    }
    let prunable = prunable_layers(model);
    let chosen: Vec<usize> = match unit {
        Granularity::Layer => {
            for t in targets {
                if !prunable.contains(t) {
                    return Err(Error::Config(format!("layer {t} is not a prunable layer")));
                }
            }
            targets.to_vec()
        }
        Granularity::Block => {
            let chosen: Vec<usize> = prunable
                .iter()
                .copied()
                .filter(|&i| model.layers[i].block.is_some_and(|b| targets.contains(&b)))
                .collect();
            for t in targets {
                if !chosen.iter().any(|&i| model.layers[i].block == Some(*t)) {
                    return Err(Error::Config(format!("block {t} has no prunable layers")));
                }
            }
            chosen
        }
    };
    let mut out = model.clone();
    if multiplier == 1.0 {
        return Ok(out);
    }
    for i in chosen {
        let w = out.layers[i].layer.out_width().expect("weighted layer");
        let new = ((w as f64 * multiplier).round() as usize).max(w + 1);
        set_width(&mut out.layers[i].layer, new);
    }
    out.rewire()?;
    Ok(out)
}

fn widen_with(model: &ModelSpec, multiplier: f64) -> Result<ModelSpec> {
    let mut out = model.clone();
    for i in prunable_layers(model) {
        let w = out.layers[i].layer.out_width().expect("weighted layer");
        set_width(&mut out.layers[i].layer, ((w as f64 * multiplier).round() as usize).max(1));
    }
    out.rewire()?;
    Ok(out)
}

fn unpruned_params(model: &ModelSpec) -> Result<u64> {
    Ok(count(&PrunedArch::unpruned(model))?.exact_params)
}

/// Uniform width multiplier whose unpruned exact parameter count is closest
/// to `target` (ties go to the smaller multiplier). Every prunable layer
/// gets `max(1, round(width * m))` channels.
pub fn widen_uniform(model: &ModelSpec, target: u64) -> Result<(ModelSpec, f64)> {
    let base = unpruned_params(model)?;
    if target <= base {
        return Ok((model.clone(), 1.0));
    }
    let widths: Vec<usize> = prunable_layers(model)
        .iter()
        .map(|&i| model.layers[i].layer.out_width().expect("weighted layer"))
        .collect();
    let mut hi = 2.0;
    while unpruned_params(&widen_with(model, hi)?)? < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Config(format!("parameter target {target} is unreachable")));
        }
    }
    // rounded widths only change where w * m crosses k + 1/2
    let mut breaks: Vec<f64> = Vec::new();
    for &w in &widths {
        let mut k = w;
        loop {
            let b = (k as f64 + 0.5) / w as f64;
            if b > hi {
                break;
            }
            if b > 1.0 {
                breaks.push(b);
            }
            k += 1;
        }
    }
    breaks.push(hi);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut candidates = vec![1.0];
    let mut lo = 1.0;
    for &b in &breaks {
        candidates.push(0.5 * (lo + b));
        lo = b;
    }
    candidates.push(hi);
    let mut best: Option<(u64, f64, ModelSpec)> = None;
    let mut last_count = None;
    for m in candidates {
        let spec = widen_with(model, m)?;
        let c = unpruned_params(&spec)?;
        if last_count == Some(c) {
            continue;
        }
        last_count = Some(c);
        let gap = c.abs_diff(target);
        if best.as_ref().is_none_or(|(g, _, _)| gap < *g) {
            best = Some((gap, m, spec));
        }
        if c >= target {
            break;
        }
    }
    let (_, m, spec) = best.expect("at least one candidate");
    Ok((spec, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{mlp_toy, ConvNetToy};

    #[test]
    fn unpruned_mlp_counts() {
        let m = mlp_toy(4, &[3], 2, true);
        let r = count(&PrunedArch::unpruned(&m)).unwrap();
        assert_eq!(r.exact_params, 4 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(r.exact_macs, 12 + 6);
        assert_eq!(r.exact_params, r.approx_params);
    }

    #[test]
    fn bottleneck_rule_examples() {
        let hist = LayerRatioHistogram {
            layers: [0.1, 0.8, 0.8, 0.9]
                .iter()
                .enumerate()
                .map(|(i, &r)| LayerRatio {
                    layer: i + 1,
                    block: None,
                    structures: 10,
                    pruned: (r * 10.0) as usize,
                    ratio: r,
                })
                .collect(),
        };
        assert_eq!(detect_bottlenecks(&hist, 0.5, Granularity::Layer).unwrap(), vec![1]);
        let mut flat = hist.clone();
        flat.layers.iter_mut().for_each(|l| l.ratio = 0.4);
        assert!(detect_bottlenecks(&flat, 0.5, Granularity::Layer).unwrap().is_empty());
        flat.layers.iter_mut().for_each(|l| l.ratio = 0.0);
        assert!(detect_bottlenecks(&flat, 0.5, Granularity::Layer).unwrap().is_empty());
        assert_eq!(detect_bottlenecks(&hist, 1.5, Granularity::Layer).unwrap_err().category(), "config");
    }

    #[test]
    fn expand_doubles_and_identity() {
        let m = ConvNetToy {
            widths: vec![64, 8, 8, 8, 8, 8],
            ..ConvNetToy::default()
        }
        .build();
        let e = expand(&m, &[0], Granularity::Layer, 2.0).unwrap();
        assert_eq!(e.layers[0].layer.out_width(), Some(128));
        assert_eq!(expand(&m, &[0], Granularity::Layer, 1.0).unwrap(), m);
        assert!(unpruned_params(&e).unwrap() > unpruned_params(&m).unwrap());
    }

    #[test]
    fn widen_to_own_count_is_identity() {
        let m = ConvNetToy::default().build();
        let (w, k) = widen_uniform(&m, unpruned_params(&m).unwrap()).unwrap();
        assert_eq!(k, 1.0);
        assert_eq!(w, m);
    }
}
