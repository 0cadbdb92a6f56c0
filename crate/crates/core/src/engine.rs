//! Batched execution of a [`ModelSpec`]: forward pass with a tape, reverse
//! pass, and linearized tangent propagation.
//!
//! Activations are stored sample-major (`n x channels x spatial`). Work is
//! spread over samples with rayon; every reduction over samples runs over
//! fixed-size sample groups summed in group order, so results do not depend
//! on the number of threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ChannelMap, Layer, ModelSpec, ResidualKind, Shape, Shapes};
use crate::params::{ParamLayout, ParamOwner, ParamRole};
use crate::real::Real;

pub(crate) const BN_EPS: f64 = 1e-5;
const GROUP: usize = 8;

/// Batch-norm behaviour: running statistics (per-sample, used for pruning
/// and evaluation) or batch statistics (training).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl ConvGeom {
    fn in_size(&self) -> usize {
        self.ci * self.h * self.w
    }
    fn out_size(&self) -> usize {
        self.co * self.oh * self.ow
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BnOffsets {
    pub scale: usize,
    pub shift: usize,
    pub mean: usize,
    pub var: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Dense {
        inputs: usize,
        outputs: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv {
        geom: ConvGeom,
        w: usize,
        b: Option<usize>,
    },
    BatchNorm {
        channels: usize,
        spatial: usize,
        off: BnOffsets,
    },
    Relu,
    AvgPool {
        c: usize,
        h: usize,
        w: usize,
        size: usize,
    },
    GlobalPool {
        c: usize,
        spatial: usize,
    },
    Flatten,
}

#[derive(Debug, Clone)]
pub(crate) struct SkipPlan {
    pub from: Option<usize>,
    /// 1x1 projection and optional batch norm; `None` for identity skips.
    pub proj: Option<(ConvGeom, usize, Option<BnOffsets>)>,
    pub remap: Option<ChannelMap>,
    pub branch_shape: Shape,
    pub skip_shape: Shape,
}

/// Model compiled against its parameter layout.
#[derive(Debug, Clone)]
pub struct Network {
    pub(crate) model: ModelSpec,
    pub(crate) shapes: Shapes,
    pub(crate) layout: ParamLayout,
    pub(crate) ops: Vec<Op>,
    pub(crate) skips: Vec<SkipPlan>,
    pub(crate) skip_at: Vec<Option<usize>>,
}

impl Network {
    pub fn new(model: &ModelSpec) -> Result<Self> {
        let shapes = model.shapes()?;
        let layout = ParamLayout::for_model(model)?;
        let off = |owner, role| layout.offset(owner, role);
        let bn_off = |owner| -> Option<BnOffsets> {
            Some(BnOffsets {
                scale: off(owner, ParamRole::BnScale)?,
                shift: off(owner, ParamRole::BnShift)?,
                mean: off(owner, ParamRole::BnRunningMean)?,
                var: off(owner, ParamRole::BnRunningVar)?,
            })
        };
        let mut ops = Vec::with_capacity(model.layers.len());
        for (i, spec) in model.layers.iter().enumerate() {
            let input = shapes.layer_input(i);
            let out = shapes.pre_add[i];
            let owner = ParamOwner::Layer(i);
            let op = match spec.layer {
                Layer::Dense {
                    inputs, outputs, ..
                } => Op::Dense {
                    inputs,
                    outputs,
                    w: off(owner, ParamRole::Weight).expect("dense weight"),
                    b: off(owner, ParamRole::Bias),
                },
                Layer::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let (h, w) = input.hw();
                    let (oh, ow) = out.hw();
                    Op::Conv {
                        geom: ConvGeom {
                            ci: input.channels(),
                            co: out.channels(),
                            h,
                            w,
                            oh,
                            ow,
                            k: kernel,
                            s: stride,
                            p: padding,
                        },
                        w: off(owner, ParamRole::Weight).expect("conv weight"),
                        b: off(owner, ParamRole::Bias),
                    }
                }
                Layer::BatchNorm { channels } => Op::BatchNorm {
                    channels,
                    spatial: input.spatial(),
                    off: bn_off(owner).expect("batch norm blocks"),
                },
                Layer::Relu => Op::Relu,
                Layer::AvgPool { size } => {
                    let (h, w) = input.hw();
                    Op::AvgPool {
                        c: input.channels(),
                        h,
                        w,
                        size,
                    }
                }
                Layer::GlobalAvgPool => Op::GlobalPool {
                    c: input.channels(),
                    spatial: input.spatial(),
                },
                Layer::Flatten => Op::Flatten,
            };
            ops.push(op);
        }
        let mut skips = Vec::with_capacity(model.residuals.len());
        let mut skip_at = vec![None; model.layers.len()];
        for (ri, r) in model.residuals.iter().enumerate() {
            let src = shapes.tensor(r.from);
            let dst = shapes.skips[ri];
            let proj = match r.kind {
                ResidualKind::IdentitySkip => None,
                ResidualKind::Downsample { stride, .. } => {
                    let owner = ParamOwner::Downsample(ri);
                    let (h, w) = src.hw();
                    let (oh, ow) = dst.hw();
                    Some((
                        ConvGeom {
                            ci: src.channels(),
                            co: dst.channels(),
                            h,
                            w,
                            oh,
                            ow,
                            k: 1,
                            s: stride,
                            p: 0,
                        },
                        off(owner, ParamRole::Weight).expect("downsample weight"),
                        bn_off(owner),
                    ))
                }
            };
            skip_at[r.to] = Some(ri);
            skips.push(SkipPlan {
                from: r.from,
                proj,
                remap: r.remap.clone(),
                branch_shape: shapes.pre_add[r.to],
                skip_shape: dst,
            });
        }
        Ok(Network {
            model: model.clone(),
            shapes,
            layout,
            ops,
            skips,
            skip_at,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn shapes(&self) -> &Shapes {
        &self.shapes
    }

    pub fn input_size(&self) -> usize {
        self.shapes.input.size()
    }

    pub fn output_size(&self) -> usize {
        self.model.outputs
    }

    pub(crate) fn in_size(&self, layer: usize) -> usize {
        self.shapes.layer_input(layer).size()
    }

    pub(crate) fn check_params(&self, len: usize) -> Result<()> {
        if len != self.layout.len {
            return Err(Error::Input(format!(
                "parameter vector has length {len}, model '{}' has P = {}",
                self.model.name, self.layout.len
            )));
        }
        Ok(())
    }

    pub(crate) fn check_inputs(&self, len: usize, n: usize) -> Result<()> {
        if n == 0 || len != n * self.input_size() {
            return Err(Error::Dimension {
                layer: 0,
                expected: format!("{n} samples of {}", self.shapes.input),
                got: format!("{len} input values"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BnStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Biased batch variance (train mode only), used to update running stats.
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct SkipCache<T> {
    pub proj_out: Vec<T>,
    pub bn: Option<BnStats<T>>,
    pub out: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct Tape<T> {
    pub n: usize,
    pub mode: Mode,
    pub input: Vec<T>,
    pub outs: Vec<Vec<T>>,
    pub bn: Vec<Option<BnStats<T>>>,
    pub skips: Vec<Option<SkipCache<T>>>,
    /// Layer outputs before the residual add, for layers that end one.
    pub pre_adds: Vec<Option<Vec<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn layer_input(&self, layer: usize) -> &[T] {
        if layer == 0 {
            &self.input
        } else {
            &self.outs[layer - 1]
        }
    }

    fn tensor(&self, from: Option<usize>) -> &[T] {
        match from {
            None => &self.input,
            Some(l) => &self.outs[l],
        }
    }

    pub fn output(&self) -> &[T] {
        self.outs.last().expect("non-empty model")
    }
}

// ---------------------------------------------------------------------------
// single-sample kernels

/// Output positions `o` for which `o*s + k_off - p` lands inside `[0, len)`.
#[inline]
fn valid_range(k_off: usize, p: usize, s: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k_off >= p { 0 } else { (p - k_off).div_ceil(s) };
    let hi = if len + p > k_off {
        ((len + p - k_off - 1) / s + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Patch matrix `[ci * k * k, oh * ow]`, zero where the kernel hits padding.
fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let osp = g.oh * g.ow;
    let mut col = vec![T::zero(); g.ci * g.k * g.k * osp];
    if x.is_empty() {
        return col;
    }
    for ci in 0..g.ci {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = valid_range(ky, g.p, g.s, g.h, g.oh);
            for kx in 0..g.k {
                let (ox0, ox1) = valid_range(kx, g.p, g.s, g.w, g.ow);
                let row = &mut col[((ci * g.k + ky) * g.k + kx) * osp..][..osp];
                for oy in oy0..oy1 {
                    let xrow = &xc[(oy * g.s + ky - g.p) * g.w..][..g.w];
                    for ox in ox0..ox1 {
                        row[oy * g.ow + ox] = xrow[ox * g.s + kx - g.p];
                    }
                }
            }
        }
    }
    col
}

/// Adds a patch-matrix gradient back onto the input gradient.
fn col2im_add<T: Real>(g: &ConvGeom, col: &[T], gx: &mut [T]) {
    let osp = g.oh * g.ow;
    for ci in 0..g.ci {
        let gxc = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = valid_range(ky, g.p, g.s, g.h, g.oh);
            for kx in 0..g.k {
                let (ox0, ox1) = valid_range(kx, g.p, g.s, g.w, g.ow);
                let row = &col[((ci * g.k + ky) * g.k + kx) * osp..][..osp];
                for oy in oy0..oy1 {
                    let base = (oy * g.s + ky - g.p) * g.w;
                    for ox in ox0..ox1 {
                        gxc[base + ox * g.s + kx - g.p] += row[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

fn conv_fwd<T: Real>(g: &ConvGeom, w: &[T], b: Option<&[T]>, x: &[T], y: &mut [T]) {
    let osp = g.oh * g.ow;
    let patch = g.ci * g.k * g.k;
    let col = im2col(g, x);
    for co in 0..g.co {
        let yc = &mut y[co * osp..(co + 1) * osp];
        yc.fill(b.map_or(T::zero(), |b| b[co]));
        for (j, &wv) in w[co * patch..(co + 1) * patch].iter().enumerate() {
            axpy(wv, &col[j * osp..(j + 1) * osp], yc);
        }
    }
}

/// Output channel `co` only; the rest of `y` is left untouched.
fn conv_fwd_channel<T: Real>(g: &ConvGeom, co: usize, w: &[T], bias: T, x: &[T], yc: &mut [T]) {
    let osp = g.oh * g.ow;
    let patch = g.ci * g.k * g.k;
    let col = im2col(g, x);
    yc.fill(bias);
    for (j, &wv) in w[co * patch..(co + 1) * patch].iter().enumerate() {
        axpy(wv, &col[j * osp..(j + 1) * osp], yc);
    }
}

/// Accumulates the weight gradient and (optionally) writes the input gradient.
fn conv_bwd<T: Real>(
    g: &ConvGeom,
    w: &[T],
    x: &[T],
    gy: &[T],
    gw: &mut [T],
    gx: Option<&mut [T]>,
) {
    let osp = g.oh * g.ow;
    let patch = g.ci * g.k * g.k;
    let col = im2col(g, x);
    for co in 0..g.co {
        let gyc = &gy[co * osp..(co + 1) * osp];
        for (j, gwv) in gw[co * patch..(co + 1) * patch].iter_mut().enumerate() {
            *gwv += dot(gyc, &col[j * osp..(j + 1) * osp]);
        }
    }
    if let Some(gx) = gx {
        conv_bwd_input(g, w, gy, gx);
    }
}

fn dense_fwd<T: Real>(inputs: usize, w: &[T], b: Option<&[T]>, x: &[T], y: &mut [T]) {
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * inputs..(o + 1) * inputs];
        let mut acc = b.map_or(T::zero(), |b| b[o]);
        for (wv, xv) in row.iter().zip(x) {
            acc += *wv * *xv;
        }
        *yo = acc;
    }
}

fn avg_pool_fwd<T: Real>(c: usize, h: usize, w: usize, size: usize, x: &[T], y: &mut [T]) {
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f64;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..size {
                    for dx in 0..size {
                        acc += x[ch * h * w + (oy * size + dy) * w + ox * size + dx];
                    }
                }
                y[ch * oh * ow + oy * ow + ox] = acc.scale(inv);
            }
        }
    }
}

fn avg_pool_bwd<T: Real>(c: usize, h: usize, w: usize, size: usize, gy: &[T], gx: &mut [T]) {
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f64;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy[ch * oh * ow + oy * ow + ox].scale(inv);
                for dy in 0..size {
                    for dx in 0..size {
                        gx[ch * h * w + (oy * size + dy) * w + ox * size + dx] = g;
                    }
                }
            }
        }
    }
}

/// Sums `f(sample, buf)` contributions over samples in a thread-count
/// independent association order.
fn reduce_samples<T: Real, F>(n: usize, len: usize, f: F) -> Vec<T>
where
    F: Fn(usize, &mut [T]) + Sync,
{
    let groups: Vec<Vec<T>> = (0..n.div_ceil(GROUP))
        .into_par_iter()
        .map(|g| {
            let mut buf = vec![T::zero(); len];
            for s in g * GROUP..((g + 1) * GROUP).min(n) {
                f(s, &mut buf);
            }
            buf
        })
        .collect();
    let mut it = groups.into_iter();
    let mut acc = it.next().unwrap_or_else(|| vec![T::zero(); len]);
    for g in it {
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// batched ops

fn bn_eval_stats<T: Real>(params: &[T], off: &BnOffsets, c: usize) -> BnStats<T> {
    let mean = params[off.mean..off.mean + c].to_vec();
    let inv_std = params[off.var..off.var + c]
        .iter()
        .map(|&v| T::from_f64(1.0) / (v + T::from_f64(BN_EPS)).sqrt())
        .collect();
    BnStats {
        mean,
        inv_std,
        var: Vec::new(),
    }
}

fn bn_batch_stats<T: Real>(x: &[T], n: usize, c: usize, sp: usize) -> BnStats<T> {
    let cnt = (n * sp) as f64;
    let per: Vec<(T, T)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = T::zero();
            for s in 0..n {
                for &v in &x[(s * c + ch) * sp..(s * c + ch + 1) * sp] {
                    sum += v;
                }
            }
            let mean = sum.scale(1.0 / cnt);
            let mut sq = T::zero();
            for s in 0..n {
                for &v in &x[(s * c + ch) * sp..(s * c + ch + 1) * sp] {
                    let d = v - mean;
                    sq += d * d;
                }
            }
            (mean, sq.scale(1.0 / cnt))
        })
        .collect();
    BnStats {
        mean: per.iter().map(|p| p.0).collect(),
        inv_std: per
            .iter()
            .map(|p| T::from_f64(1.0) / (p.1 + T::from_f64(BN_EPS)).sqrt())
            .collect(),
        var: per.iter().map(|p| p.1).collect(),
    }
}

fn bn_apply<T: Real>(params: &[T], off: &BnOffsets, st: &BnStats<T>, c: usize, sp: usize, x: &[T], y: &mut [T]) {
    if c * sp == 0 {
        return;
    }
    y.par_chunks_mut(c * sp)
        .zip(x.par_chunks(c * sp))
        .for_each(|(ys, xs)| {
            for ch in 0..c {
                let a = params[off.scale + ch] * st.inv_std[ch];
                let b = params[off.shift + ch] - a * st.mean[ch];
                for (yv, &xv) in ys[ch * sp..(ch + 1) * sp].iter_mut().zip(&xs[ch * sp..(ch + 1) * sp]) {
                    *yv = a * xv + b;
                }
            }
        });
}

/// Backward of batch norm; fills `gx` and adds scale/shift gradients.
#[allow(clippy::too_many_arguments)]
fn bn_bwd<T: Real>(
    params: &[T],
    off: &BnOffsets,
    st: &BnStats<T>,
    mode: Mode,
    n: usize,
    c: usize,
    sp: usize,
    x: &[T],
    gy: &[T],
    grads: &mut [T],
    gx: &mut [T],
) {
    let cs = c * sp;
    let per: Vec<(T, T)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let (mut gg, mut gb) = (T::zero(), T::zero());
            for s in 0..n {
                let r = s * cs + ch * sp..s * cs + (ch + 1) * sp;
                for (&xv, &g) in x[r.clone()].iter().zip(&gy[r]) {
                    gg += g * (xv - st.mean[ch]) * st.inv_std[ch];
                    gb += g;
                }
            }
            (gg, gb)
        })
        .collect();
    for ch in 0..c {
        grads[off.scale + ch] += per[ch].0;
        grads[off.shift + ch] += per[ch].1;
    }
    if cs == 0 {
        return;
    }
    match mode {
        Mode::Eval => {
            gx.par_chunks_mut(cs).zip(gy.par_chunks(cs)).for_each(|(gxs, gys)| {
                for ch in 0..c {
                    let a = params[off.scale + ch] * st.inv_std[ch];
                    for (o, &g) in gxs[ch * sp..(ch + 1) * sp].iter_mut().zip(&gys[ch * sp..(ch + 1) * sp]) {
                        *o = a * g;
                    }
                }
            });
        }
        Mode::Train => {
            let cnt = (n * sp) as f64;
            // per channel: gamma, inv_std, sum(g) and sum(g * xhat) with g = gy * gamma
            let coef: Vec<[T; 4]> = (0..c)
                .map(|ch| {
                    let gamma = params[off.scale + ch];
                    [gamma, st.inv_std[ch], per[ch].1 * gamma, per[ch].0 * gamma]
                })
                .collect();
            gx.par_chunks_mut(cs)
                .zip(gy.par_chunks(cs))
                .zip(x.par_chunks(cs))
                .for_each(|((gxs, gys), xs)| {
                    for (ch, &[gamma, inv, sum_g, sum_gx]) in coef.iter().enumerate().take(c) {
                        for i in ch * sp..(ch + 1) * sp {
                            let xhat = (xs[i] - st.mean[ch]) * inv;
                            let g = gys[i] * gamma;
                            gxs[i] = inv.scale(1.0 / cnt) * (g.scale(cnt) - sum_g - xhat * sum_gx);
                        }
                    }
                });
        }
    }
}

fn conv_bwd_input<T: Real>(g: &ConvGeom, w: &[T], gy: &[T], gx: &mut [T]) {
    let osp = g.oh * g.ow;
    let patch = g.ci * g.k * g.k;
    let mut gcol = vec![T::zero(); patch * osp];
    for co in 0..g.co {
        let gyc = &gy[co * osp..(co + 1) * osp];
        for (j, &wv) in w[co * patch..(co + 1) * patch].iter().enumerate() {
            axpy(wv, gyc, &mut gcol[j * osp..(j + 1) * osp]);
        }
    }
    gx.fill(T::zero());
    col2im_add(g, &gcol, gx);
}

fn dense_bwd_input<T: Real>(inputs: usize, w: &[T], gy: &[T], gx: &mut [T]) {
    gx.fill(T::zero());
    for (o, &g) in gy.iter().enumerate() {
        let row = &w[o * inputs..(o + 1) * inputs];
        for (gxv, wv) in gx.iter_mut().zip(row) {
            *gxv += g * *wv;
        }
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, v: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(v).for_each(|(a, b)| *a += b),
        None => *slot = Some(v),
    }
}

fn map_samples<T: Real, F>(x: &[T], in_sz: usize, n: usize, out_sz: usize, f: F) -> Vec<T>
where
    F: Fn(&[T], &mut [T]) + Sync,
{
    let mut y = vec![T::zero(); n * out_sz];
    if out_sz == 0 {
        return y;
    }
    if in_sz == 0 {
        y.par_chunks_mut(out_sz).for_each(|ys| f(&[], ys));
    } else {
        y.par_chunks_mut(out_sz)
            .zip(x.par_chunks(in_sz))
            .for_each(|(ys, xs)| f(xs, ys));
    }
    y
}

fn scatter_add<T: Real>(out: &mut [T], part: &[T], map: &[usize], width: usize, sp: usize, n: usize) {
    let pc = map.len();
    for s in 0..n {
        for (c, &dst) in map.iter().enumerate() {
            let src = &part[(s * pc + c) * sp..(s * pc + c + 1) * sp];
            for (o, &v) in out[(s * width + dst) * sp..(s * width + dst + 1) * sp].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
}

fn gather<T: Real>(full: &[T], map: &[usize], width: usize, sp: usize, n: usize) -> Vec<T> {
    let pc = map.len();
    let mut out = vec![T::zero(); n * pc * sp];
    for s in 0..n {
        for (c, &src) in map.iter().enumerate() {
            out[(s * pc + c) * sp..(s * pc + c + 1) * sp]
                .copy_from_slice(&full[(s * width + src) * sp..(s * width + src + 1) * sp]);
        }
    }
    out
}

/// Combines the branch output of a residual target with its skip output.
fn merge<T: Real>(sk: &SkipPlan, branch: Vec<T>, skip: &[T], n: usize) -> Vec<T> {
    match &sk.remap {
        None => {
            let mut out = branch;
            out.iter_mut().zip(skip).for_each(|(a, &b)| *a += b);
            out
        }
        Some(map) => {
            let sp = sk.branch_shape.spatial();
            let mut out = vec![T::zero(); n * map.width * sp];
            scatter_add(&mut out, &branch, &map.branch, map.width, sp, n);
            scatter_add(&mut out, skip, &map.skip, map.width, sp, n);
            out
        }
    }
}

fn skip_forward<T: Real>(net: &Network, params: &[T], sk: &SkipPlan, src: &[T], n: usize, mode: Mode) -> SkipCache<T> {
    match &sk.proj {
        None => SkipCache {
            proj_out: Vec::new(),
            bn: None,
            out: src.to_vec(),
        },
        Some((g, w, bn)) => {
            let wts = &params[*w..*w + g.co * g.ci];
            let proj_out = map_samples(src, g.in_size(), n, g.out_size(), |xs, ys| {
                conv_fwd(g, wts, None, xs, ys)
            });
            match bn {
                None => SkipCache {
                    out: proj_out.clone(),
                    proj_out,
                    bn: None,
                },
                Some(off) => {
                    let sp = g.oh * g.ow;
                    let st = match mode {
                        Mode::Eval => bn_eval_stats(params, off, g.co),
                        Mode::Train => bn_batch_stats(&proj_out, n, g.co, sp),
                    };
                    let mut out = vec![T::zero(); proj_out.len()];
                    bn_apply(params, off, &st, g.co, sp, &proj_out, &mut out);
                    let _ = net;
                    SkipCache {
                        proj_out,
                        bn: Some(st),
                        out,
                    }
                }
            }
        }
    }
}

/// Runs the network over `n` samples. With `gates`, every ReLU uses the
/// activation pattern recorded in that tape instead of its own input signs.
pub(crate) fn forward<T: Real>(
    net: &Network,
    params: &[T],
    input: Vec<T>,
    n: usize,
    mode: Mode,
    gates: Option<&Tape<f64>>,
) -> Tape<T> {
    let layers = net.ops.len();
    let mut tape = Tape {
        n,
        mode,
        input,
        outs: Vec::with_capacity(layers),
        bn: vec![None; layers],
        skips: vec![None; net.skips.len()],
        pre_adds: vec![None; layers],
    };
    for i in 0..layers {
        let in_sz = net.in_size(i);
        let pre_sz = net.shapes.pre_add[i].size();
        let x = tape.layer_input(i);
        let mut bn_stats = None;
        let y = match &net.ops[i] {
            Op::Dense {
                inputs,
                outputs,
                w,
                b,
            } => {
                let wts = &params[*w..*w + inputs * outputs];
                let bias = b.map(|b| &params[b..b + outputs]);
                map_samples(x, in_sz, n, pre_sz, |xs, ys| dense_fwd(*inputs, wts, bias, xs, ys))
            }
            Op::Conv { geom, w, b } => {
                let wts = &params[*w..*w + geom.co * geom.ci * geom.k * geom.k];
                let bias = b.map(|b| &params[b..b + geom.co]);
                map_samples(x, in_sz, n, pre_sz, |xs, ys| conv_fwd(geom, wts, bias, xs, ys))
            }
            Op::BatchNorm {
                channels,
                spatial,
                off,
            } => {
                let st = match mode {
                    Mode::Eval => bn_eval_stats(params, off, *channels),
                    Mode::Train => bn_batch_stats(x, n, *channels, *spatial),
                };
                let mut y = vec![T::zero(); x.len()];
                bn_apply(params, off, &st, *channels, *spatial, x, &mut y);
                bn_stats = Some(st);
                y
            }
            Op::Relu => match gates {
                None => x
                    .iter()
                    .map(|&v| if v.value() > 0.0 { v } else { T::zero() })
                    .collect(),
                Some(g) => x
                    .iter()
                    .zip(g.layer_input(i))
                    .map(|(&v, &p)| if p > 0.0 { v } else { T::zero() })
                    .collect(),
            },
            Op::AvgPool { c, h, w, size } => {
                map_samples(x, in_sz, n, pre_sz, |xs, ys| avg_pool_fwd(*c, *h, *w, *size, xs, ys))
            }
            Op::GlobalPool { c, spatial } => map_samples(x, in_sz, n, pre_sz, |xs, ys| {
                for ch in 0..*c {
                    let s: T = xs[ch * spatial..(ch + 1) * spatial].iter().copied().sum();
                    ys[ch] = s.scale(1.0 / *spatial as f64);
                }
            }),
            Op::Flatten => x.to_vec(),
        };
        tape.bn[i] = bn_stats;
        let y = match net.skip_at[i] {
            None => y,
            Some(ri) => {
                let sk = &net.skips[ri];
                let cache = skip_forward(net, params, sk, tape.tensor(sk.from), n, mode);
                tape.pre_adds[i] = Some(y.clone());
                let out = merge(sk, y, &cache.out, n);
                tape.skips[ri] = Some(cache);
                out
            }
        };
        tape.outs.push(y);
    }
    tape
}

/// Backward through one layer (excluding any residual add). Adds parameter
/// gradients into `grads` and returns the gradient w.r.t. the layer input.
fn layer_backward<T: Real>(
    net: &Network,
    params: &[T],
    tape: &Tape<T>,
    i: usize,
    gy: &[T],
    grads: &mut [T],
    need_gx: bool,
) -> Option<Vec<T>> {
    let n = tape.n;
    let in_sz = net.in_size(i);
    let out_sz = net.shapes.pre_add[i].size();
    let x = tape.layer_input(i);
    match &net.ops[i] {
        Op::Dense {
            inputs,
            outputs,
            w,
            b,
        } => {
            let (ni, no) = (*inputs, *outputs);
            let gw = reduce_samples::<T, _>(n, no * ni + no, |s, buf| {
                let xs = &x[s * ni..(s + 1) * ni];
                let gs = &gy[s * no..(s + 1) * no];
                for (o, &g) in gs.iter().enumerate() {
                    for (gwv, &xv) in buf[o * ni..(o + 1) * ni].iter_mut().zip(xs) {
                        *gwv += g * xv;
                    }
                    buf[no * ni + o] += g;
                }
            });
            for (a, &v) in grads[*w..*w + no * ni].iter_mut().zip(&gw[..no * ni]) {
                *a += v;
            }
            if let Some(b) = b {
                for (a, &v) in grads[*b..*b + no].iter_mut().zip(&gw[no * ni..]) {
                    *a += v;
                }
            }
            need_gx.then(|| {
                let wts = &params[*w..*w + no * ni];
                map_samples(gy, out_sz, n, in_sz, |gs, gxs| dense_bwd_input(ni, wts, gs, gxs))
            })
        }
        Op::Conv { geom, w, b } => {
            let wl = geom.co * geom.ci * geom.k * geom.k;
            let wts = &params[*w..*w + wl];
            let (isz, osz) = (geom.in_size(), geom.out_size());
            let osp = geom.oh * geom.ow;
            let gw = reduce_samples::<T, _>(n, wl + geom.co, |s, buf| {
                let gs = &gy[s * osz..(s + 1) * osz];
                let (bw, bb) = buf.split_at_mut(wl);
                conv_bwd(geom, wts, &x[s * isz..(s + 1) * isz], gs, bw, None);
                for co in 0..geom.co {
                    bb[co] += gs[co * osp..(co + 1) * osp].iter().copied().sum::<T>();
                }
            });
            for (a, &v) in grads[*w..*w + wl].iter_mut().zip(&gw[..wl]) {
                *a += v;
            }
            if let Some(b) = b {
                for (a, &v) in grads[*b..*b + geom.co].iter_mut().zip(&gw[wl..]) {
                    *a += v;
                }
            }
            need_gx.then(|| map_samples(gy, osz, n, isz, |gs, gxs| conv_bwd_input(geom, wts, gs, gxs)))
        }
        Op::BatchNorm {
            channels,
            spatial,
            off,
        } => {
            let st = tape.bn[i].as_ref().expect("batch norm stats on tape");
            let mut gx = vec![T::zero(); x.len()];
            bn_bwd(params, off, st, tape.mode, n, *channels, *spatial, x, gy, grads, &mut gx);
            need_gx.then_some(gx)
        }
        Op::Relu => need_gx.then(|| {
            x.iter()
                .zip(gy)
                .map(|(&xv, &g)| if xv.value() > 0.0 { g } else { T::zero() })
                .collect()
        }),
        Op::AvgPool { c, h, w, size } => need_gx.then(|| {
            map_samples(gy, out_sz, n, in_sz, |gs, gxs| avg_pool_bwd(*c, *h, *w, *size, gs, gxs))
        }),
        Op::GlobalPool { c, spatial } => need_gx.then(|| {
            map_samples(gy, out_sz, n, in_sz, |gs, gxs| {
                for ch in 0..*c {
                    let g = gs[ch].scale(1.0 / *spatial as f64);
                    gxs[ch * spatial..(ch + 1) * spatial].fill(g);
                }
            })
        }),
        Op::Flatten => need_gx.then(|| gy.to_vec()),
    }
}

#[allow(clippy::too_many_arguments)]
fn skip_backward<T: Real>(
    params: &[T],
    sk: &SkipPlan,
    cache: &SkipCache<T>,
    src: &[T],
    n: usize,
    mode: Mode,
    gs: Vec<T>,
    grads: &mut [T],
) -> Vec<T> {
    match &sk.proj {
        None => gs,
        Some((g, w, bn)) => {
            let gproj = match bn {
                None => gs,
                Some(off) => {
                    let st = cache.bn.as_ref().expect("skip batch norm stats");
                    let mut gx = vec![T::zero(); gs.len()];
                    bn_bwd(params, off, st, mode, n, g.co, g.oh * g.ow, &cache.proj_out, &gs, grads, &mut gx);
                    gx
                }
            };
            let wl = g.co * g.ci;
            let wts = &params[*w..*w + wl];
            let (isz, osz) = (g.in_size(), g.out_size());
            let gw = reduce_samples::<T, _>(n, wl, |s, buf| {
                conv_bwd(g, wts, &src[s * isz..(s + 1) * isz], &gproj[s * osz..(s + 1) * osz], buf, None);
            });
            for (a, &v) in grads[*w..*w + wl].iter_mut().zip(&gw) {
                *a += v;
            }
            map_samples(&gproj, osz, n, isz, |gps, gxs| conv_bwd_input(g, wts, gps, gxs))
        }
    }
}

/// Reverse pass. Returns parameter gradients (length P, zero on frozen
/// blocks) and, when requested, the gradient w.r.t. the network input.
pub(crate) fn backward<T: Real>(
    net: &Network,
    params: &[T],
    tape: &Tape<T>,
    grad_out: Vec<T>,
    want_input: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let layers = net.ops.len();
    let n = tape.n;
    let mut grads = vec![T::zero(); net.layout.len];
    let mut g: Vec<Option<Vec<T>>> = vec![None; layers];
    let mut g_input: Option<Vec<T>> = None;
    g[layers - 1] = Some(grad_out);
    for i in (0..layers).rev() {
        let Some(gout) = g[i].take() else { continue };
        let gbranch = match net.skip_at[i] {
            None => gout,
            Some(ri) => {
                let sk = &net.skips[ri];
                let (gb, gsk) = match &sk.remap {
                    None => (gout.clone(), gout),
                    Some(map) => {
                        let sp = sk.branch_shape.spatial();
                        (
                            gather(&gout, &map.branch, map.width, sp, n),
                            gather(&gout, &map.skip, map.width, sp, n),
                        )
                    }
                };
                let cache = tape.skips[ri].as_ref().expect("skip cache on tape");
                let src = tape.tensor(sk.from);
                let gsrc = skip_backward(params, sk, cache, src, n, tape.mode, gsk, &mut grads);
                match sk.from {
                    Some(f) => add_into(&mut g[f], gsrc),
                    None => add_into(&mut g_input, gsrc),
                }
                gb
            }
        };
        let need_gx = i > 0 || want_input;
        if let Some(gx) = layer_backward(net, params, tape, i, &gbranch, &mut grads, need_gx) {
            if i > 0 {
                add_into(&mut g[i - 1], gx);
            } else {
                add_into(&mut g_input, gx);
            }
        }
    }
    (grads, if want_input { g_input } else { None })
}

// ---------------------------------------------------------------------------
// linearized propagation

/// A structure's parameter direction: output channel `channel` of weighted
/// layer `layer` (weights and bias) plus the matching scale/shift of the
/// batch norm at `bn_layer`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ChannelDirection {
    pub layer: usize,
    pub channel: usize,
    pub bn_layer: Option<usize>,
}

/// Linear part of layer `i` applied to a tangent, at the primal point on the
/// (eval-mode) tape.
fn linear_layer(net: &Network, params: &[f64], tape: &Tape<f64>, i: usize, t: &[f64]) -> Vec<f64> {
    let n = tape.n;
    let in_sz = net.in_size(i);
    let out_sz = net.shapes.pre_add[i].size();
    match &net.ops[i] {
        Op::Dense {
            inputs,
            outputs,
            w,
            ..
        } => {
            let wts = &params[*w..*w + inputs * outputs];
            map_samples(t, in_sz, n, out_sz, |xs, ys| dense_fwd(*inputs, wts, None, xs, ys))
        }
        Op::Conv { geom, w, .. } => {
            let wts = &params[*w..*w + geom.co * geom.ci * geom.k * geom.k];
            map_samples(t, in_sz, n, out_sz, |xs, ys| conv_fwd(geom, wts, None, xs, ys))
        }
        Op::BatchNorm {
            channels,
            spatial,
            off,
        } => {
            let st = tape.bn[i].as_ref().expect("batch norm stats");
            let (c, sp) = (*channels, *spatial);
            map_samples(t, in_sz, n, out_sz, |xs, ys| {
                for ch in 0..c {
                    let a = params[off.scale + ch] * st.inv_std[ch];
                    for k in ch * sp..(ch + 1) * sp {
                        ys[k] = a * xs[k];
                    }
                }
            })
        }
        Op::Relu => t
            .iter()
            .zip(tape.layer_input(i))
            .map(|(&v, &p)| if p > 0.0 { v } else { 0.0 })
            .collect(),
        Op::AvgPool { c, h, w, size } => {
            map_samples(t, in_sz, n, out_sz, |xs, ys| avg_pool_fwd(*c, *h, *w, *size, xs, ys))
        }
        Op::GlobalPool { c, spatial } => map_samples(t, in_sz, n, out_sz, |xs, ys| {
            for ch in 0..*c {
                ys[ch] = xs[ch * spatial..(ch + 1) * spatial].iter().sum::<f64>() / *spatial as f64;
            }
        }),
        Op::Flatten => t.to_vec(),
    }
}

fn linear_skip(params: &[f64], sk: &SkipPlan, cache: &SkipCache<f64>, t: &[f64], n: usize) -> Vec<f64> {
    match &sk.proj {
        None => t.to_vec(),
        Some((g, w, bn)) => {
            let wts = &params[*w..*w + g.co * g.ci];
            let mut y = map_samples(t, g.in_size(), n, g.out_size(), |xs, ys| conv_fwd(g, wts, None, xs, ys));
            if let Some(off) = bn {
                let st = cache.bn.as_ref().expect("skip bn stats");
                let sp = g.oh * g.ow;
                for s in 0..n {
                    for ch in 0..g.co {
                        let a = params[off.scale + ch] * st.inv_std[ch];
                        for v in &mut y[(s * g.co + ch) * sp..(s * g.co + ch + 1) * sp] {
                            *v *= a;
                        }
                    }
                }
            }
            y
        }
    }
}

/// Directional derivative of the network outputs along a channel direction
/// whose values are the current parameters of that channel, i.e. the
/// projected vector `grad_theta f(x) . theta_s` for every sample on the tape.
/// Propagation starts at the structure's layer; earlier layers carry no
/// tangent.
pub(crate) fn channel_jvp(net: &Network, params: &[f64], tape: &Tape<f64>, dir: &ChannelDirection) -> Vec<f64> {
    debug_assert_eq!(tape.mode, Mode::Eval);
    let n = tape.n;
    let layers = net.ops.len();
    let mut tan: Vec<Option<Vec<f64>>> = vec![None; layers];
    for i in dir.layer..layers {
        let pre_sz = net.shapes.pre_add[i].size();
        let mut t: Option<Vec<f64>> = if i == dir.layer {
            let x = tape.layer_input(i);
            let in_sz = net.in_size(i);
            let mut y = vec![0.0; n * pre_sz];
            match &net.ops[i] {
                Op::Conv { geom, w, b } => {
                    let wts = &params[*w..*w + geom.co * geom.ci * geom.k * geom.k];
                    let bias = b.map_or(0.0, |b| params[b + dir.channel]);
                    let osp = geom.oh * geom.ow;
                    let c = dir.channel;
                    if in_sz == 0 {
                        y.par_chunks_mut(pre_sz).for_each(|ys| {
                            conv_fwd_channel(geom, c, wts, bias, &[], &mut ys[c * osp..(c + 1) * osp]);
                        });
                    } else {
                        y.par_chunks_mut(pre_sz).zip(x.par_chunks(in_sz)).for_each(|(ys, xs)| {
                            conv_fwd_channel(geom, c, wts, bias, xs, &mut ys[c * osp..(c + 1) * osp]);
                        });
                    }
                }
                Op::Dense { inputs, w, b, .. } => {
                    let c = dir.channel;
                    let row = &params[*w + c * inputs..*w + (c + 1) * inputs];
                    let bias = b.map_or(0.0, |b| params[b + c]);
                    for s in 0..n {
                        let xs = &x[s * in_sz..(s + 1) * in_sz];
                        y[s * pre_sz + c] = bias + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                _ => unreachable!("structures live on weighted layers"),
            }
            Some(y)
        } else {
            tan[i - 1].as_ref().map(|t| linear_layer(net, params, tape, i, t))
        };

        if Some(i) == dir.bn_layer {
            if let Op::BatchNorm { channels, spatial, off } = &net.ops[i] {
                let st = tape.bn[i].as_ref().expect("bn stats");
                let x = tape.layer_input(i);
                let (c, sp, ch) = (*channels, *spatial, dir.channel);
                let y = t.get_or_insert_with(|| vec![0.0; n * c * sp]);
                let (gamma, beta) = (params[off.scale + ch], params[off.shift + ch]);
                for s in 0..n {
                    for k in (s * c + ch) * sp..(s * c + ch + 1) * sp {
                        y[k] += gamma * (x[k] - st.mean[ch]) * st.inv_std[ch] + beta;
                    }
                }
            }
        }

        if let Some(ri) = net.skip_at[i] {
            let sk = &net.skips[ri];
            let skip_t = match sk.from {
                Some(f) if f >= dir.layer => tan[f].as_ref(),
                _ => None,
            };
            if t.is_some() || skip_t.is_some() {
                let branch = t.unwrap_or_else(|| vec![0.0; n * pre_sz]);
                let cache = tape.skips[ri].as_ref().expect("skip cache");
                let skip_out = match skip_t {
                    Some(st) => linear_skip(params, sk, cache, st, n),
                    None => vec![0.0; n * sk.skip_shape.size()],
                };
                t = Some(merge(sk, branch, &skip_out, n));
            }
        }
        tan[i] = t;
    }
    tan.pop()
        .flatten()
        .unwrap_or_else(|| vec![0.0; n * net.output_size()])
}

/// Batch statistics of one batch-norm site, ready to be folded into its
/// running statistics. `var` is the unbiased batch variance.
#[derive(Debug, Clone)]
pub(crate) struct BnUpdate {
    pub mean_off: usize,
    pub var_off: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn bn_updates(net: &Network, tape: &Tape<f64>) -> Vec<BnUpdate> {
    let unbiased = |st: &BnStats<f64>, cnt: usize| -> Vec<f64> {
        let k = if cnt > 1 { cnt as f64 / (cnt - 1) as f64 } else { 1.0 };
        st.var.iter().map(|v| v * k).collect()
    };
    let mut out = Vec::new();
    for (i, op) in net.ops.iter().enumerate() {
        if let (Op::BatchNorm { spatial, off, .. }, Some(st)) = (op, &tape.bn[i]) {
            out.push(BnUpdate {
                mean_off: off.mean,
                var_off: off.var,
                mean: st.mean.clone(),
                var: unbiased(st, tape.n * spatial),
            });
        }
    }
    for (sk, cache) in net.skips.iter().zip(&tape.skips) {
        if let (Some((g, _, Some(off))), Some(SkipCache { bn: Some(st), .. })) = (&sk.proj, cache) {
            out.push(BnUpdate {
                mean_off: off.mean,
                var_off: off.var,
                mean: st.mean.clone(),
                var: unbiased(st, tape.n * g.oh * g.ow),
            });
        }
    }
    out
}
