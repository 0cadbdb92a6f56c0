//! Experiment pipelines: train, prune and fine-tune, prune at
//! initialization, expand-prune with a uniformly widened baseline, mask
//! timing sweeps and aggregated reports.
//!
//! Every run is a pure function of its config and seed (wall-clock fields
//! aside). Records are appended as JSON lines to `records.jsonl` in the
//! output directory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{self, count, CountReport, Granularity, LayerRatioHistogram, PrunedArch};
use crate::autodiff::{self, Batch, LossKind, Targets};
use crate::data::{DataSource, Dataset};
use crate::engine::Network;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Shape};
use crate::params::ParamVector;
use crate::saliency::{self, SaliencyVector};
use crate::selection::{self, Method, PruningMask, SelectionPolicy};
use crate::structures::{segment, Segmentation};
use crate::train::{self, EpochMetrics, Optimizer, Schedule, TrainSettings};
use crate::zoo::{mlp_toy, ConvNetToy, ResToy};

/// Named zoo model; input shape and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ModelConfig {
    ConvnetToy {
        widths: Vec<usize>,
        #[serde(default = "yes")]
        batch_norm: bool,
        #[serde(default)]
        bias: bool,
    },
    ResToy {
        widths: [usize; 3],
        #[serde(default = "two")]
        blocks_per_stage: usize,
        #[serde(default = "yes")]
        batch_norm: bool,
    },
    MlpToy {
        hidden: Vec<usize>,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// Model description stored as JSON.
    File { path: PathBuf },
}

fn yes() -> bool {
    true
}

fn two() -> usize {
    2
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::ConvnetToy {
            widths: vec![16, 16, 32, 32, 64, 64],
            batch_norm: true,
            bias: false,
        }
    }
}

impl ModelConfig {
    pub fn build(&self, input: Shape, classes: usize) -> Result<ModelSpec> {
        let image = || match input {
            Shape::Image {
                channels,
                height,
                width,
            } => Ok((channels, height, width)),
            Shape::Flat { .. } => Err(Error::Config("convolutional models need image-shaped data".into())),
        };
        let model = match self {
            ModelConfig::ConvnetToy {
                widths,
                batch_norm,
                bias,
            } => ConvNetToy {
                input: image()?,
                widths: widths.clone(),
                classes,
                batch_norm: *batch_norm,
                bias: *bias,
            }
            .build(),
            ModelConfig::ResToy {
                widths,
                blocks_per_stage,
                batch_norm,
            } => ResToy {
                input: image()?,
                widths: *widths,
                blocks_per_stage: *blocks_per_stage,
                classes,
                batch_norm: *batch_norm,
            }
            .build(),
            ModelConfig::MlpToy { hidden, bias } => {
                let mut m = mlp_toy(input.size(), hidden, classes, *bias);
                m.input = Shape::flat(input.size());
                m
            }
            ModelConfig::File { path } => ModelSpec::load(path)?,
        };
        if model.input.size() != input.size() || model.outputs != classes {
            return Err(Error::Config(format!(
                "model {} takes {} inputs and emits {} outputs, data has {} inputs and {classes} classes",
                model.name,
                model.input.size(),
                model.outputs,
                input.size()
            )));
        }
        model.shapes()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub loss: LossKind,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    /// Fine-tuning epochs; `None` repeats the training schedule.
    pub finetune_epochs: Option<usize>,
    pub methods: Vec<Method>,
    pub ratios: Vec<f64>,
    /// Samples drawn for saliency estimation.
    pub subsample: usize,
    pub seeds: Vec<u64>,
    pub kernel_scaling: bool,
    pub layer_cap: Option<f64>,
    /// Largest structure count for which the pairwise matrix is built.
    pub max_pairwise_structures: usize,
    pub bottleneck_threshold: f64,
    pub expand_multiplier: f64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            model: ModelConfig::default(),
            loss: LossKind::CrossEntropy,
            optimizer: Optimizer::default(),
            schedule: Schedule::default(),
            finetune_epochs: None,
            methods: vec![Method::SospH],
            ratios: vec![0.5],
            subsample: 1000,
            seeds: vec![0],
            kernel_scaling: false,
            layer_cap: None,
            max_pairwise_structures: 4096,
            bottleneck_threshold: 0.5,
            expand_multiplier: 2.0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_settings(0).validate()?;
        for &r in &self.ratios {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("pruning ratio {r} outside [0, 1]")));
            }
        }
        if self.subsample == 0 {
            return Err(Error::Config("subsample size must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.expand_multiplier.is_nan() || self.expand_multiplier < 1.0 {
            return Err(Error::Config(format!(
                "expand multiplier {} must be at least 1",
                self.expand_multiplier
            )));
        }
        self.policy(Method::SospH).validate()
    }

    /// SHA-256 over the canonical JSON of every field except `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn policy(&self, method: Method) -> SelectionPolicy {
        SelectionPolicy {
            method,
            kernel_scaling: self.kernel_scaling,
            layer_cap: self.layer_cap,
        }
    }

    pub fn train_settings(&self, seed: u64) -> TrainSettings {
        TrainSettings {
            optimizer: self.optimizer.clone(),
            schedule: self.schedule.clone(),
            loss: self.loss,
            seed,
        }
    }

    fn finetune_settings(&self, seed: u64) -> TrainSettings {
        let mut s = self.train_settings(seed);
        if let Some(e) = self.finetune_epochs {
            s.schedule = Schedule::with_epochs(e);
        }
        s
    }

    fn finetune_epochs(&self) -> usize {
        self.finetune_epochs.unwrap_or(self.schedule.epochs)
    }
}

/// Independent seed for one phase of a run.
pub fn derive_seed(seed: u64, phase: &str) -> u64 {
    let d = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(phase.as_bytes()).finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Model plus parameters. Stored as `<stem>.params` (binary parameter
/// vector) and `<stem>.model.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub params: ParamVector,
}

impl Checkpoint {
    fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("params"), stem.with_extension("model.json"))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (p, m) = Self::paths(stem);
        self.params.save(&p)?;
        self.model.save(&m)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (p, m) = Self::paths(stem);
        let model = ModelSpec::load(&m)?;
        let params = ParamVector::load(&p)?;
        params.check_model(&model)?;
        Ok(Checkpoint { model, params })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Train,
    Prune,
    InitPrune,
    ExpandPrune,
    WidenPrune,
}

impl RunKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RunKind::Train => "train",
            RunKind::Prune => "prune",
            RunKind::InitPrune => "init_prune",
            RunKind::ExpandPrune => "expand_prune",
            RunKind::WidenPrune => "widen_prune",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub saliency_secs: f64,
    pub selection_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: RunKind,
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    /// Architecture the mask was computed on.
    pub architecture: ModelSpec,
    pub method: String,
    pub ratio: f64,
    pub structures: usize,
    pub pruned: usize,
    pub shortfall: usize,
    /// Training epochs before pruning (or after, for pruning at init).
    pub training: Vec<EpochMetrics>,
    pub finetune: Vec<EpochMetrics>,
    pub total_epochs: usize,
    pub accuracy_unpruned: f64,
    /// Zeroed network, before fine-tuning.
    pub accuracy_before_finetune: f64,
    /// Compact network, before fine-tuning.
    pub compact_accuracy_before_finetune: f64,
    pub accuracy_final: f64,
    pub best_finetune_accuracy: f64,
    pub counts: CountReport,
    pub layer_ratios: LayerRatioHistogram,
    pub mask_file: Option<PathBuf>,
    pub saliency_file: Option<PathBuf>,
    pub timings: Timings,
    pub notes: Vec<String>,
}

impl RunRecord {
    /// The record with wall-clock fields cleared.
    pub fn without_timings(&self) -> Self {
        RunRecord {
            timings: Timings::default(),
            ..self.clone()
        }
    }
}

/// Appends records as JSON lines.
pub fn append_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: format!("record {i}: {e}"),
            })
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Loaded data plus the model built for it.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub model: ModelSpec,
    pub train: Dataset,
    pub test: Dataset,
}

impl Workspace {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = cfg.data.load()?;
        let model = cfg.model.build(cfg.data.shape(), cfg.data.classes())?;
        Ok(Workspace {
            cfg: cfg.clone(),
            model,
            train,
            test,
        })
    }

    fn records_path(&self) -> PathBuf {
        self.cfg.output_dir.join("records.jsonl")
    }

    /// Seeded init and one pass of the training schedule.
    pub fn train_model(&self, model: &ModelSpec, seed: u64) -> Result<(ParamVector, Vec<EpochMetrics>)> {
        let net = Network::new(model)?;
        let mut params = ParamVector::init(model, derive_seed(seed, "init"))?;
        let history = train::train(
            &net,
            &mut params,
            &self.train,
            &self.test,
            &self.cfg.train_settings(derive_seed(seed, "train")),
        )?;
        Ok((params, history))
    }

    /// Trains the configured model for `seed` and writes the checkpoint.
    pub fn train(&self, seed: u64) -> Result<(Checkpoint, RunRecord)> {
        let (params, history) = self.train_model(&self.model, seed)?;
        let ckpt = Checkpoint {
            model: self.model.clone(),
            params,
        };
        let dir = self.cfg.output_dir.join("checkpoints");
        create_dir(&dir)?;
        ckpt.save(&dir.join(format!("{}_seed{seed}", self.model.name)))?;
        let seg = segment(&self.model)?;
        let acc = history.last().map_or(0.0, |e| e.test.accuracy);
        let record = RunRecord {
            kind: RunKind::Train,
            config_hash: self.cfg.hash(),
            seed,
            model: self.model.name.clone(),
            architecture: self.model.clone(),
            method: "none".into(),
            ratio: 0.0,
            structures: seg.len(),
            pruned: 0,
            shortfall: 0,
            total_epochs: history.len(),
            training: history,
            finetune: Vec::new(),
            accuracy_unpruned: acc,
            accuracy_before_finetune: acc,
            compact_accuracy_before_finetune: acc,
            accuracy_final: acc,
            best_finetune_accuracy: acc,
            counts: count(&PrunedArch::unpruned(&self.model))?,
            layer_ratios: arch::layer_ratios(&PruningMask::empty("none"), &seg, &self.model)?,
            mask_file: None,
            saliency_file: None,
            timings: Timings::default(),
            notes: Vec::new(),
        };
        append_records(&self.records_path(), std::slice::from_ref(&record))?;
        Ok((ckpt, record))
    }

    fn pruning_batch(&self, seed: u64) -> Result<Batch> {
        let n = self.cfg.subsample.min(self.train.len());
        let idx = saliency::subsample_indices(self.train.len(), n, derive_seed(seed, "subsample"))?;
        Ok(self.train.batch_of(&idx, self.cfg.loss))
    }

    /// Saliency and selection for one method on the data-loss objective.
    pub fn compute_mask(
        &self,
        model: &ModelSpec,
        params: &ParamVector,
        method: Method,
        ratio: f64,
        seed: u64,
    ) -> Result<(PruningMask, Option<SaliencyVector>, Timings)> {
        let net = Network::new(model)?;
        let seg = segment(model)?;
        let policy = self.cfg.policy(method);
        if matches!(method, Method::SospI | Method::SospIDiag) && seg.len() > self.cfg.max_pairwise_structures {
            return Err(Error::Config(format!(
                "{method} needs a {0}x{0} matrix; the limit is {1} structures",
                seg.len(),
                self.cfg.max_pairwise_structures
            )));
        }
        let batch = self.pruning_batch(seed)?;
        let t0 = Instant::now();
        let (sal, q) = match method {
            Method::SospH => (Some(saliency::sosp_h_saliency(&net, params, &batch, &seg, self.cfg.loss)?), None),
            Method::FirstOrder => {
                let g = autodiff::gradient(&net, params, &batch, self.cfg.loss)?;
                let first = saliency::first_order_terms(&g.values, params, &seg)?;
                let zeros = vec![0.0; first.len()];
                (Some(SaliencyVector::from_parts("first_order", first, zeros)), None)
            }
            Method::SospI | Method::SospIDiag => {
                let q = saliency::q_matrix(&net, params, &batch, &seg, self.cfg.loss)?;
                (None, Some(q))
            }
            Method::Random => (None, None),
        };
        let saliency_secs = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let mut mask = match method {
            Method::SospH => selection::select_sosp_h(sal.as_ref().expect("computed"), &seg, &policy, ratio)?,
            Method::FirstOrder => {
                selection::select_first_order(&sal.as_ref().expect("computed").first_order, &seg, &policy, ratio)?
            }
            Method::SospI => selection::select_sosp_i(q.as_ref().expect("computed"), &seg, &policy, ratio)?,
            Method::SospIDiag => selection::select_sosp_i_diag(q.as_ref().expect("computed"), &seg, &policy, ratio)?,
            Method::Random => selection::select_random(&seg, &policy, ratio, derive_seed(seed, "random_mask"))?,
        };
        let selection_secs = t1.elapsed().as_secs_f64();
        if mask.seed.is_none() {
            mask.seed = Some(seed);
        }
        Ok((
            mask,
            sal,
            Timings {
                saliency_secs,
                selection_secs,
            },
        ))
    }

    fn write_artifacts(
        &self,
        tag: &str,
        mask: &PruningMask,
        sal: Option<&SaliencyVector>,
    ) -> Result<(Option<PathBuf>, Option<PathBuf>)> {
        let dir = self.cfg.output_dir.join("masks");
        create_dir(&dir)?;
        let mask_path = dir.join(format!("{tag}.mask.json"));
        mask.save(&mask_path)?;
        let sal_path = match sal {
            Some(s) => {
                let p = dir.join(format!("{tag}.saliency.json"));
                s.save_json(&p)?;
                Some(p)
            }
            None => None,
        };
        Ok((Some(mask_path), sal_path))
    }

    /// Mask, apply, evaluate, fine-tune the compact network, count.
    #[allow(clippy::too_many_arguments)]
    fn prune_and_finetune(
        &self,
        kind: RunKind,
        model: &ModelSpec,
        params: &ParamVector,
        training: Vec<EpochMetrics>,
        method: Method,
        ratio: f64,
        seed: u64,
    ) -> Result<RunRecord> {
        let net = Network::new(model)?;
        let seg = segment(model)?;
        let loss = self.cfg.loss;
        let unpruned = train::evaluate(&net, params, &self.test, loss)?;
        let (mask, sal, timings) = self.compute_mask(model, params, method, ratio, seed)?;
        let tag = format!("{}_{}_{}_r{ratio}_seed{seed}", kind.as_str(), model.name, method);
        let (mask_file, saliency_file) = self.write_artifacts(&tag, &mask, sal.as_ref())?;
        let applied = arch::apply_mask(model, params, &mask, &seg)?;
        let zeroed = train::evaluate(&net, &applied.zeroed, &self.test, loss)?;
        let cnet = Network::new(&applied.compact)?;
        let mut cparams = applied.compact_params.clone();
        let compact = train::evaluate(&cnet, &cparams, &self.test, loss)?;
        let counts = count(&applied.arch)?;
        let finetune = if self.cfg.finetune_epochs() == 0 {
            Vec::new()
        } else {
            train::train(
                &cnet,
                &mut cparams,
                &self.train,
                &self.test,
                &self.cfg.finetune_settings(derive_seed(seed, "finetune")),
            )?
        };
        let after = count(&PrunedArch::unpruned(&applied.compact))?;
        if (after.exact_params, after.exact_macs) != (counts.exact_params, counts.exact_macs) {
            return Err(Error::structural(
                "fine-tuned network counts differ from the pruned architecture",
                "the compact rebuild must keep exactly the surviving channels",
            ));
        }
        let final_acc = finetune.last().map_or(compact.accuracy, |e| e.test.accuracy);
        let best = finetune.iter().map(|e| e.test.accuracy).fold(compact.accuracy, f64::max);
        let mut notes = Vec::new();
        if mask.shortfall > 0 {
            notes.push(format!("layer caps left {} structures unpruned", mask.shortfall));
        }
        Ok(RunRecord {
            kind,
            config_hash: self.cfg.hash(),
            seed,
            model: model.name.clone(),
            architecture: model.clone(),
            method: mask.method.clone(),
            ratio,
            structures: seg.len(),
            pruned: mask.len(),
            shortfall: mask.shortfall,
            total_epochs: training.len() + finetune.len(),
            training,
            finetune,
            accuracy_unpruned: unpruned.accuracy,
            accuracy_before_finetune: zeroed.accuracy,
            compact_accuracy_before_finetune: compact.accuracy,
            accuracy_final: final_acc,
            best_finetune_accuracy: best,
            counts,
            layer_ratios: arch::layer_ratios(&mask, &seg, model)?,
            mask_file,
            saliency_file,
            timings,
            notes,
        })
    }

    fn runs(&self) -> Vec<(Method, f64)> {
        let mut runs = Vec::new();
        for &m in &self.cfg.methods {
            for &r in &self.cfg.ratios {
                runs.push((m, r));
            }
        }
        runs
    }

    /// Prunes `ckpt` with every configured method and ratio.
    pub fn prune_checkpoint(&self, ckpt: &Checkpoint, training: &[EpochMetrics], seed: u64) -> Result<Vec<RunRecord>> {
        ckpt.params.check_model(&ckpt.model)?;
        let records = self
            .runs()
            .into_par_iter()
            .map(|(m, r)| self.prune_and_finetune(RunKind::Prune, &ckpt.model, &ckpt.params, training.to_vec(), m, r, seed))
            .collect::<Result<Vec<_>>>()?;
        append_records(&self.records_path(), &records)?;
        Ok(records)
    }

    /// Train, then prune and fine-tune, for every seed.
    pub fn prune_pipeline(&self) -> Result<Vec<RunRecord>> {
        let mut out = Vec::new();
        for &seed in &self.cfg.seeds {
            let (ckpt, rec) = self.train(seed)?;
            out.extend(self.prune_checkpoint(&ckpt, &rec.training, seed)?);
        }
        Ok(out)
    }

    /// Mask at random initialization, then two training cycles of the
    /// compact network.
    pub fn init_prune_pipeline(&self) -> Result<Vec<RunRecord>> {
        let mut out = Vec::new();
        for &seed in &self.cfg.seeds {
            let params = ParamVector::init(&self.model, derive_seed(seed, "init"))?;
            let records = self
                .runs()
                .into_par_iter()
                .map(|(m, r)| self.init_prune_run(&params, m, r, seed))
                .collect::<Result<Vec<_>>>()?;
            append_records(&self.records_path(), &records)?;
            out.extend(records);
        }
        Ok(out)
    }

    fn init_prune_run(&self, params: &ParamVector, method: Method, ratio: f64, seed: u64) -> Result<RunRecord> {
        let model = &self.model;
        let seg = segment(model)?;
        let (mask, sal, timings) = self.compute_mask(model, params, method, ratio, seed)?;
        let tag = format!("init_prune_{}_{}_r{ratio}_seed{seed}", model.name, method);
        let (mask_file, saliency_file) = self.write_artifacts(&tag, &mask, sal.as_ref())?;
        let applied = arch::apply_mask(model, params, &mask, &seg)?;
        let cnet = Network::new(&applied.compact)?;
        let mut cparams = applied.compact_params.clone();
        let loss = self.cfg.loss;
        let before = train::evaluate(&cnet, &cparams, &self.test, loss)?;
        let training = train::train(
            &cnet,
            &mut cparams,
            &self.train,
            &self.test,
            &self.cfg.train_settings(derive_seed(seed, "train")),
        )?;
        let second = if self.cfg.finetune_epochs() == 0 {
            Vec::new()
        } else {
            train::train(
                &cnet,
                &mut cparams,
                &self.train,
                &self.test,
                &self.cfg.finetune_settings(derive_seed(seed, "finetune")),
            )?
        };
        let final_acc = second
            .last()
            .or(training.last())
            .map_or(before.accuracy, |e| e.test.accuracy);
        let best = second.iter().map(|e| e.test.accuracy).fold(final_acc, f64::max);
        let offset = training.len();
        Ok(RunRecord {
            kind: RunKind::InitPrune,
            config_hash: self.cfg.hash(),
            seed,
            model: model.name.clone(),
            architecture: model.clone(),
            method: mask.method.clone(),
            ratio,
            structures: seg.len(),
            pruned: mask.len(),
            shortfall: mask.shortfall,
            total_epochs: offset + second.len(),
            training,
            finetune: second,
            accuracy_unpruned: before.accuracy,
            accuracy_before_finetune: before.accuracy,
            compact_accuracy_before_finetune: before.accuracy,
            accuracy_final: final_acc,
            best_finetune_accuracy: best,
            counts: count(&applied.arch)?,
            layer_ratios: arch::layer_ratios(&mask, &seg, model)?,
            mask_file,
            saliency_file,
            timings,
            notes: Vec::new(),
        })
    }

    /// Expands the bottlenecks found in `base`, then trains, prunes and
    /// fine-tunes both the expanded model and a uniformly widened model of
    /// the same unpruned parameter count.
    pub fn expand_prune(&self, base: &RunRecord) -> Result<ExpandPruneRecord> {
        let model = &base.architecture;
        let unit = Granularity::for_model(model);
        let bottlenecks = arch::detect_bottlenecks(&base.layer_ratios, self.cfg.bottleneck_threshold, unit)?;
        let method: Method = base
            .method
            .parse()
            .map_err(|_| Error::Config(format!("base record method {} cannot be rerun", base.method)))?;
        let (ratio, seed) = (base.ratio, base.seed);
        let mut notes = Vec::new();
        let expanded_model = if bottlenecks.is_empty() {
            notes.push("no bottleneck found; expansion skipped".to_string());
            None
        } else {
            Some(arch::expand(model, &bottlenecks, unit, self.cfg.expand_multiplier)?)
        };
        let target = count(&PrunedArch::unpruned(expanded_model.as_ref().unwrap_or(model)))?.exact_params;
        let (widened_model, widen_multiplier) = arch::widen_uniform(model, target)?;
        let run = |kind: RunKind, m: &ModelSpec| -> Result<RunRecord> {
            let (params, history) = self.train_model(m, seed)?;
            let mut r = self.prune_and_finetune(kind, m, &params, history, method, ratio, seed)?;
            r.notes.extend(notes.iter().cloned());
            Ok(r)
        };
        let (expanded, widened) = rayon::join(
            || expanded_model.as_ref().map(|m| run(RunKind::ExpandPrune, m)).transpose(),
            || run(RunKind::WidenPrune, &widened_model),
        );
        let (expanded, widened) = (expanded?, widened?);
        let mut records: Vec<RunRecord> = expanded.iter().cloned().collect();
        records.push(widened.clone());
        append_records(&self.records_path(), &records)?;
        let out = ExpandPruneRecord {
            config_hash: self.cfg.hash(),
            seed,
            granularity: unit,
            bottlenecks,
            widen_multiplier,
            target_params: target,
            expanded,
            widened,
            notes,
        };
        let path = self.cfg.output_dir.join(format!("expand_prune_seed{seed}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&out)?).map_err(|e| Error::io(&path, e))?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandPruneRecord {
    pub config_hash: String,
    pub seed: u64,
    pub granularity: Granularity,
    /// Layer indices or block ids, depending on `granularity`.
    pub bottlenecks: Vec<usize>,
    pub widen_multiplier: f64,
    /// Unpruned parameter count both models were matched to.
    pub target_params: u64,
    pub expanded: Option<RunRecord>,
    pub widened: RunRecord,
    pub notes: Vec<String>,
}

/// Mask-computation timing over a family of one-hidden-layer MLPs of
/// growing width, on random inputs and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingSweep {
    pub inputs: usize,
    pub base_width: usize,
    pub classes: usize,
    pub multipliers: Vec<usize>,
    pub methods: Vec<Method>,
    pub samples: usize,
    pub ratio: f64,
    pub repeats: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for TimingSweep {
    fn default() -> Self {
        TimingSweep {
            inputs: 256,
            base_width: 128,
            classes: 10,
            multipliers: (1..=8).collect(),
            methods: vec![Method::SospH, Method::SospI],
            samples: 1000,
            ratio: 0.5,
            repeats: 2,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub multiplier: usize,
    pub structures: usize,
    pub saliency_secs: f64,
    pub selection_secs: f64,
    pub total_secs: f64,
}

pub const TIMING_CSV_HEADER: [&str; 6] = [
    "method",
    "multiplier",
    "structures",
    "saliency_secs",
    "selection_secs",
    "total_secs",
];

/// Fastest of `repeats` timings per (method, width).
pub fn timing_sweep(sweep: &TimingSweep) -> Result<Vec<TimingRow>> {
    if sweep.multipliers.iter().any(|&m| m < 1) {
        return Err(Error::Config("width multipliers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut rows = Vec::new();
        let (inputs, labels) = random_classification(sweep.samples, sweep.inputs, sweep.classes, sweep.seed);
        let batch = Batch::new(inputs, sweep.samples, Targets::Labels(labels))?;
        for &mult in &sweep.multipliers {
            let model = mlp_toy(sweep.inputs, &[sweep.base_width * mult], sweep.classes, true);
            let net = Network::new(&model)?;
            let params = ParamVector::init(&model, sweep.seed)?;
            let seg = segment(&model)?;
            for &method in &sweep.methods {
                let mut best: Option<TimingRow> = None;
                for _ in 0..sweep.repeats.max(1) {
                    let t = time_mask(&net, &params, &batch, &seg, method, sweep.ratio)?;
                    let row = TimingRow {
                        method: method.to_string(),
                        multiplier: mult,
                        structures: seg.len(),
                        saliency_secs: t.saliency_secs,
                        selection_secs: t.selection_secs,
                        total_secs: t.saliency_secs + t.selection_secs,
                    };
                    if best.as_ref().is_none_or(|b| row.total_secs < b.total_secs) {
                        best = Some(row);
                    }
                }
                rows.push(best.expect("at least one repeat"));
            }
        }
        Ok(rows)
    })
}

fn random_classification(n: usize, d: usize, classes: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (inputs, labels)
}

fn time_mask(
    net: &Network,
    params: &ParamVector,
    batch: &Batch,
    seg: &Segmentation,
    method: Method,
    ratio: f64,
) -> Result<Timings> {
    let kind = LossKind::CrossEntropy;
    let policy = SelectionPolicy::new(method);
    let t0 = Instant::now();
    match method {
        Method::SospH => {
            let sal = saliency::sosp_h_saliency(net, params, batch, seg, kind)?;
            let saliency_secs = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            std::hint::black_box(selection::select_sosp_h(&sal, seg, &policy, ratio)?);
            Ok(Timings {
                saliency_secs,
                selection_secs: t1.elapsed().as_secs_f64(),
            })
        }
        Method::SospI | Method::SospIDiag => {
            let q = saliency::q_matrix(net, params, batch, seg, kind)?;
            let saliency_secs = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            if method == Method::SospI {
                std::hint::black_box(selection::select_sosp_i(&q, seg, &policy, ratio)?);
            } else {
                std::hint::black_box(selection::select_sosp_i_diag(&q, seg, &policy, ratio)?);
            }
            Ok(Timings {
                saliency_secs,
                selection_secs: t1.elapsed().as_secs_f64(),
            })
        }
        Method::FirstOrder => {
            let g = autodiff::gradient(net, params, batch, kind)?;
            let first = saliency::first_order_terms(&g.values, params, seg)?;
            let saliency_secs = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            std::hint::black_box(selection::select_first_order(&first, seg, &policy, ratio)?);
            Ok(Timings {
                saliency_secs,
                selection_secs: t1.elapsed().as_secs_f64(),
            })
        }
        Method::Random => {
            let t1 = Instant::now();
            std::hint::black_box(selection::select_random(seg, &policy, ratio, 0)?);
            Ok(Timings {
                saliency_secs: 0.0,
                selection_secs: t1.elapsed().as_secs_f64(),
            })
        }
    }
}

pub fn write_timing_csv(rows: &[TimingRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    w.write_record(TIMING_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.multiplier.to_string(),
            r.structures.to_string(),
            r.saliency_secs.to_string(),
            r.selection_secs.to_string(),
            r.total_secs.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(e: csv::Error, path: &Path) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One aggregated row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub kind: String,
    pub model: String,
    pub method: String,
    pub ratio: f64,
    pub seeds: usize,
    pub accuracy_before_finetune: (f64, f64),
    pub accuracy_final: (f64, f64),
    pub best_finetune_accuracy: (f64, f64),
    pub exact_params: (f64, f64),
    pub exact_macs: (f64, f64),
}

pub const SUMMARY_CSV_HEADER: [&str; 15] = [
    "kind",
    "model",
    "method",
    "ratio",
    "seeds",
    "acc_before_ft_mean",
    "acc_before_ft_std",
    "acc_final_mean",
    "acc_final_std",
    "acc_best_ft_mean",
    "acc_best_ft_std",
    "exact_params_mean",
    "exact_params_std",
    "exact_macs_mean",
    "exact_macs_std",
];

/// Files written by [`report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub rows: Vec<SummaryRow>,
    pub summary: PathBuf,
    pub accuracy_vs_params: PathBuf,
    pub accuracy_vs_macs: PathBuf,
    pub histograms: Vec<PathBuf>,
}

/// Aggregates records over seeds into CSV tables and plot data.
pub fn report(records: &[RunRecord], out_dir: &Path) -> Result<ReportBundle> {
    if records.is_empty() {
        return Err(Error::EmptyReport("no run records given".into()));
    }
    create_dir(out_dir)?;
    let mut groups: BTreeMap<(String, String, String, u64), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.kind.as_str().to_string(), r.model.clone(), r.method.clone(), r.ratio.to_bits()))
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    let mut histograms = Vec::new();
    for ((kind, model, method, ratio_bits), rs) in &groups {
        let stat = |f: &dyn Fn(&RunRecord) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        let ratio = f64::from_bits(*ratio_bits);
        rows.push(SummaryRow {
            kind: kind.clone(),
            model: model.clone(),
            method: method.clone(),
            ratio,
            seeds: rs.len(),
            accuracy_before_finetune: stat(&|r| r.accuracy_before_finetune),
            accuracy_final: stat(&|r| r.accuracy_final),
            best_finetune_accuracy: stat(&|r| r.best_finetune_accuracy),
            exact_params: stat(&|r| r.counts.exact_params as f64),
            exact_macs: stat(&|r| r.counts.exact_macs as f64),
        });
        let path = out_dir.join(format!("layer_ratios_{kind}_{model}_{method}_r{ratio}.csv"));
        write_histogram(rs, &path)?;
        histograms.push(path);
    }
    let summary = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary).map_err(|e| csv_io(e, &summary))?;
    w.write_record(SUMMARY_CSV_HEADER)?;
    for r in &rows {
        let mut rec = vec![
            r.kind.clone(),
            r.model.clone(),
            r.method.clone(),
            r.ratio.to_string(),
            r.seeds.to_string(),
        ];
        for (m, s) in [
            r.accuracy_before_finetune,
            r.accuracy_final,
            r.best_finetune_accuracy,
            r.exact_params,
            r.exact_macs,
        ] {
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&summary, e))?;

    let accuracy_vs_params = out_dir.join("accuracy_vs_params.csv");
    let accuracy_vs_macs = out_dir.join("accuracy_vs_macs.csv");
    for (path, pick) in [
        (&accuracy_vs_params, (|r: &RunRecord| r.counts.exact_params) as fn(&RunRecord) -> u64),
        (&accuracy_vs_macs, |r: &RunRecord| r.counts.exact_macs),
    ] {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
        w.write_record(["kind", "model", "method", "ratio", "seed", "count", "accuracy"])?;
        for r in records {
            w.write_record([
                r.kind.as_str().to_string(),
                r.model.clone(),
                r.method.clone(),
                r.ratio.to_string(),
                r.seed.to_string(),
                pick(r).to_string(),
                r.accuracy_final.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(ReportBundle {
        rows,
        summary,
        accuracy_vs_params,
        accuracy_vs_macs,
        histograms,
    })
}

/// One row per prunable layer: mean and sample std of its pruning ratio.
fn write_histogram(records: &[&RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    w.write_record(["layer", "block", "structures", "ratio_mean", "ratio_std"])?;
    let first = &records[0].layer_ratios.layers;
    for (i, l) in first.iter().enumerate() {
        let vals: Vec<f64> = records
            .iter()
            .filter_map(|r| r.layer_ratios.layers.get(i).map(|x| x.ratio))
            .collect();
        let (m, s) = mean_std(&vals);
        w.write_record([
            l.layer.to_string(),
            l.block.map_or(String::new(), |b| b.to_string()),
            l.structures.to_string(),
            m.to_string(),
            s.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
