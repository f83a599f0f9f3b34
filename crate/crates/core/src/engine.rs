//! Run configuration, the training loop, evaluation and diagnostics.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneBundle, BackboneId, BackboneSpec, BundleOptions, WeightSource};
use crate::checkpoint::{self, CheckpointMeta, Preprocessing};
use crate::data::{self, BatchSampler, DatasetSpec, Layout, Sample, Split};
use crate::error::{Error, Result};
use crate::graph::{self, LossKind, Mode, Variant};
use crate::losses::{self, HardMiningConfig, COSINE_EPS};
use crate::metrics::{self, EvalInput, EvalReport, MetricSet, DEFAULT_FPR_LIMIT};
use crate::nn::{BnCtx, BnPolicy, StatsUpdate};
use crate::par::Exec;
use crate::scoring::{self, AnomalyResult};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const FINAL_DIR: &str = "final";
pub const BEST_DIR: &str = "best";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Categories whose encoder BN runs on stored statistics by default.
pub const EVAL_BN_CATEGORIES: [&str; 9] = [
    "toothbrush",
    "leather",
    "grid",
    "tile",
    "wood",
    "screw",
    "cashew",
    "pcb1",
    "oct2017",
];

pub fn default_bn_policy(category: Option<&str>) -> BnPolicy {
    match category {
        Some(c) if EVAL_BN_CATEGORIES.contains(&c.to_ascii_lowercase().as_str()) => BnPolicy::Eval,
        _ => BnPolicy::Train,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub id: BackboneId,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// Pretrained encoder weights; random initialization when absent.
    #[serde(default)]
    pub weights: Option<WeightSource>,
}

fn default_base_channels() -> usize {
    64
}

impl BackboneConfig {
    pub fn spec(&self) -> BackboneSpec {
        BackboneSpec::new(self.id).with_base_channels(self.base_channels)
    }
}

mod defaults {
    pub fn lr_new() -> f64 {
        2e-3
    }
    pub fn lr_pretrained() -> f64 {
        1e-5
    }
    pub fn weight_decay() -> f64 {
        1e-5
    }
    pub fn betas() -> [f64; 2] {
        [0.9, 0.999]
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn eval_every() -> usize {
        250
    }
    pub fn fpr_limit() -> f64 {
        super::DEFAULT_FPR_LIMIT
    }
    pub fn eval_batch_size() -> usize {
        8
    }
    pub fn log_every() -> usize {
        10
    }
    pub fn probe_size() -> usize {
        16
    }
    pub fn bn_calibration_batches() -> usize {
        8
    }
    pub fn device() -> String {
        "cpu".into()
    }
    pub fn yes() -> bool {
        true
    }
    pub fn seed() -> u64 {
        1
    }
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    #[serde(default = "defaults::lr_new")]
    pub lr_new: f64,
    #[serde(default = "defaults::lr_pretrained")]
    pub lr_pretrained: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::betas")]
    pub betas: [f64; 2],
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    /// Encoder BN policy while training; the per-category table when unset.
    #[serde(default)]
    pub bn_policy: Option<BnPolicy>,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    /// Evaluate on the test split every `eval_every` iterations and keep
    /// the best checkpoint.
    #[serde(default = "defaults::yes")]
    pub evaluate_during_training: bool,
    #[serde(default)]
    pub smoothing_sigma: Option<f64>,
    #[serde(default = "defaults::fpr_limit")]
    pub fpr_limit: f64,
    #[serde(default = "defaults::eval_batch_size")]
    pub eval_batch_size: usize,
    #[serde(default = "defaults::log_every")]
    pub log_every: usize,
    /// Training images in the fixed diversity-probe batch.
    #[serde(default = "defaults::probe_size")]
    pub probe_size: usize,
    /// Batches used to estimate encoder BN statistics when the encoder is
    /// randomly initialized.
    #[serde(default = "defaults::bn_calibration_batches")]
    pub bn_calibration_batches: usize,
    #[serde(default = "defaults::device")]
    pub device: String,
    #[serde(default)]
    pub hard_mining: HardMiningConfig,
    pub backbone: BackboneConfig,
    pub dataset: DatasetSpec,
}

impl RunConfig {
    /// The published training recipe for a dataset: wide-50 encoder,
    /// AdamW(0.9, 0.999), weight decay 1e-5, rates 2e-3 / 1e-5, and the
    /// per-layout iteration count and batch size.
    pub fn recipe(dataset: DatasetSpec) -> Self {
        let (iterations, batch_size) = match dataset.layout {
            Layout::Visa => (3000, 16),
            Layout::FolderBinary => (1000, 32),
            Layout::Mvtec | Layout::Synthetic => (2000, 16),
        };
        RunConfig {
            variant: Variant::Ours,
            seed: defaults::seed(),
            iterations,
            batch_size,
            lr_new: defaults::lr_new(),
            lr_pretrained: defaults::lr_pretrained(),
            weight_decay: defaults::weight_decay(),
            betas: defaults::betas(),
            adam_eps: defaults::adam_eps(),
            bn_policy: None,
            eval_every: defaults::eval_every(),
            evaluate_during_training: true,
            smoothing_sigma: None,
            fpr_limit: defaults::fpr_limit(),
            eval_batch_size: defaults::eval_batch_size(),
            log_every: defaults::log_every(),
            probe_size: defaults::probe_size(),
            bn_calibration_batches: defaults::bn_calibration_batches(),
            device: defaults::device(),
            hard_mining: HardMiningConfig::default(),
            backbone: BackboneConfig {
                id: BackboneId::WideResnet50,
                base_channels: 64,
                weights: Some(WeightSource::Registry("wide_resnet50".into())),
            },
            dataset,
        }
    }

    /// CPU-sized setting: narrow resnet18 topology, 64-pixel inputs,
    /// batch 8, random initialization.
    pub fn desk_scale(mut dataset: DatasetSpec) -> Self {
        dataset.image_size = 64;
        let mut cfg = RunConfig::recipe(dataset);
        cfg.iterations = 1000;
        cfg.batch_size = 8;
        cfg.backbone = BackboneConfig {
            id: BackboneId::Resnet18,
            base_channels: 8,
            weights: None,
        };
        cfg
    }

    pub fn effective_bn_policy(&self) -> BnPolicy {
        self.bn_policy
            .unwrap_or_else(|| default_bn_policy(self.dataset.category.as_deref()))
    }

    pub fn device(&self) -> Result<Device> {
        match self.device.as_str() {
            "cpu" => Ok(Device::Cpu),
            other => Err(Error::Config(format!(
                "device '{other}' is not available in this build (only 'cpu')"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("eval_batch_size", self.eval_batch_size),
            ("log_every", self.log_every),
            ("probe_size", self.probe_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch statistics".into()));
        }
        if !(self.lr_new > 0.0) || self.lr_pretrained < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rates and weight decay must be positive".into()));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return Err(Error::Config("fpr_limit must lie in (0, 1]".into()));
        }
        if self.smoothing_sigma.is_some_and(|s| s < 0.0) {
            return Err(Error::Config("smoothing_sigma must be nonnegative".into()));
        }
        if self.backbone.base_channels == 0 {
            return Err(Error::Config("backbone.base_channels must be positive".into()));
        }
        if self.dataset.input_size() % 32 != 0 {
            return Err(Error::Config(format!(
                "model input size {} must be divisible by 32",
                self.dataset.input_size()
            )));
        }
        self.hard_mining.validate()?;
        self.dataset.validate()?;
        self.device()?;
        Ok(())
    }

    /// Parses a TOML document, applies `key.path=value` overrides and
    /// validates the result. Unknown keys are rejected.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_str(&self.to_toml()?, overrides)
    }

    pub fn preprocessing(&self) -> Preprocessing {
        Preprocessing {
            image_size: self.dataset.image_size,
            center_crop: self.dataset.center_crop,
            normalization: self.dataset.normalization,
            nonzero_crop: self.dataset.nonzero_crop,
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` in a TOML table. Values are read as TOML literals,
/// falling back to plain strings (`variant=C`).
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

/// Mean per-channel standard deviation of l2-normalized feature points of
/// a `(B, C, H, W)` batch.
pub fn feature_diversity(stage: &Tensor) -> Result<f64> {
    let (b, c, h, w) = stage.dims4()?;
    if b * h * w == 0 || c == 0 {
        return Err(Error::Shape("empty feature map".into()));
    }
    let points = stage.detach().permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
    let norm = points
        .sqr()?
        .sum_keepdim(1)?
        .sqrt()?
        .maximum(COSINE_EPS)?;
    let unit = points.broadcast_div(&norm)?;
    let mean = unit.mean_keepdim(0)?;
    let std = unit.broadcast_sub(&mean)?.sqr()?.mean(0)?.sqrt()?;
    Ok(std.mean_all()?.to_scalar::<f32>()? as f64)
}

/// Per-stage diversity series.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiversityTrace {
    /// `(iterations completed, diversity per stage)`.
    pub points: Vec<(usize, [f64; 3])>,
}

impl DiversityTrace {
    pub fn first(&self) -> Option<[f64; 3]> {
        self.points.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<[f64; 3]> {
        self.points.last().map(|p| p.1)
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        /// 0-based iteration index.
        iteration: usize,
        loss: f64,
        alpha: Option<f64>,
        discard_rate: Option<f64>,
        grad_norm: f64,
        elapsed_s: f64,
    },
    Eval {
        /// Iterations completed.
        iteration: usize,
        diversity: [f64; 3],
        metrics: Option<MetricSet>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestRecord {
    pub iteration: usize,
    pub i_auroc: f64,
    pub report: EvalReport,
}

/// Final and best metrics of one training run, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub iterations: usize,
    pub final_loss: f64,
    pub final_metrics: Option<MetricSet>,
    pub best_iteration: Option<usize>,
    pub best_metrics: Option<MetricSet>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub bundle: BackboneBundle,
    pub final_loss: f64,
    pub final_report: Option<EvalReport>,
    pub best: Option<BestRecord>,
    pub diversity: DiversityTrace,
    pub log: Vec<LogRecord>,
}

/// Where training artifacts go and how data-parallel work is scheduled.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    pub exec: Exec,
}

/// Normalized training images resident on the device.
struct ImageBank {
    images: Tensor,
}

impl ImageBank {
    fn new(samples: &[Sample], cfg: &RunConfig, device: &Device) -> Result<Self> {
        let refs: Vec<_> = samples.iter().map(|s| &s.image).collect();
        Ok(ImageBank {
            images: data::to_tensor(&refs, &cfg.dataset.normalization, device)?,
        })
    }

    fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let ids = Tensor::new(ids.as_slice(), self.images.device())?;
        Ok(self.images.index_select(&ids, 0)?)
    }

    fn first(&self, n: usize) -> Result<Tensor> {
        let n = n.min(self.images.dim(0)?);
        Ok(self.images.narrow(0, 0, n)?)
    }
}

/// Estimates encoder BN statistics from training batches (cumulative
/// average), then refreshes the frozen copy.
pub fn calibrate_encoder_bn(bundle: &BackboneBundle, batches: &[Tensor]) -> Result<()> {
    for (seen, x) in batches.iter().enumerate() {
        let ctx = BnCtx {
            policy: BnPolicy::Train,
            update: StatsUpdate::Cumulative { seen },
        };
        bundle.encoder.forward(x, ctx)?;
    }
    bundle.sync_frozen_from_encoder()
}

fn probe_ctx(variant: Variant, policy: BnPolicy) -> BnCtx {
    if variant.spec().optimize_encoder {
        BnCtx {
            policy,
            update: StatsUpdate::None,
        }
    } else {
        BnCtx::EVAL
    }
}

/// Diversity of the (adapted) encoder's stages on a probe batch, with the
/// BN mode the encoder trains in and no statistics update.
pub fn probe_diversity(bundle: &BackboneBundle, variant: Variant, probe: &Tensor) -> Result<[f64; 3]> {
    let pyr = bundle.encoder.forward(probe, probe_ctx(variant, bundle.bn_policy))?;
    let mut out = [0.0; 3];
    for (k, s) in pyr.stages().iter().enumerate() {
        out[k] = feature_diversity(s)?;
    }
    Ok(out)
}

/// Scores of a test population together with its report.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub results: Vec<AnomalyResult>,
}

/// Scoring settings carried from config or checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct ScoringOptions {
    pub smoothing_sigma: Option<f64>,
    pub reduction: scoring::Reduction,
    pub fpr_limit: f64,
    pub batch_size: usize,
}

impl ScoringOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        ScoringOptions {
            smoothing_sigma: cfg.smoothing_sigma,
            reduction: cfg.dataset.score_reduction,
            fpr_limit: cfg.fpr_limit,
            batch_size: cfg.eval_batch_size,
        }
    }
}

/// Scores images with running statistics everywhere.
pub fn score_images(
    bundle: &BackboneBundle,
    variant: Variant,
    images: &[&ndarray::Array3<f32>],
    norm: &data::Normalization,
    opts: &ScoringOptions,
    exec: Exec,
) -> Result<Vec<AnomalyResult>> {
    let device = bundle.encoder_store.device().clone();
    let mut results = Vec::with_capacity(images.len());
    for chunk in images.chunks(opts.batch_size.max(1)) {
        let x = data::to_tensor(chunk, norm, &device)?;
        let (_, _, h, w) = x.dims4()?;
        let pairs = graph::forward(variant, bundle, &x, Mode::Eval)?;
        results.extend(scoring::score_batch(&pairs, (h, w), opts.smoothing_sigma, opts.reduction, exec)?);
    }
    Ok(results)
}

pub fn evaluate_bundle(
    bundle: &BackboneBundle,
    variant: Variant,
    samples: &[Sample],
    norm: &data::Normalization,
    opts: &ScoringOptions,
    exec: Exec,
) -> Result<Evaluation> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let results = score_images(bundle, variant, &images, norm, opts, exec)?;
    let scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label == 1).collect();
    let categories: Vec<String> = samples.iter().map(|s| s.category.clone()).collect();
    let maps: Vec<_> = results.iter().map(|r| r.score_map.clone()).collect();
    let masks: Option<Vec<_>> = samples.iter().map(|s| s.mask.clone()).collect();
    let input = EvalInput {
        image_scores: &scores,
        labels: &labels,
        categories: &categories,
        maps: &maps,
        masks: masks.as_deref(),
    };
    let report = metrics::evaluate(&input, opts.fpr_limit, exec)?;
    Ok(Evaluation { report, results })
}

/// Loads a checkpoint and evaluates it on a test population.
pub fn evaluate_checkpoint(
    dir: &Path,
    samples: &[Sample],
    fpr_limit: f64,
    exec: Exec,
) -> Result<(Evaluation, CheckpointMeta)> {
    let (bundle, meta) = checkpoint::load(dir, &Device::Cpu)?;
    let opts = ScoringOptions {
        smoothing_sigma: meta.smoothing_sigma,
        reduction: meta.reduction,
        fpr_limit,
        batch_size: 8,
    };
    let eval = evaluate_bundle(&bundle, meta.variant, samples, &meta.preprocessing.normalization, &opts, exec)?;
    Ok((eval, meta))
}

fn sum_sq(vars: &[(String, Var)]) -> Result<f64> {
    let mut total = 0.0;
    for (_, v) in vars {
        total += v.as_tensor().sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
    }
    Ok(total)
}

fn grad_norm(grads: &candle_core::backprop::GradStore, vars: &[(String, Var)]) -> Result<f64> {
    let mut total = 0.0;
    for (_, v) in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        }
    }
    Ok(total.sqrt())
}

fn adamw(vars: &[(String, Var)], lr: f64, cfg: &RunConfig) -> Result<Option<AdamW>> {
    if vars.is_empty() {
        return Ok(None);
    }
    let params = ParamsAdamW {
        lr,
        beta1: cfg.betas[0],
        beta2: cfg.betas[1],
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    Ok(Some(AdamW::new(vars.iter().map(|(_, v)| v.clone()).collect(), params)?))
}

struct LogSink {
    file: Option<BufWriter<File>>,
    records: Vec<LogRecord>,
}

impl LogSink {
    fn new(out_dir: Option<&Path>) -> Result<Self> {
        let file = match out_dir {
            Some(d) => {
                let p = d.join(LOG_FILE);
                Some(BufWriter::new(
                    File::create(&p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?,
                ))
            }
            None => None,
        };
        Ok(LogSink {
            file,
            records: Vec::new(),
        })
    }

    fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&r)?;
            writeln!(f, "{line}").map_err(|e| Error::io("writing training log", e))?;
            f.flush().map_err(|e| Error::io("writing training log", e))?;
        }
        self.records.push(r);
        Ok(())
    }
}

fn checkpoint_meta(cfg: &RunConfig, iteration: usize) -> CheckpointMeta {
    CheckpointMeta {
        format_version: checkpoint::FORMAT_VERSION,
        backbone: cfg.backbone.spec(),
        variant: cfg.variant,
        bn_policy: cfg.effective_bn_policy(),
        preprocessing: cfg.preprocessing(),
        reduction: cfg.dataset.score_reduction,
        smoothing_sigma: cfg.smoothing_sigma,
        iteration,
        seed: cfg.seed,
    }
}

/// Loads data for `cfg` and trains.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = data::load_split(&cfg.dataset, Split::Train, opts.exec)?;
    let test_set = if cfg.evaluate_during_training {
        Some(data::load_split(&cfg.dataset, Split::Test, opts.exec)?)
    } else {
        None
    };
    train_on(cfg, &train_set, test_set.as_deref(), opts)
}

/// Trains on already-loaded samples; `test` enables periodic evaluation
/// and the best checkpoint.
pub fn train_on(
    cfg: &RunConfig,
    train_set: &[Sample],
    test: Option<&[Sample]>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let device = cfg.device()?;
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
        fs::write(d.join(CONFIG_SNAPSHOT), cfg.to_toml()?)
            .map_err(|e| Error::io("writing config snapshot", e))?;
    }
    let spec = cfg.variant.spec();
    let policy = cfg.effective_bn_policy();
    let bundle = BackboneBundle::build(
        &BundleOptions {
            spec: cfg.backbone.spec(),
            paired: spec.paired_encoders,
            optimize_encoder: spec.optimize_encoder,
            bn_policy: policy,
            seed: cfg.seed,
        },
        cfg.backbone.weights.as_ref(),
        &device,
    )?;
    let bank = ImageBank::new(train_set, cfg, &device)?;
    let mut sampler = BatchSampler::new(train_set.len(), cfg.batch_size, cfg.seed.wrapping_add(0x9e37_79b9))?;
    if cfg.backbone.weights.is_none() && cfg.bn_calibration_batches > 0 {
        let mut calib = BatchSampler::new(train_set.len(), cfg.batch_size, cfg.seed ^ 0xb4c0)?;
        let batches = (0..cfg.bn_calibration_batches)
            .map(|_| bank.batch(&calib.next_batch()))
            .collect::<Result<Vec<_>>>()?;
        calibrate_encoder_bn(&bundle, &batches)?;
    }
    let groups = graph::trainable_parameters(cfg.variant, &bundle);
    let mut opt_new = adamw(&groups.new, cfg.lr_new, cfg)?;
    let mut opt_pre = adamw(&groups.pretrained, cfg.lr_pretrained, cfg)?;
    let probe = bank.first(cfg.probe_size)?;
    let scoring_opts = ScoringOptions::from_config(cfg);
    let mut log = LogSink::new(opts.out_dir.as_deref())?;
    let mut trace = DiversityTrace::default();
    let mut best: Option<BestRecord> = None;
    let mut final_report = None;
    let mut final_loss = f64::NAN;

    let d0 = probe_diversity(&bundle, cfg.variant, &probe)?;
    trace.points.push((0, d0));
    log.push(LogRecord::Eval {
        iteration: 0,
        diversity: d0,
        metrics: None,
    })?;

    let start = Instant::now();
    for it in 0..cfg.iterations {
        let x = bank.batch(&sampler.next_batch())?;
        let alpha = match spec.loss_kind {
            LossKind::GlobalHm => Some(losses::alpha_schedule(it, cfg.iterations, &cfg.hard_mining)?),
            _ => None,
        };
        let pairs = graph::forward(cfg.variant, &bundle, &x, Mode::Train)?;
        let (loss, stats) = graph::pair_loss(cfg.variant, &pairs, alpha.unwrap_or(f64::NEG_INFINITY))?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!(
                    "parameter norms: new {:.4e}, encoder {:.4e}",
                    sum_sq(&groups.new)?.sqrt(),
                    sum_sq(&groups.pretrained)?.sqrt()
                ),
            });
        }
        final_loss = value;
        let grads = loss.backward()?;
        let last = it + 1 == cfg.iterations;
        if it % cfg.log_every == 0 || last {
            let discard_rate = (!stats.is_empty()).then(|| {
                let d: usize = stats.iter().map(|s| s.discarded).sum();
                let t: usize = stats.iter().map(|s| s.total).sum();
                d as f64 / t as f64
            });
            log.push(LogRecord::Step {
                iteration: it,
                loss: value,
                alpha,
                discard_rate,
                grad_norm: grad_norm(&grads, &groups.new)?,
                elapsed_s: start.elapsed().as_secs_f64(),
            })?;
        }
        if let Some(o) = &mut opt_new {
            o.step(&grads)?;
        }
        if let Some(o) = &mut opt_pre {
            o.step(&grads)?;
        }
        let done = it + 1;
        if done % cfg.eval_every == 0 || last {
            let div = probe_diversity(&bundle, cfg.variant, &probe)?;
            trace.points.push((done, div));
            let report = match test {
                Some(t) => Some(
                    evaluate_bundle(&bundle, cfg.variant, t, &cfg.dataset.normalization, &scoring_opts, opts.exec)?
                        .report,
                ),
                None => None,
            };
            log.push(LogRecord::Eval {
                iteration: done,
                diversity: div,
                metrics: report.as_ref().map(|r| r.overall.clone()),
            })?;
            if let Some(r) = &report {
                let i = r.overall.i_auroc.unwrap_or(f64::NAN);
                if best.as_ref().is_none_or(|b| i > b.i_auroc) {
                    if let Some(d) = &opts.out_dir {
                        checkpoint::save(&d.join(BEST_DIR), &bundle, &checkpoint_meta(cfg, done))?;
                    }
                    best = Some(BestRecord {
                        iteration: done,
                        i_auroc: i,
                        report: r.clone(),
                    });
                }
            }
            if last {
                final_report = report;
            }
        }
    }
    if let Some(d) = &opts.out_dir {
        checkpoint::save(&d.join(FINAL_DIR), &bundle, &checkpoint_meta(cfg, cfg.iterations))?;
        if let Some(r) = &final_report {
            fs::write(d.join(REPORT_FILE), serde_json::to_string_pretty(r)?)
                .map_err(|e| Error::io("writing report", e))?;
        }
        let summary = RunSummary {
            variant: cfg.variant,
            seed: cfg.seed,
            iterations: cfg.iterations,
            final_loss,
            final_metrics: final_report.as_ref().map(|r| r.overall.clone()),
            best_iteration: best.as_ref().map(|b| b.iteration),
            best_metrics: best.as_ref().map(|b| b.report.overall.clone()),
        };
        fs::write(d.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)
            .map_err(|e| Error::io("writing run summary", e))?;
    }
    Ok(TrainOutcome {
        bundle,
        final_loss,
        final_report,
        best,
        diversity: trace,
        log: log.records,
    })
}

/// Mean and sample standard deviation of one metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    if values.iter().all(|&v| v == values[0]) {
        return Some(Summary {
            mean: values[0],
            std: 0.0,
            n,
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { mean, std, n })
}

/// Per-metric summaries over a set of reports; metrics missing from any
/// report are left out.
pub fn aggregate(reports: &[MetricSet]) -> BTreeMap<String, Summary> {
    let fields: [(&str, fn(&MetricSet) -> Option<f64>); 5] = [
        ("i_auroc", |m| m.i_auroc),
        ("p_auroc", |m| m.p_auroc),
        ("aupro", |m| m.aupro),
        ("f1", |m| m.f1),
        ("acc", |m| m.acc),
    ];
    let mut out = BTreeMap::new();
    for (name, get) in fields {
        let values: Option<Vec<f64>> = reports.iter().map(get).collect();
        if let Some(s) = values.and_then(|v| summarize(&v)) {
            out.insert(name.to_string(), s);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricSet>,
    pub summary: BTreeMap<String, Summary>,
}

/// Trains and evaluates once per seed, each run in `out_dir/seed_<s>`.
pub fn multi_seed(cfg: &RunConfig, seeds: &[u64], opts: &TrainOptions) -> Result<MultiSeedReport> {
    if seeds.len() < 2 {
        return Err(Error::Config("multi-seed runs need at least two seeds".into()));
    }
    let mut cfg = cfg.clone();
    cfg.evaluate_during_training = true;
    let train_set = data::load_split(&cfg.dataset, Split::Train, opts.exec)?;
    let test_set = data::load_split(&cfg.dataset, Split::Test, opts.exec)?;
    let mut per_seed = Vec::new();
    for &seed in seeds {
        cfg.seed = seed;
        let run_opts = TrainOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("seed_{seed}"))),
            exec: opts.exec,
        };
        let outcome = train_on(&cfg, &train_set, Some(&test_set), &run_opts)?;
        let report = outcome
            .final_report
            .ok_or_else(|| Error::Metric("run produced no final report".into()))?;
        per_seed.push(report.overall);
    }
    Ok(MultiSeedReport {
        seeds: seeds.to_vec(),
        summary: aggregate(&per_seed),
        per_seed,
    })
}
