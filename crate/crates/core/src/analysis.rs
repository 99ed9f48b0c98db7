//! Parameter accounting, analytic multiply-add counts and throughput
//! measurement.
//!
//! Cost unit everywhere is the multiply-add. Convolutions cost
//! `Cin·Cout·kh·kw·H'·W'`, fully connected layers `Din·Dout`, global pooling
//! one per input element, a channel gate one per gated element and a
//! per-channel scale-shift or (inference-folded) batch norm on a descriptor
//! one per channel. Batch norms on feature maps and activations are not
//! counted.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionKind, BnMode, Connection};
use crate::backbone::{build_model, Model, ModelSpec};
use crate::data::{DatasetMeta, Example};
use crate::error::{Error, Result};
use crate::ops::{self, Mode};
use crate::tensor::{Scalar, Tensor};
use crate::training::{fit, TrainConfig};
use crate::Var;

pub const COST_UNIT: &str = "multiply-add";

/// The compute kernels run on the calling thread only.
pub const COMPUTE_THREADS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub total: u64,
    pub backbone: u64,
    pub attention: u64,
}

/// Trainable parameters only; batch-norm running statistics are excluded.
pub fn count_params<T: Scalar>(model: &Model<T>) -> ParamBreakdown {
    let mut b = ParamBreakdown {
        total: 0,
        backbone: 0,
        attention: 0,
    };
    for p in model.params().iter() {
        let n = p.value.numel() as u64;
        b.total += n;
        if p.role.is_attention() {
            b.attention += n;
        } else {
            b.backbone += n;
        }
    }
    b
}

/// Closed-form attention parameter total of a spec: the per-module formula
/// summed over blocks.
pub fn closed_form_attention_params(spec: &ModelSpec) -> u64 {
    spec.blocks()
        .iter()
        .map(|b| b.attention.param_count(b.out_channels) as u64)
        .sum()
}

pub fn params_millions(total: u64) -> f64 {
    (total as f64 / 1e6 * 100.0).round() / 100.0
}

/// Multiply-adds of one attention module applied to a `C × H × W` map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMacs {
    /// Global average pooling of the residual branch.
    pub pool: u64,
    /// Descriptor-to-map transform, all recurrence steps included.
    pub transform: u64,
    /// Part of `transform` spent in per-channel scale-shift (ras).
    pub scale_shift: u64,
    /// Part of `transform` spent in connections between steps.
    pub connection: u64,
    /// Broadcasting the map over the feature map.
    pub gate: u64,
}

impl AttentionMacs {
    pub fn total(&self) -> u64 {
        self.pool + self.transform + self.gate
    }
}

/// Per-step connection cost on a `C`-wide descriptor.
fn connection_macs(connection: Connection, channels: u64) -> u64 {
    match connection {
        Connection::Bn => channels,
        _ => 0,
    }
}

pub fn attention_macs(cfg: &AttentionConfig, channels: usize, h: usize, w: usize) -> AttentionMacs {
    let c = channels as u64;
    let k = cfg.steps() as u64;
    let links = k - 1;
    let plane = c * (h * w) as u64;
    let se_pair = 2 * c * cfg.bottleneck(channels) as u64;
    let link_cost = links * connection_macs(cfg.effective_connection(), c);
    let (transform, scale_shift, connection) = match cfg.kind {
        AttentionKind::None => return AttentionMacs::default(),
        AttentionKind::Se => (se_pair, 0, 0),
        AttentionKind::SeDeep | AttentionKind::SeShared => (k * se_pair + link_cost, 0, link_cost),
        AttentionKind::Eca => (c * cfg.eca_kernel_size(channels) as u64, 0, 0),
        AttentionKind::Ras => (k * c + link_cost, k * c, link_cost),
    };
    AttentionMacs {
        pool: plane,
        transform,
        scale_shift,
        connection,
        gate: plane,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub stem: u64,
    /// The three convolutions of every residual branch.
    pub block_convs: u64,
    pub shortcuts: u64,
    pub final_pool: u64,
    pub head: u64,
    pub attention: AttentionMacs,
    /// Attention cost of each block in forward order.
    pub attention_per_block: Vec<u64>,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.stem + self.block_convs + self.shortcuts + self.final_pool + self.head + self.attention.total()
    }
}

fn conv_macs(cin: usize, cout: usize, kernel: usize, stride: usize, h: usize, w: usize) -> (u64, usize, usize) {
    let ho = ops::conv_output_size(h, kernel, stride, kernel / 2);
    let wo = ops::conv_output_size(w, kernel, stride, kernel / 2);
    ((cin * cout * kernel * kernel * ho * wo) as u64, ho, wo)
}

/// Per-image multiply-adds of `spec` at its input resolution. Depends on the
/// architecture only, never on parameter values.
pub fn estimate_flops(spec: &ModelSpec) -> Result<FlopBreakdown> {
    spec.validate()?;
    let (mut h, mut w) = spec.input_resolution;
    let mut f = FlopBreakdown::default();
    let (stem, ..) = conv_macs(3, spec.stage_widths[0], 3, 1, h, w);
    f.stem = stem;
    for b in spec.blocks() {
        let (c1, ..) = conv_macs(b.in_channels, b.bottleneck_channels, 1, 1, h, w);
        let (c2, ho, wo) = conv_macs(b.bottleneck_channels, b.bottleneck_channels, 3, b.stride, h, w);
        let (c3, ..) = conv_macs(b.bottleneck_channels, b.out_channels, 1, 1, ho, wo);
        f.block_convs += c1 + c2 + c3;
        if b.needs_projection() {
            f.shortcuts += conv_macs(b.in_channels, b.out_channels, 1, b.stride, h, w).0;
        }
        let a = attention_macs(&b.attention, b.out_channels, ho, wo);
        f.attention.pool += a.pool;
        f.attention.transform += a.transform;
        f.attention.scale_shift += a.scale_shift;
        f.attention.connection += a.connection;
        f.attention.gate += a.gate;
        f.attention_per_block.push(a.total());
        (h, w) = (ho, wo);
    }
    let c = spec.final_channels();
    f.final_pool = (c * h * w) as u64;
    f.head = (c * spec.num_classes) as u64;
    Ok(f)
}

/// Timing protocol for [`bench_fps`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpsProtocol {
    pub batch_size: usize,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for FpsProtocol {
    fn default() -> Self {
        Self {
            batch_size: 128,
            warmup: 20,
            reps: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsStats {
    pub batch_size: usize,
    pub warmup: usize,
    pub reps: usize,
    pub threads: usize,
    /// `reps · batch_size / total timed seconds`.
    pub fps: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn stats(p: &FpsProtocol, seconds: &[f64]) -> FpsStats {
    let mut per_rep: Vec<f64> = seconds.iter().map(|s| p.batch_size as f64 / s).collect();
    per_rep.sort_by(f64::total_cmp);
    FpsStats {
        batch_size: p.batch_size,
        warmup: p.warmup,
        reps: p.reps,
        threads: COMPUTE_THREADS,
        fps: (p.reps * p.batch_size) as f64 / seconds.iter().sum::<f64>(),
        min: per_rep[0],
        median: median(&per_rep),
        max: per_rep[per_rep.len() - 1],
    }
}

fn bench_input(spec: &ModelSpec, p: &FpsProtocol) -> Tensor<f32> {
    let (h, w) = spec.input_resolution;
    Tensor::randn([p.batch_size, 3, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(p.seed))
}

fn timed_forward(model: &mut Model, x: &Tensor<f32>) -> Result<f64> {
    let b = model.bind(false);
    let x = Var::constant(x.clone());
    let start = Instant::now();
    let out = model.forward(&b, &x, Mode::Eval)?;
    let secs = start.elapsed().as_secs_f64();
    drop(out);
    Ok(secs)
}

fn check_protocol(p: &FpsProtocol) -> Result<()> {
    if p.batch_size == 0 || p.reps == 0 {
        return Err(Error::config("benchmark needs batch size and repetitions of at least 1"));
    }
    Ok(())
}

/// Eval-mode images per second on random inputs.
pub fn bench_fps(model: &mut Model, p: &FpsProtocol) -> Result<FpsStats> {
    Ok(compare_fps(std::slice::from_mut(model), p)?.remove(0))
}

/// Benchmarks several models with interleaved repetitions, so slow drift of
/// the machine affects all of them alike. The order within each round
/// rotates to avoid a fixed position bias.
pub fn compare_fps(models: &mut [Model], p: &FpsProtocol) -> Result<Vec<FpsStats>> {
    check_protocol(p)?;
    let inputs: Vec<_> = models.iter().map(|m| bench_input(m.spec(), p)).collect();
    for _ in 0..p.warmup {
        for (m, x) in models.iter_mut().zip(&inputs) {
            timed_forward(m, x)?;
        }
    }
    let n = models.len();
    let mut seconds = vec![Vec::with_capacity(p.reps); n];
    for rep in 0..p.reps {
        for j in 0..n {
            let i = (j + rep) % n;
            seconds[i].push(timed_forward(&mut models[i], &inputs[i])?);
        }
    }
    Ok(seconds.iter().map(|s| stats(p, s)).collect())
}

/// One line of `count`, `flops` and `bench` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub model: String,
    pub num_classes: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub attention: String,
    pub attention_config: String,
    pub depth_k: usize,
    pub bn_mode: String,
    pub connection: String,
    pub reduction: usize,
    pub total_params: u64,
    pub backbone_params: u64,
    pub attention_params: u64,
    pub params_millions: f64,
    pub flops_per_image: u64,
    pub attention_flops_per_image: u64,
    pub cost_unit: String,
    pub fps: Option<f64>,
    pub fps_min: Option<f64>,
    pub fps_median: Option<f64>,
    pub fps_max: Option<f64>,
    pub fps_batch_size: Option<usize>,
    pub fps_warmup: Option<usize>,
    pub fps_reps: Option<usize>,
    pub threads: Option<usize>,
}

impl AnalysisReport {
    pub fn new(spec: &ModelSpec, params: ParamBreakdown, flops: &FlopBreakdown) -> Self {
        let att = &spec.attention;
        Self {
            model: spec.id(),
            num_classes: spec.num_classes,
            input_height: spec.input_resolution.0,
            input_width: spec.input_resolution.1,
            attention: att.kind.to_string(),
            attention_config: att.label(),
            depth_k: att.depth,
            bn_mode: att.bn_mode.to_string(),
            connection: att.effective_connection().to_string(),
            reduction: att.reduction,
            total_params: params.total,
            backbone_params: params.backbone,
            attention_params: params.attention,
            params_millions: params_millions(params.total),
            flops_per_image: flops.total(),
            attention_flops_per_image: flops.attention.total(),
            cost_unit: COST_UNIT.into(),
            fps: None,
            fps_min: None,
            fps_median: None,
            fps_max: None,
            fps_batch_size: None,
            fps_warmup: None,
            fps_reps: None,
            threads: None,
        }
    }

    /// Builds the model and fills in parameters and multiply-adds.
    pub fn for_spec(spec: &ModelSpec) -> Result<Self> {
        let model: Model = build_model(spec, 0)?;
        Ok(Self::new(spec, count_params(&model), &estimate_flops(spec)?))
    }

    pub fn with_fps(mut self, s: &FpsStats) -> Self {
        self.fps = Some(s.fps);
        self.fps_min = Some(s.min);
        self.fps_median = Some(s.median);
        self.fps_max = Some(s.max);
        self.fps_batch_size = Some(s.batch_size);
        self.fps_warmup = Some(s.warmup);
        self.fps_reps = Some(s.reps);
        self.threads = Some(s.threads);
        self
    }
}

/// Serializes rows as one JSON object per line.
pub fn to_jsonl<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_csv<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationAxis {
    Depth,
    BnMode,
    Connection,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [AblationAxis::Depth, AblationAxis::BnMode, AblationAxis::Connection];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Depth => "depth",
            AblationAxis::BnMode => "bn_mode",
            AblationAxis::Connection => "connection",
        }
    }

    /// Every value the axis accepts.
    pub fn default_values(self) -> Vec<String> {
        match self {
            AblationAxis::Depth => (1..=4).map(|k| k.to_string()).collect(),
            AblationAxis::BnMode => BnMode::ALL.iter().map(|m| m.to_string()).collect(),
            AblationAxis::Connection => Connection::ALL.iter().map(|c| c.to_string()).collect(),
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &AttentionConfig, value: &str) -> Result<AttentionConfig> {
        let mut cfg = base.clone();
        match self {
            AblationAxis::Depth => {
                cfg.depth = value
                    .parse()
                    .map_err(|_| Error::config(format!("depth value '{value}' is not an integer")))?;
            }
            AblationAxis::BnMode => cfg.bn_mode = value.parse()?,
            AblationAxis::Connection => cfg.connection = Some(value.parse()?),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis '{s}' (expected depth, bn_mode or connection)")))
    }
}

/// Optional extras of a sweep. Parameter counts and multiply-adds are
/// always produced.
#[derive(Default)]
pub struct AblationBudget<'a> {
    pub fps: Option<FpsProtocol>,
    /// Short training run per value: data, its normalization and the config.
    pub train: Option<(&'a [Example], &'a DatasetMeta, TrainConfig)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub model: String,
    pub attention_config: String,
    pub total_params: u64,
    pub attention_params: u64,
    /// Per-module formula summed over blocks.
    pub closed_form_attention_params: u64,
    /// Parameter difference to the sweep's first value.
    pub delta_params: i64,
    pub flops_per_image: u64,
    pub attention_flops_per_image: u64,
    pub forward_backward_ok: bool,
    pub fps_median: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
}

/// One forward and backward pass in train mode on a random batch of two.
pub fn smoke_step(model: &mut Model, seed: u64) -> Result<()> {
    let (h, w) = model.spec().input_resolution;
    let x = Tensor::randn([2, 3, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let b = model.bind(true);
    let logits = model.forward(&b, &Var::constant(x), Mode::Train)?;
    let classes = model.spec().num_classes;
    let loss = ops::cross_entropy(&logits, &[0, 1 % classes])?;
    let grads = crate::backward(&loss)?;
    for id in (0..model.params().len()).map(crate::nn::ParamId) {
        let g = grads
            .get(b.get(id))
            .ok_or_else(|| Error::Contract(format!("no gradient for '{}'", model.params().get(id).name)))?;
        if !g.all_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
    }
    Ok(())
}

/// Builds one model per value of `axis` on top of `base`.
pub fn ablation_sweep(
    axis: AblationAxis,
    base: &ModelSpec,
    values: &[String],
    budget: &AblationBudget<'_>,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::config("ablation sweep needs at least one value"));
    }
    let mut rows: Vec<AblationRow> = Vec::with_capacity(values.len());
    for value in values {
        let spec = base.with_attention(axis.apply(&base.attention, value)?);
        let mut model: Model = build_model(&spec, 0)?;
        let params = count_params(&model);
        let flops = estimate_flops(&spec)?;
        smoke_step(&mut model, 0)?;
        let fps_median = match &budget.fps {
            Some(p) => Some(bench_fps(&mut model, p)?.median),
            None => None,
        };
        let (final_loss, final_accuracy) = match &budget.train {
            Some((data, meta, cfg)) => {
                let hist = fit(&mut model, data, None, meta, cfg, None, |_| {})?;
                let last = hist.records.last().expect("at least one epoch");
                (Some(last.loss), Some(last.accuracy))
            }
            None => (None, None),
        };
        let first_total = rows.first().map_or(params.total, |r| r.total_params);
        rows.push(AblationRow {
            axis: axis.to_string(),
            value: value.clone(),
            model: spec.id(),
            attention_config: spec.attention.label(),
            total_params: params.total,
            attention_params: params.attention,
            closed_form_attention_params: closed_form_attention_params(&spec),
            delta_params: params.total as i64 - first_total as i64,
            flops_per_image: flops.total(),
            attention_flops_per_image: flops.attention.total(),
            forward_backward_ok: true,
            fps_median,
            final_loss,
            final_accuracy,
        });
    }
    Ok(rows)
}
