//! Subcommand implementations. Reports go to stdout as one JSON object per
//! line and, with `--out`, into files next to the echoed configuration.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use ras_core::analysis::{
    ablation_sweep, bench_fps, count_params, estimate_flops, params_millions, to_jsonl, write_csv, AblationBudget,
    AnalysisReport, COST_UNIT,
};
use ras_core::data::{load_cifar, synth_dataset, DatasetMeta, Example, Split};
use ras_core::training::{evaluate, fit, EpochRecord, TrainConfig};
use ras_core::{build_model, checkpoint, selftest, Model};
use serde::Serialize;

use crate::config::{Command, RunConfig, CONFIG_ECHO_FILE};

/// Offset between the seeds of the synthetic train and test sets.
const SYNTH_TEST_SEED_OFFSET: u64 = 1_000_003;

/// Runs the configured subcommand. `Ok(false)` means the command ran but
/// reported a failure (selftest).
pub fn run(cfg: &RunConfig) -> Result<bool> {
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(CONFIG_ECHO_FILE), cfg.echo())?;
    }
    match cfg.command {
        Command::Count => count(cfg).map(|_| true),
        Command::Flops => flops(cfg).map(|_| true),
        Command::Bench => bench(cfg).map(|_| true),
        Command::Ablate => ablate(cfg).map(|_| true),
        Command::Train => train(cfg).map(|_| true),
        Command::Eval => eval(cfg).map(|_| true),
        Command::Selftest => Ok(selftest_cmd(cfg)),
    }
}

/// Prints `rows` and writes `{name}.jsonl` (and `{name}.csv` with `--csv`)
/// under `--out`.
fn emit<R: Serialize>(cfg: &RunConfig, name: &str, rows: &[R]) -> Result<()> {
    let text = to_jsonl(rows)?;
    print!("{text}");
    std::io::stdout().flush()?;
    if let Some(dir) = &cfg.out {
        fs::write(dir.join(format!("{name}.jsonl")), &text)?;
        if cfg.csv {
            write_csv(dir.join(format!("{name}.csv")), rows)?;
        }
    }
    Ok(())
}

fn count(cfg: &RunConfig) -> Result<()> {
    let model: Model = build_model(&cfg.model, cfg.seed)?;
    let params = count_params(&model);
    let report = AnalysisReport::new(&cfg.model, params, &estimate_flops(&cfg.model)?);
    emit(cfg, "count", &[report])
}

#[derive(Serialize)]
struct FlopsRow {
    model: String,
    attention_config: String,
    cost_unit: &'static str,
    total: u64,
    stem: u64,
    block_convs: u64,
    shortcuts: u64,
    final_pool: u64,
    head: u64,
    attention_total: u64,
    attention_pool: u64,
    attention_transform: u64,
    attention_scale_shift: u64,
    attention_connection: u64,
    attention_gate: u64,
}

fn flops(cfg: &RunConfig) -> Result<()> {
    let f = estimate_flops(&cfg.model)?;
    let a = f.attention;
    let row = FlopsRow {
        model: cfg.model.id(),
        attention_config: cfg.model.attention.label(),
        cost_unit: COST_UNIT,
        total: f.total(),
        stem: f.stem,
        block_convs: f.block_convs,
        shortcuts: f.shortcuts,
        final_pool: f.final_pool,
        head: f.head,
        attention_total: a.total(),
        attention_pool: a.pool,
        attention_transform: a.transform,
        attention_scale_shift: a.scale_shift,
        attention_connection: a.connection,
        attention_gate: a.gate,
    };
    emit(cfg, "flops", &[row])
}

fn bench(cfg: &RunConfig) -> Result<()> {
    let mut rows = Vec::with_capacity(cfg.fps_runs);
    for _ in 0..cfg.fps_runs {
        // A fresh model per run keeps runs independent.
        let mut model: Model = build_model(&cfg.model, cfg.seed)?;
        let stats = bench_fps(&mut model, &cfg.fps)?;
        let report = AnalysisReport::new(&cfg.model, count_params(&model), &estimate_flops(&cfg.model)?);
        rows.push(report.with_fps(&stats));
    }
    emit(cfg, "bench", &rows)
}

struct Data {
    train: Vec<Example>,
    test: Vec<Example>,
    meta: DatasetMeta,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let (train, test, layout) = match cfg.dataset.cifar() {
        Some(variant) => {
            let train = load_cifar(&cfg.data_dir, variant, Split::Train)
                .with_context(|| format!("loading {} from {}", variant.as_str(), cfg.data_dir.display()))?;
            let test = load_cifar(&cfg.data_dir, variant, Split::Test)?;
            (train, test, format!("cifar-binary-{}", variant.record_size()))
        }
        None => {
            let s = &cfg.synth;
            let res = cfg.model.input_resolution.0;
            let train = synth_dataset(s.classes, s.train, res, cfg.seed)?;
            let test = synth_dataset(s.classes, s.test, res, cfg.seed + SYNTH_TEST_SEED_OFFSET)?;
            (train, test, "synth".to_string())
        }
    };
    let meta = DatasetMeta::from_train(cfg.dataset.as_str(), cfg.model.num_classes, &layout, &train)?;
    Ok(Data { train, test, meta })
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let data = if cfg.ablate.epochs > 0 { Some(load_data(cfg)?) } else { None };
    let train_cfg = TrainConfig {
        epochs: cfg.ablate.epochs,
        ..cfg.train.clone()
    };
    let budget = AblationBudget {
        fps: None,
        train: data.as_ref().map(|d| (d.train.as_slice(), &d.meta, train_cfg)),
    };
    let rows = ablation_sweep(cfg.ablate.axis, &cfg.model, &cfg.ablate.values, &budget)?;
    emit(cfg, "ablate", &rows)
}

#[derive(Serialize)]
struct TrainSummary {
    model: String,
    attention_config: String,
    dataset: &'static str,
    total_params: u64,
    params_millions: f64,
    epochs: usize,
    final_loss: f64,
    train_accuracy: f64,
    test_accuracy: f64,
}

fn train(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let mut model: Model = build_model(&cfg.model, cfg.seed)?;
    let print_epoch = |r: &EpochRecord| {
        if let Ok(line) = serde_json::to_string(r) {
            eprintln!("{line}");
        }
    };
    let history = fit(
        &mut model,
        &data.train,
        Some(&data.test),
        &data.meta,
        &cfg.train,
        cfg.out.as_deref(),
        print_epoch,
    )?;
    let last = history.records.last();
    let total = count_params(&model).total;
    let test_accuracy = match last.and_then(|r| r.eval_accuracy) {
        Some(a) => a,
        None => evaluate(&mut model, &data.test, &data.meta, cfg.train.batch_size)?,
    };
    let summary = TrainSummary {
        model: cfg.model.id(),
        attention_config: cfg.model.attention.label(),
        dataset: cfg.dataset.as_str(),
        total_params: total,
        params_millions: params_millions(total),
        epochs: history.records.len(),
        final_loss: last.map_or(f64::NAN, |r| r.loss),
        train_accuracy: last.map_or(f64::NAN, |r| r.accuracy),
        test_accuracy,
    };
    emit(cfg, "train_summary", &[summary])
}

#[derive(Serialize)]
struct EvalRow {
    model: String,
    attention_config: String,
    dataset: &'static str,
    checkpoint: String,
    examples: usize,
    accuracy: f64,
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let path = cfg.checkpoint.as_deref().expect("validated during parsing");
    let data = load_data(cfg)?;
    let mut model: Model = build_model(&cfg.model, cfg.seed)?;
    load_checkpoint(&mut model, path)?;
    let accuracy = evaluate(&mut model, &data.test, &data.meta, cfg.train.batch_size)?;
    let row = EvalRow {
        model: cfg.model.id(),
        attention_config: cfg.model.attention.label(),
        dataset: cfg.dataset.as_str(),
        checkpoint: path.display().to_string(),
        examples: data.test.len(),
        accuracy,
    };
    emit(cfg, "eval", &[row])
}

fn load_checkpoint(model: &mut Model, path: &Path) -> Result<()> {
    let tensors = checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    model
        .load_state(tensors)
        .with_context(|| format!("checkpoint {} does not match the configured model", path.display()))
}

fn selftest_cmd(cfg: &RunConfig) -> bool {
    let report = selftest::run(cfg.grad_seeds);
    let summary = report.summary();
    print!("{summary}");
    if let Some(dir) = &cfg.out {
        if let Err(e) = fs::write(dir.join("selftest.txt"), &summary) {
            eprintln!("error: writing selftest summary: {e}");
            return false;
        }
    }
    report.passed()
}
