//! Run configuration: flags, flat `key=value` files and defaults.
//!
//! Every option is a key in [`KEYS`]. The same name works as a `--flag`
//! and as a config-file key, and a flag beats the file, which beats the
//! default.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches};
use ras_core::analysis::{AblationAxis, FpsProtocol};
use ras_core::attention::EcaKernel;
use ras_core::data::{DatasetKind, CIFAR_SIDE};
use ras_core::training::TrainConfig;
use ras_core::{AttentionConfig, AttentionKind, BnMode, Connection, ModelSpec};

/// Environment variable consulted for the default `data-dir`.
pub const DATA_DIR_ENV: &str = "RASNN_DATA_DIR";

/// File the resolved configuration is echoed to inside `--out`.
pub const CONFIG_ECHO_FILE: &str = "config.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Count,
    Flops,
    Bench,
    Ablate,
    Selftest,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Train,
        Command::Eval,
        Command::Count,
        Command::Flops,
        Command::Bench,
        Command::Ablate,
        Command::Selftest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Count => "count",
            Command::Flops => "flops",
            Command::Bench => "bench",
            Command::Ablate => "ablate",
            Command::Selftest => "selftest",
        }
    }

    fn about(self) -> &'static str {
        match self {
            Command::Train => "Train a model and write history and a checkpoint",
            Command::Eval => "Evaluate a checkpoint on the test split",
            Command::Count => "Report parameter counts",
            Command::Flops => "Report per-image multiply-adds",
            Command::Bench => "Measure inference throughput",
            Command::Ablate => "Sweep one attention axis",
            Command::Selftest => "Run gradient checks, identities and parameter laws",
        }
    }
}

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    /// Boolean switch: `--name` alone means `true`.
    pub switch: bool,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        switch: false,
    }
}

const fn switch(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        switch: true,
    }
}

/// Every configuration key with its default.
pub const KEYS: &[Key] = &[
    key("model", "resnet164", "resnet83, resnet164 or micro"),
    key("n", "2", "micro only: bottleneck blocks per stage"),
    key("widths", "8,16,32", "micro only: stage widths"),
    key("resolution", "32", "input side length; must be 32 for CIFAR"),
    key("attention", "ras", "none, se, se_deep, se_shared, eca or ras"),
    key("depth-k", "2", "implicit depth of recurrent attention"),
    key("bn-mode", "non_shared", "shared or non_shared"),
    key("connection", "default", "bn, relu, tanh, sigmoid, identity; default is bn for ras, identity otherwise"),
    key("reduction", "16", "SE reduction ratio"),
    key("eca-kernel", "adaptive", "ECA kernel size: adaptive or an odd integer"),
    key("dataset", "cifar10", "cifar10, cifar100 or synth"),
    key("data-dir", "$RASNN_DATA_DIR, else ./data", "directory holding the CIFAR archives"),
    key("synth-classes", "2", "classes of the synthetic dataset"),
    key("synth-train", "512", "synthetic training examples"),
    key("synth-test", "128", "synthetic test examples"),
    key("epochs", "164", "training epochs"),
    key("batch-size", "128", "training batch size"),
    key("lr", "0.1", "initial learning rate"),
    key("momentum", "0.9", "SGD momentum"),
    key("weight-decay", "0.0001", "L2 weight decay"),
    key("milestones", "81,122", "epochs at which the rate drops; empty for none"),
    key("drop-factor", "0.1", "learning rate multiplier at each milestone"),
    switch("decay-all", "false", "also decay batch-norm and attention gamma/beta"),
    switch("augment", "true", "random crop and flip during training"),
    key("seed", "0", "seed for initialization, shuffling and synthetic data"),
    key("checkpoint", "", "eval: checkpoint to load"),
    key("fps-batch", "128", "bench: images per timed forward"),
    key("fps-warmup", "20", "bench: untimed warmup batches"),
    key("fps-reps", "100", "bench: timed batches"),
    key("fps-runs", "1", "bench: independent repetitions"),
    key("axis", "depth", "ablate: depth, bn_mode or connection"),
    key("values", "", "ablate: comma-separated values; empty for the whole axis"),
    key("ablate-epochs", "0", "ablate: training epochs per variant; 0 runs one smoke step"),
    switch("csv", "false", "also write reports as CSV"),
    key("grad-seeds", "20", "selftest: random seeds for gradient checks"),
    key("out", "", "directory for reports, history and checkpoints"),
];

/// Keys left out of the echoed configuration so a re-run from the echo
/// writes somewhere new.
const NOT_ECHOED: &[&str] = &["out"];

#[derive(Debug)]
pub enum ParseError {
    /// Help, version or a malformed command line; clap knows the exit code.
    Clap(clap::Error),
    /// Bad key, value or combination. Exit code 2.
    Usage(String),
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseError::Clap(e) => write!(f, "{e}"),
            ParseError::Usage(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for ParseError {}

fn usage(msg: impl Into<String>) -> ParseError {
    ParseError::Usage(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub model: ModelSpec,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub fps: FpsProtocol,
    pub fps_runs: usize,
    pub ablate: AblateConfig,
    pub csv: bool,
    pub grad_seeds: u64,
    pub out: Option<PathBuf>,
    /// Final value of every key, in [`KEYS`] order.
    pub resolved: Vec<(&'static str, String)>,
}

impl RunConfig {
    /// The resolved configuration as a config file. Feeding it back through
    /// `--config` reproduces this run.
    pub fn echo(&self) -> String {
        let mut s = format!("# rasnet {}\n", self.command.as_str());
        for (k, v) in &self.resolved {
            if !NOT_ECHOED.contains(k) {
                s.push_str(&format!("{k}={v}\n"));
            }
        }
        s
    }
}

pub fn cli() -> clap::Command {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("flat key=value file; flags take precedence")];
    for k in KEYS {
        let mut arg = Arg::new(k.name)
            .long(k.name)
            .help(format!("{} [default: {}]", k.help, k.default))
            .action(ArgAction::Set);
        if k.switch {
            arg = arg.num_args(0..=1).default_missing_value("true").value_name("BOOL");
        }
        args.push(arg);
    }
    clap::Command::new("rasnet")
        .about("Recurrent attention for residual networks: training, analysis and checks")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(
            Command::ALL
                .iter()
                .map(|c| clap::Command::new(c.as_str()).about(c.about()).args(args.clone())),
        )
}

/// Parses `key=value` lines. Blank lines and `#` comments are ignored and
/// `_` in keys is read as `-`.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, ParseError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value, got '{line}'", i + 1)))?;
        let k = k.trim().replace('_', "-");
        if !KEYS.iter().any(|key| key.name == k) {
            return Err(usage(format!("config line {}: unknown key '{k}'", i + 1)));
        }
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(usage(format!("config line {}: key '{k}' given twice", i + 1)));
        }
    }
    Ok(out)
}

fn default_value(k: &Key) -> String {
    if k.name == "data-dir" {
        return std::env::var(DATA_DIR_ENV).unwrap_or_else(|_| "data".to_string());
    }
    k.default.to_string()
}

/// Parses `argv` (program name first) into a [`RunConfig`].
pub fn parse_config<I, S>(argv: I) -> Result<RunConfig, ParseError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = cli().try_get_matches_from(argv).map_err(ParseError::Clap)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let command = Command::ALL
        .into_iter()
        .find(|c| c.as_str() == name)
        .expect("every subcommand is listed");

    let file = match sub.get_one::<String>("config") {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| usage(format!("cannot read config file {path}: {e}")))?;
            parse_config_file(&text)?
        }
        None => BTreeMap::new(),
    };
    resolve(command, sub, &file)
}

fn from_cli<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a String> {
    match m.value_source(name) {
        Some(ValueSource::CommandLine) => m.get_one::<String>(name),
        _ => None,
    }
}

struct Values {
    map: BTreeMap<&'static str, String>,
    explicit: Vec<&'static str>,
}

impl Values {
    fn raw(&self, k: &str) -> &str {
        &self.map[k]
    }

    /// Set by flag or file to something other than the default. Echoed
    /// configs list every key, so a restated default is no conflict.
    fn is_overridden(&self, k: &str) -> bool {
        let default = KEYS.iter().find(|key| key.name == k).map(default_value);
        self.explicit.contains(&k) && default.as_deref() != Some(self.raw(k))
    }

    fn get<T: FromStr>(&self, k: &str) -> Result<T, ParseError>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(k);
        v.parse()
            .map_err(|e| usage(format!("invalid value '{v}' for '{k}': {e}")))
    }

    fn list(&self, k: &str) -> Result<Vec<usize>, ParseError> {
        let v = self.raw(k);
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| usage(format!("invalid value '{v}' for '{k}': expected comma-separated integers")))
            })
            .collect()
    }

    fn path(&self, k: &str) -> Option<PathBuf> {
        let v = self.raw(k);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }
}

fn resolve(command: Command, m: &ArgMatches, file: &BTreeMap<String, String>) -> Result<RunConfig, ParseError> {
    let mut values = Values {
        map: BTreeMap::new(),
        explicit: Vec::new(),
    };
    for k in KEYS {
        let v = if let Some(v) = from_cli(m, k.name) {
            values.explicit.push(k.name);
            v.clone()
        } else if let Some(v) = file.get(k.name) {
            values.explicit.push(k.name);
            v.clone()
        } else {
            default_value(k)
        };
        if k.switch && v != "true" && v != "false" {
            return Err(usage(format!("invalid value '{v}' for '{}': expected true or false", k.name)));
        }
        values.map.insert(k.name, v);
    }
    let v = &values;

    let dataset: DatasetKind = v.get("dataset")?;
    let synth = SynthConfig {
        classes: v.get("synth-classes")?,
        train: v.get("synth-train")?,
        test: v.get("synth-test")?,
    };
    let num_classes = match dataset.cifar() {
        Some(variant) => variant.num_classes(),
        None => synth.classes,
    };
    let resolution: usize = v.get("resolution")?;
    if dataset != DatasetKind::Synth && resolution != CIFAR_SIDE {
        return Err(usage(format!(
            "conflicting options: resolution {resolution} with dataset {}, whose images are {CIFAR_SIDE}x{CIFAR_SIDE}",
            dataset.as_str()
        )));
    }

    let kind: AttentionKind = v.get("attention")?;
    let connection = match v.raw("connection") {
        "default" => None,
        other => Some(other.parse::<Connection>().map_err(|e| usage(e.to_string()))?),
    };
    let attention = AttentionConfig {
        kind,
        depth: v.get("depth-k")?,
        bn_mode: v.get::<BnMode>("bn-mode")?,
        connection,
        reduction: v.get("reduction")?,
        eca_kernel: v.get::<EcaKernel>("eca-kernel")?,
        ..AttentionConfig::default()
    };
    attention.validate().map_err(|e| usage(e.to_string()))?;
    if !kind.is_recurrent() && command != Command::Ablate {
        if let Some(k) = ["depth-k", "bn-mode", "connection"].into_iter().find(|k| v.is_overridden(k)) {
            return Err(usage(format!(
                "conflicting options: '{k}' has no effect with attention {}",
                kind.as_str()
            )));
        }
    }

    let model_name = v.raw("model");
    let mut model = match model_name {
        "resnet164" => ModelSpec::resnet164(num_classes, attention),
        "resnet83" => ModelSpec::resnet83(num_classes, attention),
        "micro" => {
            let widths = v.list("widths")?;
            let widths: [usize; 3] = widths
                .try_into()
                .map_err(|_| usage("'widths' needs exactly three comma-separated values"))?;
            let mut spec = ModelSpec::resnet(v.get("n")?, num_classes, attention);
            spec.stage_widths = widths;
            spec
        }
        other => {
            return Err(usage(format!(
                "invalid value '{other}' for 'model': expected resnet83, resnet164 or micro"
            )))
        }
    };
    if model_name != "micro" {
        if let Some(k) = ["n", "widths"].into_iter().find(|k| v.is_overridden(k)) {
            return Err(usage(format!("conflicting options: '{k}' only applies to --model micro")));
        }
    }
    model.input_resolution = (resolution, resolution);
    model.validate().map_err(|e| usage(e.to_string()))?;

    let seed: u64 = v.get("seed")?;
    let train = TrainConfig {
        epochs: v.get("epochs")?,
        batch_size: v.get("batch-size")?,
        lr: v.get("lr")?,
        momentum: v.get("momentum")?,
        weight_decay: v.get("weight-decay")?,
        milestones: v.list("milestones")?,
        drop_factor: v.get("drop-factor")?,
        seed,
        decay_all: v.get("decay-all")?,
        augment: v.get("augment")?,
    };
    train.validate().map_err(|e| usage(e.to_string()))?;

    let checkpoint = v.path("checkpoint");
    if command == Command::Eval && checkpoint.is_none() {
        return Err(usage("eval needs --checkpoint"));
    }

    let axis: AblationAxis = v.get("axis")?;
    let values_raw = v.raw("values");
    let ablate_values: Vec<String> = if values_raw.trim().is_empty() {
        axis.default_values()
    } else {
        values_raw.split(',').map(|s| s.trim().to_string()).collect()
    };
    for value in &ablate_values {
        axis.apply(&model.attention, value).map_err(|e| usage(e.to_string()))?;
    }

    let fps = FpsProtocol {
        batch_size: v.get("fps-batch")?,
        warmup: v.get("fps-warmup")?,
        reps: v.get("fps-reps")?,
        seed,
    };
    if fps.batch_size == 0 || fps.reps == 0 {
        return Err(usage("fps-batch and fps-reps must be positive"));
    }

    Ok(RunConfig {
        command,
        model,
        dataset,
        data_dir: PathBuf::from(v.raw("data-dir")),
        synth,
        train,
        seed,
        checkpoint,
        fps,
        fps_runs: v.get("fps-runs")?,
        ablate: AblateConfig {
            axis,
            values: ablate_values,
            epochs: v.get("ablate-epochs")?,
        },
        csv: v.get("csv")?,
        grad_seeds: v.get("grad-seeds")?,
        out: v.path("out"),
        resolved: KEYS.iter().map(|k| (k.name, values.map[k.name].clone())).collect(),
    })
}
