//! Run configuration: a TOML file with `dataset`, `model`, `algorithm` and
//! `output` tables, plus command-line overrides of individual keys.

use std::fmt;
use std::path::{Path, PathBuf};

use fedaf::condensation::CondenseConfig;
use fedaf::federation::LocalTrainConfig;
use fedaf::partition::PartitionSpec;
use fedaf::server::ServerTrainConfig;
use fedaf::{Algorithm, ArchKind, FederationConfig, ModelArchitecture};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// A configuration problem detected before any compute starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError(pub String);

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for SchemaError {}

fn schema<T>(msg: impl Into<String>) -> Result<T, SchemaError> {
    Err(SchemaError(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub algorithm: AlgorithmConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synth,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: Source,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxConfig>,
    #[serde(default)]
    pub partition: PartitionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub image_side: usize,
    pub noise_sigma: f32,
    /// Defaults to `algorithm.seed`.
    pub seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { classes: 3, per_class: 300, test_per_class: 300, image_side: 8, noise_sigma: 0.5, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub alpha: f64,
    pub clients: usize,
    /// Defaults to `algorithm.seed`.
    pub seed: Option<u64>,
    pub min_samples: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { alpha: 0.05, clients: 4, seed: None, min_samples: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Convnet,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Channels per conv block.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Hidden layer widths of the MLP.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_width() -> usize {
    64
}

fn default_hidden() -> Vec<usize> {
    vec![128]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub name: Algorithm,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_ipc")]
    pub ipc: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub disable_cdc: bool,
    #[serde(default)]
    pub disable_lgkm: bool,
    #[serde(default = "default_true")]
    pub parallel_clients: bool,
    #[serde(default)]
    pub condense: CondenseConfig,
    #[serde(default)]
    pub server: ServerTrainConfig,
    #[serde(default)]
    pub local: LocalTrainConfig,
}

fn default_rounds() -> usize {
    20
}

fn default_ipc() -> usize {
    50
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Relative paths are resolved against `$FEDAF_OUTPUT_ROOT` when it is set.
    pub dir: PathBuf,
    #[serde(default)]
    pub export_condensed: bool,
}

/// Environment variable naming the directory relative output paths live under.
pub const OUTPUT_ROOT_VAR: &str = "FEDAF_OUTPUT_ROOT";

impl RunConfig {
    /// A config with every optional key filled in; used to enumerate valid keys.
    fn template() -> Self {
        RunConfig {
            dataset: DatasetConfig {
                source: Source::Synth,
                synth: SynthConfig { seed: Some(0), ..SynthConfig::default() },
                idx: Some(IdxConfig {
                    train_images: "a".into(),
                    train_labels: "a".into(),
                    test_images: "a".into(),
                    test_labels: "a".into(),
                }),
                partition: PartitionConfig { seed: Some(0), ..PartitionConfig::default() },
            },
            model: ModelConfig { arch: Arch::Convnet, width: default_width(), hidden: default_hidden() },
            algorithm: AlgorithmConfig {
                name: Algorithm::FedAf,
                rounds: default_rounds(),
                ipc: default_ipc(),
                seed: 0,
                disable_cdc: false,
                disable_lgkm: false,
                parallel_clients: true,
                condense: CondenseConfig::default(),
                server: ServerTrainConfig::default(),
                local: LocalTrainConfig::default(),
            },
            output: OutputConfig { dir: "a".into(), export_condensed: false },
        }
    }

    /// Every dotted key path the schema accepts.
    pub fn known_keys() -> Vec<String> {
        let value = Value::try_from(Self::template()).expect("template serializes");
        let mut out = Vec::new();
        collect_leaves(&value, String::new(), &mut out);
        out
    }

    /// Reads `path`, applies `overrides` and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SchemaError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, SchemaError> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| SchemaError(e.message().to_string()))?;
        for (key, value) in parse_overrides(overrides)? {
            set_path(&mut table, &key, value)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            let inner = inner.lines().next().unwrap_or_default().to_string();
            match missing_field(&inner) {
                Some(field) if path == "." => SchemaError(format!("missing required key `{field}`")),
                Some(field) => SchemaError(format!("missing required key `{path}.{field}`")),
                None => SchemaError(format!("at `{path}`: {inner}")),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let d = &self.dataset;
        match d.source {
            Source::Synth => {
                let s = &d.synth;
                if s.classes < 2 || s.per_class == 0 || s.test_per_class == 0 || s.image_side < 2 {
                    return schema("dataset.synth needs classes >= 2, per_class >= 1, test_per_class >= 1, image_side >= 2");
                }
                if s.noise_sigma < 0.0 || !s.noise_sigma.is_finite() {
                    return schema("dataset.synth.noise_sigma must be a non-negative number");
                }
            }
            Source::Idx if d.idx.is_none() => return schema("missing required key `dataset.idx` for source \"idx\""),
            Source::Idx => {}
        }
        self.partition_spec().validate().map_err(|e| SchemaError(format!("dataset.partition: {e}")))?;
        if self.model.arch == Arch::Convnet && self.model.width == 0 {
            return schema("model.width must be at least 1");
        }
        self.federation().validate().map_err(|e| SchemaError(format!("algorithm: {e}")))?;
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.dataset.synth.seed.unwrap_or(self.algorithm.seed)
    }

    pub fn partition_seed(&self) -> u64 {
        self.dataset.partition.seed.unwrap_or(self.algorithm.seed)
    }

    /// The config with seed defaults written out, as echoed into run summaries.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        if cfg.dataset.source == Source::Synth {
            cfg.dataset.synth.seed = Some(self.data_seed());
        }
        cfg.dataset.partition.seed = Some(self.partition_seed());
        cfg
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let p = &self.dataset.partition;
        PartitionSpec { alpha: p.alpha, clients: p.clients, seed: self.partition_seed(), min_samples: p.min_samples }
    }

    pub fn federation(&self) -> FederationConfig {
        let a = &self.algorithm;
        FederationConfig {
            algorithm: a.name,
            rounds: a.rounds,
            ipc: a.ipc,
            seed: a.seed,
            condense: a.condense.clone(),
            server: a.server.clone(),
            local: a.local.clone(),
            disable_cdc: a.disable_cdc,
            disable_lgkm: a.disable_lgkm,
            parallel_clients: a.parallel_clients,
        }
    }

    pub fn architecture(&self, input: (usize, usize, usize), classes: usize) -> ModelArchitecture {
        let kind = match self.model.arch {
            Arch::Convnet => ArchKind::Convnet { width: self.model.width },
            Arch::Mlp => ArchKind::Mlp { hidden: self.model.hidden.clone() },
        };
        ModelArchitecture { kind, input, classes }
    }

    /// `output.dir`, placed under `$FEDAF_OUTPUT_ROOT` when relative and the variable is set.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output.dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn missing_field(msg: &str) -> Option<&str> {
    let rest = msg.strip_prefix("missing field `")?;
    rest.split('`').next()
}

fn collect_leaves(value: &Value, prefix: String, out: &mut Vec<String>) {
    match value {
        Value::Table(t) => {
            for (k, v) in t {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_leaves(v, path, out);
            }
        }
        _ => out.push(prefix),
    }
}

/// Turns `--a.b=v`, `--a.b v` and bare `--key v` flags into `(dotted path, value)`
/// pairs. A bare key must name exactly one leaf of the schema.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>, SchemaError> {
    let known = RunConfig::known_keys();
    let mut out = Vec::new();
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return schema(format!("expected an override of the form --key=value, got `{arg}`"));
        };
        let (key, raw) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match iter.next() {
                Some(v) => (flag.to_string(), v.clone()),
                None => return schema(format!("override `--{flag}` has no value")),
            },
        };
        let path = resolve_key(&key, &known)?;
        out.push((path, parse_value(&raw)));
    }
    Ok(out)
}

fn resolve_key(key: &str, known: &[String]) -> Result<String, SchemaError> {
    if known.iter().any(|k| k == key) {
        return Ok(key.to_string());
    }
    if key.contains('.') {
        return schema(format!("unknown key `{key}`"));
    }
    let matches: Vec<&String> = known.iter().filter(|k| k.rsplit('.').next() == Some(key)).collect();
    match matches.as_slice() {
        [one] => Ok((*one).clone()),
        [] => schema(format!("unknown key `{key}`")),
        many => schema(format!(
            "key `{key}` is ambiguous; use one of {}",
            many.iter().map(|s| format!("`{s}`")).collect::<Vec<_>>().join(", ")
        )),
    }
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, path: &str, value: Value) -> Result<(), SchemaError> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return schema(format!("`{p}` in `{path}` is not a table")),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
