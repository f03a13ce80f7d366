//! Experiment configuration.
//!
//! The file format is one `key = value` pair per line. Keys are dotted paths
//! (`teacher.hidden_dim`). A value is read as a JSON scalar when it parses as
//! one (`0.95`, `true`, `"text"`, `null`) and as a bare string otherwise
//! (`mode = fedkd`). Blank lines and lines starting with `#` are ignored.
//! A file whose first non-blank character is `{` is read as JSON instead.
//!
//! Environment variables `FEDKD_<KEY>` override file values, with the key
//! upper-cased and dots replaced by underscores (`FEDKD_TEACHER_HIDDEN_DIM`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::compress::ThresholdSchedule;
use crate::data::SampleShape;
use crate::error::{Error, Result};
use crate::federation::{codec_by_name, Mode, ProtocolConfig};
use crate::nn::{ModelConfig, OptimizerKind};

pub const ENV_PREFIX: &str = "FEDKD_";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    #[default]
    Iid,
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_samples: usize,
    pub noise: f64,
    pub csv_path: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            num_samples: 2000,
            noise: 0.3,
            csv_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_clients: usize,
    pub total_rounds: usize,
    pub teacher: ArchConfig,
    pub student: ArchConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    pub teacher_lr: f64,
    pub student_lr: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub mode: Mode,
    pub codec: String,
    pub teacher_optimizer: OptimizerKind,
    pub batch_size: usize,
    pub local_steps: usize,
    pub participation: f64,
    pub data: DataConfig,
    pub eval_fraction: f64,
    /// Evaluate every this many rounds; the last round is always evaluated.
    pub eval_every: usize,
    pub partition: PartitionKind,
    pub dirichlet_alpha: f64,
    pub record_sigma: bool,
    /// Default output directory when none is given on the command line.
    pub output: Option<String>,
    /// Checkpoint to initialize the shared model from.
    pub init_student: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_clients: 4,
            total_rounds: 100,
            teacher: ArchConfig {
                num_layers: 4,
                hidden_dim: 32,
                num_heads: 4,
            },
            student: ArchConfig {
                num_layers: 2,
                hidden_dim: 32,
                num_heads: 4,
            },
            input_dim: 8,
            num_classes: 4,
            seq_len: 8,
            teacher_lr: 0.05,
            student_lr: 0.05,
            t_start: 0.95,
            t_end: 0.98,
            mode: Mode::Fedkd,
            codec: "identity".into(),
            teacher_optimizer: OptimizerKind::Sgd,
            batch_size: 16,
            local_steps: 1,
            participation: 1.0,
            data: DataConfig::default(),
            eval_fraction: 0.2,
            eval_every: 10,
            partition: PartitionKind::Iid,
            dirichlet_alpha: 1.0,
            record_sigma: false,
            output: None,
            init_student: None,
        }
    }
}

fn arch(a: &ArchConfig, c: &ExperimentConfig) -> ModelConfig {
    ModelConfig {
        num_layers: a.num_layers,
        hidden_dim: a.hidden_dim,
        num_heads: a.num_heads,
        input_dim: c.input_dim,
        num_classes: c.num_classes,
        seq_len: c.seq_len,
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn teacher_model(&self) -> ModelConfig {
        arch(&self.teacher, self)
    }

    pub fn student_model(&self) -> ModelConfig {
        arch(&self.student, self)
    }

    /// Architecture of the model every client shares.
    pub fn shared_model(&self) -> ModelConfig {
        match self.mode {
            Mode::FedavgFull => self.teacher_model(),
            _ => self.student_model(),
        }
    }

    pub fn sample_shape(&self) -> SampleShape {
        SampleShape {
            seq_len: self.seq_len,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        }
    }

    pub fn schedule(&self) -> Result<ThresholdSchedule> {
        ThresholdSchedule::new(self.t_start, self.t_end, self.total_rounds).map_err(config_err)
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            mode: self.mode,
            teacher_lr: self.teacher_lr,
            student_lr: self.student_lr,
            batch_size: self.batch_size,
            local_steps: self.local_steps,
            participation: self.participation,
            teacher_optimizer: self.teacher_optimizer,
            record_sigma: self.record_sigma,
            log_messages: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher_model().validate().map_err(config_err)?;
        self.student_model().validate().map_err(config_err)?;
        self.schedule()?;
        self.protocol().validate()?;
        codec_by_name(&self.codec, 0).map_err(config_err)?;
        if self.n_clients == 0 {
            return Err(Error::Config("n_clients must be >= 1".into()));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config(format!("eval_fraction {} outside (0, 1)", self.eval_fraction)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::Config(format!("dirichlet_alpha {}", self.dirichlet_alpha)));
        }
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.num_samples < self.num_classes {
                    return Err(Error::Config("data.num_samples smaller than num_classes".into()));
                }
                if !(self.data.noise >= 0.0) || !self.data.noise.is_finite() {
                    return Err(Error::Config(format!("data.noise {}", self.data.noise)));
                }
            }
            DataSource::Csv => {
                if self.data.csv_path.is_none() {
                    return Err(Error::Config("data.source = csv needs data.csv_path".into()));
                }
            }
        }
        Ok(())
    }

    /// Parses either the key-value grammar or JSON.
    pub fn parse(text: &str) -> Result<Self> {
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("json config: {e}")))?
        } else {
            parse_kv(text)?
        };
        from_value(value)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Key-value rendering; [`parse`](Self::parse) reads it back unchanged.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (key, v) in flatten(&serde_json::to_value(self).expect("config serializes")) {
            if !v.is_null() {
                out.push_str(&format!("{key} = {v}\n"));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every dotted key the config accepts.
    pub fn keys() -> Vec<String> {
        flatten(&serde_json::to_value(Self::default()).expect("config serializes"))
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    /// Applies `FEDKD_*` overrides from `vars`. Unknown `FEDKD_*` names are
    /// rejected.
    pub fn with_env_overrides(&self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let keys = Self::keys();
        let mut value = serde_json::to_value(self).expect("config serializes");
        let mut any = false;
        for (name, raw) in vars {
            let Some(suffix) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = keys
                .iter()
                .find(|k| k.replace('.', "_").to_uppercase() == suffix)
                .ok_or_else(|| Error::Config(format!("environment variable {name} names no config key")))?;
            insert_path(&mut value, key, scalar(&raw))
                .map_err(|m| Error::Config(format!("{name}: {m}")))?;
            any = true;
        }
        if !any {
            return Ok(self.clone());
        }
        from_value(value)
    }
}

/// Overlays `value` on the defaults, so partial sections inherit the rest.
fn from_value(value: Value) -> Result<ExperimentConfig> {
    let mut base = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
    merge(&mut base, value);
    serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn scalar(raw: &str) -> Value {
    let raw = raw.trim();
    match serde_json::from_str::<Value>(raw) {
        Ok(v) if !v.is_object() && !v.is_array() => v,
        _ => Value::String(raw.to_string()),
    }
}

fn insert_path(root: &mut Value, key: &str, v: Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key {key:?}"));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| format!("{key:?} nests under a scalar"))?;
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| format!("{key:?} nests under a scalar"))?;
    obj.insert(parts[parts.len() - 1].to_string(), v);
    Ok(())
}

fn parse_kv(text: &str) -> Result<Value> {
    let mut root = Value::Object(Map::new());
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (key, raw) = t
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {line_no}: duplicate key {key:?}")));
        }
        insert_path(&mut root, key, scalar(raw)).map_err(|m| Error::Config(format!("line {line_no}: {m}")))?;
    }
    Ok(root)
}

fn flatten(v: &Value) -> Vec<(String, Value)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, out);
                }
            }
            other => out.push((prefix.to_string(), other.clone())),
        }
    }
    let mut out = Vec::new();
    walk("", v, &mut out);
    out
}
