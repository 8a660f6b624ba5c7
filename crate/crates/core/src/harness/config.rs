//! Declarative experiment configuration (a single JSON document).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ShiftKind, ShiftSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_BINS;
use crate::nnet::ModelConfig;
use crate::optim::{Schedule, TrainPlan};
use crate::swag::{SampleSpec, DEFAULT_MAX_RANK};

/// Model hyperparameters; input and output sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden_dims: Vec<usize>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub base_seed: u64,
    #[serde(default)]
    pub adapt_output: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            hidden_dims: m.hidden_dims,
            lora_rank: m.lora_rank,
            lora_alpha: m.lora_alpha,
            lora_dropout: m.lora_dropout,
            base_seed: m.base_seed,
            adapt_output: m.adapt_output,
        }
    }
}

impl ModelSpec {
    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            num_classes,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            lora_dropout: self.lora_dropout,
            base_seed: self.base_seed,
            adapt_output: self.adapt_output,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Map,
    McDropout,
    Ensemble,
    Swa,
    Swag,
    #[serde(rename = "multiswa")]
    MultiSwa,
    #[serde(rename = "multiswag")]
    MultiSwag,
}

pub const DEFAULT_MEMBERS: usize = 5;
pub const DEFAULT_SAMPLES: usize = 15;
pub const DEFAULT_SCALE: f64 = 1.0;

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Map,
        MethodKind::McDropout,
        MethodKind::Ensemble,
        MethodKind::Swa,
        MethodKind::Swag,
        MethodKind::MultiSwa,
        MethodKind::MultiSwag,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            MethodKind::Map => "MAP",
            MethodKind::McDropout => "MC Dropout",
            MethodKind::Ensemble => "Ensemble",
            MethodKind::Swa => "SWA",
            MethodKind::Swag => "SWAG",
            MethodKind::MultiSwa => "MultiSWA",
            MethodKind::MultiSwag => "MultiSWAG",
        }
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, MethodKind::Ensemble | MethodKind::MultiSwa | MethodKind::MultiSwag)
    }

    /// Needs the SWAG collection phase.
    pub fn needs_collection(self) -> bool {
        matches!(
            self,
            MethodKind::Swa | MethodKind::Swag | MethodKind::MultiSwa | MethodKind::MultiSwag
        )
    }

    pub fn uses_samples(self) -> bool {
        matches!(self, MethodKind::McDropout | MethodKind::Swag | MethodKind::MultiSwag)
    }
}

/// One method to evaluate. Unset fields take the protocol defaults:
/// 5 members for ensembles, 15 samples (or dropout passes), scale 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: MethodKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl MethodConfig {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            name: None,
            members: None,
            samples: None,
            scale: None,
        }
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.display_name().to_string())
    }

    pub fn n_members(&self) -> usize {
        if self.kind.is_ensemble() {
            self.members.unwrap_or(DEFAULT_MEMBERS)
        } else {
            1
        }
    }

    pub fn sample_spec(&self, seed: u64) -> SampleSpec {
        SampleSpec {
            n_samples: self.samples.unwrap_or(DEFAULT_SAMPLES),
            scale: self.scale.unwrap_or(DEFAULT_SCALE),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_members() == 0 {
            return Err(Error::Config(format!("method {}: members must be at least 1", self.name())));
        }
        if self.members.is_some() && !self.kind.is_ensemble() {
            return Err(Error::Config(format!("method {}: members only applies to ensembles", self.name())));
        }
        if (self.samples.is_some() || self.scale.is_some()) && !self.kind.uses_samples() {
            return Err(Error::Config(format!("method {}: samples/scale do not apply", self.name())));
        }
        self.sample_spec(0)
            .validate()
            .map_err(|e| Error::Config(format!("method {}: {e}", self.name())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedShift {
    pub name: String,
    #[serde(flatten)]
    pub shift: ShiftSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Train / validation / test fractions.
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub shifts: Vec<NamedShift>,
}

fn default_split() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub n_bins: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { n_bins: DEFAULT_BINS }
    }
}

/// Full description of an experiment. `plan.seed` is ignored: every
/// training run is seeded from `seeds` and the member index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub plan: TrainPlan,
    #[serde(default)]
    pub schedule: Schedule,
    /// Maximum number of SWAG deviation columns.
    #[serde(default = "default_max_rank")]
    pub max_rank: usize,
    pub methods: Vec<MethodConfig>,
    pub data: DataConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn default_max_rank() -> usize {
    DEFAULT_MAX_RANK
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            plan: TrainPlan::default(),
            schedule: Schedule::default(),
            max_rank: DEFAULT_MAX_RANK,
            methods: MethodKind::ALL.iter().map(|&k| MethodConfig::new(k)).collect(),
            data: DataConfig {
                source: DataSource::Synthetic {
                    spec: SyntheticSpec::GaussianBlobs {
                        n_classes: 4,
                        per_class: 500,
                        dim: 16,
                        radius: 2.0,
                        sigma: 1.5,
                        label_flip: 0.1,
                    },
                    seed: 0,
                },
                split: default_split(),
                split_seed: 0,
                shifts: vec![
                    NamedShift {
                        name: "near_ood".into(),
                        shift: ShiftSpec {
                            kind: ShiftKind::Covariate {
                                rotation: 0.4,
                                translation: vec![],
                                scale: 1.0,
                            },
                            seed: 1,
                        },
                    },
                    NamedShift {
                        name: "far_ood".into(),
                        shift: ShiftSpec {
                            kind: ShiftKind::Covariate {
                                rotation: 0.0,
                                translation: vec![],
                                scale: -1.0,
                            },
                            seed: 2,
                        },
                    },
                ],
            },
            metrics: MetricsConfig::default(),
            seeds: vec![0, 1, 2],
            workers: None,
            output: None,
        }
    }
}

impl ExperimentConfig {
    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        let mut names: Vec<String> = self.methods.iter().map(|m| m.name()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.methods.len() {
            return Err(Error::Config("method names must be unique".into()));
        }
        for m in &self.methods {
            m.validate()?;
            if m.kind == MethodKind::McDropout && self.model.lora_dropout <= 0.0 {
                return Err(Error::Config("MC dropout needs model.lora_dropout > 0".into()));
            }
        }
        let mut shift_names: Vec<&str> = self.data.shifts.iter().map(|s| s.name.as_str()).collect();
        shift_names.push(ID_DATASET);
        shift_names.sort_unstable();
        shift_names.dedup();
        if shift_names.len() != self.data.shifts.len() + 1 {
            return Err(Error::Config(format!(
                "shift names must be unique and differ from {ID_DATASET}"
            )));
        }
        if self.metrics.n_bins == 0 {
            return Err(Error::Config("metrics.n_bins must be at least 1".into()));
        }
        if self.max_rank < 2 {
            return Err(Error::Config("max_rank must be at least 2".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.plan.validate()?;
        self.schedule.validate()?;
        if self.schedule.max_lr.is_nan() || self.schedule.max_lr <= 0.0 {
            return Err(Error::Config("schedule.max_lr must be positive".into()));
        }
        Ok(())
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies `key=value` overrides before parsing.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Name under which the in-distribution test split is reported.
pub const ID_DATASET: &str = "id_test";

/// Sets a dotted path such as `schedule.max_lr=0.1` or `methods.0.samples=30`.
/// The value is parsed as JSON when possible, otherwise taken as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let new_value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path {path:?}")));
    }
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), new_value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::Config(format!("{path}: {key:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("{path}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = new_value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("{path}: {key:?} is not inside an object or array"))),
        };
    }
    Ok(())
}
