use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::AggregationConfig;
use crate::budget::{SubprocessTokenizer, Tokenizer, WhitespaceTokenizer};
use crate::error::{Error, Result};
use crate::ingest::{FeatureCatalog, Split};
use crate::llm::predict::GenerationSettings;
use crate::llm::ClientConfig;
use crate::metrics::MacroAveraging;
use crate::pipeline::{Mode, Pipeline};
use crate::serialize::DescriptionTemplate;
use crate::tasks::{TaskId, TaskSpec};

fn default_repetitions() -> usize {
    3
}

fn default_max_context() -> usize {
    2048
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenizerConfig {
    #[default]
    Whitespace,
    /// External adapter; see [`SubprocessTokenizer`].
    Subprocess {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(default = "default_max_context")]
    pub max_context: usize,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            max_context: default_max_context(),
            tokenizer: TokenizerConfig::default(),
        }
    }
}

fn default_max_new_tokens() -> u32 {
    16
}
fn default_description_temperature() -> f64 {
    0.2
}
fn default_description_max_new_tokens() -> u32 {
    256
}
fn default_proposal_temperature() -> f64 {
    0.7
}
fn default_proposal_max_new_tokens() -> u32 {
    128
}

/// Model and decoding settings plus optional transport overrides. The
/// transport fields default to the `CLINPROMPT_*` environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub want_logprobs: bool,
    #[serde(default = "default_description_temperature")]
    pub description_temperature: f64,
    #[serde(default = "default_description_max_new_tokens")]
    pub description_max_new_tokens: u32,
    #[serde(default = "default_proposal_temperature")]
    pub proposal_temperature: f64,
    #[serde(default = "default_proposal_max_new_tokens")]
    pub proposal_max_new_tokens: u32,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_retries: Option<u32>,
}

impl EndpointConfig {
    pub fn new(model: impl Into<String>) -> Self {
        EndpointConfig {
            model: model.into(),
            temperature: 0.0,
            max_new_tokens: default_max_new_tokens(),
            want_logprobs: false,
            description_temperature: default_description_temperature(),
            description_max_new_tokens: default_description_max_new_tokens(),
            proposal_temperature: default_proposal_temperature(),
            proposal_max_new_tokens: default_proposal_max_new_tokens(),
            base_url: None,
            parallelism: None,
            cache_dir: None,
            timeout_s: None,
            max_retries: None,
        }
    }
}

/// Where the task instruction comes from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstructionSource {
    /// The task's plain description.
    #[default]
    Default,
    Fixed { text: String },
    /// `best.json` written by `optimize`.
    Optimized { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskId,
    #[serde(default)]
    pub mode: Mode,
    /// Record file (JSONL).
    pub data: PathBuf,
    /// Split evaluated by `run`.
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    #[serde(default)]
    pub aggregation: AggregationConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    pub endpoint: EndpointConfig,
    #[serde(default)]
    pub instruction: InstructionSource,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate a seeded sample of this many records per repetition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    #[serde(default)]
    pub macro_averaging: MacroAveraging,
    /// Prints cumulative joules on stdout; run before and after timing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meter_command: Option<Vec<String>>,
}

impl RunConfig {
    pub fn new(task: TaskId, data: impl Into<PathBuf>, model: &str) -> Self {
        RunConfig {
            task,
            mode: Mode::Text,
            data: data.into(),
            split: Split::Test,
            catalog: None,
            aggregation: AggregationConfig::default(),
            budget: BudgetConfig::default(),
            endpoint: EndpointConfig::new(model),
            instruction: InstructionSource::Default,
            repetitions: default_repetitions(),
            seed: 0,
            sample: None,
            macro_averaging: MacroAveraging::default(),
            meter_command: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::get(self.task)
    }

    /// Checks that need no files.
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.sample == Some(0) {
            return Err(Error::Config("sample must be at least 1".into()));
        }
        if self.endpoint.model.trim().is_empty() {
            return Err(Error::Config("endpoint.model is empty".into()));
        }
        if self.endpoint.temperature < 0.0 || !self.endpoint.temperature.is_finite() {
            return Err(Error::Config("temperature must be a finite value >= 0".into()));
        }
        if self.mode.uses_series() && !self.task_spec().has_series() {
            return Err(Error::Config(format!(
                "mode `{}` is only valid for mortality, not `{}`",
                self.mode, self.task
            )));
        }
        if let Some(cmd) = &self.meter_command {
            if cmd.is_empty() {
                return Err(Error::Config("meter_command is empty".into()));
            }
        }
        self.aggregation.validate()
    }

    /// Hex SHA-256 of the settings that affect results. Endpoint transport
    /// (URL, parallelism, cache, timeouts, retries) and the meter hook are
    /// left out. Keys are hashed in sorted order.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("meter_command");
            if let Some(ep) = obj.get_mut("endpoint").and_then(|e| e.as_object_mut()) {
                for k in ["base_url", "parallelism", "cache_dir", "timeout_s", "max_retries"] {
                    ep.remove(k);
                }
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Copy of `cfg` with `feature_id` excluded from aggregation.
pub fn ablate_feature(cfg: &RunConfig, catalog: &FeatureCatalog, feature_id: &str) -> Result<RunConfig> {
    if !catalog.contains(feature_id) {
        return Err(Error::UnknownFeature(feature_id.to_string()));
    }
    let mut out = cfg.clone();
    out.aggregation.excluded_features.insert(feature_id.to_string());
    Ok(out)
}

/// A config together with the directory its relative paths refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    /// `.toml` files are read as TOML, anything else as JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = if path.extension().is_some_and(|e| e == "toml") {
            RunConfig::from_toml(&text)?
        } else {
            RunConfig::from_json(&text)?
        };
        config.validate()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig { config, base_dir })
    }

    pub fn in_dir(config: RunConfig, base_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(LoadedConfig {
            config,
            base_dir: base_dir.into(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn catalog(&self) -> Result<FeatureCatalog> {
        match &self.config.catalog {
            Some(p) => FeatureCatalog::load(&self.resolve(p)),
            None => Ok(FeatureCatalog::default_catalog()),
        }
    }

    pub fn tokenizer(&self) -> Result<Arc<dyn Tokenizer>> {
        Ok(match &self.config.budget.tokenizer {
            TokenizerConfig::Whitespace => Arc::new(WhitespaceTokenizer),
            TokenizerConfig::Subprocess { program, args } => {
                Arc::new(SubprocessTokenizer::spawn(program.clone(), program, args)?)
            }
        })
    }

    /// Environment defaults overlaid with the config's endpoint overrides.
    pub fn client_config(&self) -> ClientConfig {
        let ep = &self.config.endpoint;
        let mut c = ClientConfig::from_env();
        if let Some(u) = &ep.base_url {
            c.base_url = u.clone();
        }
        if let Some(n) = ep.parallelism {
            c.parallelism = n;
        }
        if let Some(d) = &ep.cache_dir {
            c.cache_dir = Some(self.resolve(d));
        }
        if let Some(t) = ep.timeout_s {
            c.timeout = Duration::from_secs_f64(t);
        }
        if let Some(r) = ep.max_retries {
            c.max_retries = r;
        }
        c
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        let cfg = &self.config;
        let ep = &cfg.endpoint;
        let mut generation = GenerationSettings::new(&ep.model);
        generation.temperature = ep.temperature;
        generation.max_new_tokens = ep.max_new_tokens;
        generation.want_logprobs = ep.want_logprobs;
        let mut description_generation = GenerationSettings::new(&ep.model);
        description_generation.temperature = ep.description_temperature;
        description_generation.max_new_tokens = ep.description_max_new_tokens;
        let p = Pipeline {
            task: cfg.task_spec(),
            mode: cfg.mode,
            catalog: self.catalog()?,
            aggregation: cfg.aggregation.clone(),
            max_context: cfg.budget.max_context,
            tokenizer: self.tokenizer()?,
            template: DescriptionTemplate::default(),
            generation,
            description_generation,
            averaging: cfg.macro_averaging,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn proposer_settings(&self) -> GenerationSettings {
        let ep = &self.config.endpoint;
        let mut s = GenerationSettings::new(&ep.model);
        s.temperature = ep.proposal_temperature;
        s.max_new_tokens = ep.proposal_max_new_tokens;
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        RunConfig::new(TaskId::Mortality, "data.jsonl", "m")
    }

    #[test]
    fn hash_ignores_key_order_and_transport() {
        let a = RunConfig::from_json(r#"{"task":"mednli","data":"d.jsonl","endpoint":{"model":"m","temperature":0.0}}"#).unwrap();
        let b = RunConfig::from_json(r#"{"endpoint":{"temperature":0.0,"model":"m","base_url":"http://x:1"},"data":"d.jsonl","task":"mednli"}"#).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn hash_separates_distinct_configs() {
        let mut seen = std::collections::HashSet::new();
        for task in TaskId::ALL {
            for reps in 1..4 {
                for temp in [0.0, 0.5] {
                    for ctx in [512, 2048] {
                        let mut c = RunConfig::new(task, "d.jsonl", "m");
                        c.repetitions = reps;
                        c.endpoint.temperature = temp;
                        c.budget.max_context = ctx;
                        assert!(seen.insert(c.config_hash()));
                    }
                }
            }
        }
    }

    #[test]
    fn toml_and_json_agree() {
        let t = RunConfig::from_toml(
            r#"
task = "mortality"
mode = "text+ts-numeric"
data = "records.jsonl"
repetitions = 1

[endpoint]
model = "m"
want_logprobs = true

[aggregation]
bucket_count = 48

[instruction]
source = "fixed"
text = "Predict."
"#,
        )
        .unwrap();
        assert_eq!(t.mode, Mode::TextTsNumeric);
        assert_eq!(t.aggregation.bucket_count, 48);
        assert_eq!(RunConfig::from_json(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn series_modes_are_mortality_only() {
        let mut c = RunConfig::new(TaskId::Mednli, "d", "m");
        c.mode = Mode::TextTsNumeric;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = base();
        c.mode = Mode::TsOnly;
        c.validate().unwrap();
        c.repetitions = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_changes_hash_and_checks_the_catalog() {
        let cat = FeatureCatalog::default_catalog();
        let c = base();
        let a = ablate_feature(&c, &cat, "glasgow_coma_scale_total").unwrap();
        assert!(a.aggregation.excluded_features.contains("glasgow_coma_scale_total"));
        assert_ne!(a.config_hash(), c.config_hash());
        assert!(matches!(ablate_feature(&c, &cat, "nope"), Err(Error::UnknownFeature(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{"task":"mednli","data":"d","endpoint":{"model":"m"},"extra":1}"#).is_err());
    }
}
