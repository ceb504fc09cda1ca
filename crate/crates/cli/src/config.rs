use std::path::{Path, PathBuf};

use notewise_core::cohort::DEFAULT_FEWSHOT_K;
use notewise_core::encoder::EncoderConfig;
use notewise_core::{AggregationRule, CohortConfig, GeneratorConfig, Schedule, SplitSpec, WemConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Working directory: every command reads inputs from and writes outputs to it.
    pub out: PathBuf,
    /// Existing corpus to use instead of `<out>/corpus.jsonl`.
    pub corpus: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out: PathBuf::from("out"),
            corpus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub prompt_len: usize,
    /// Word types kept in the vocabulary, specials excluded.
    pub max_vocab: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            encoder: EncoderConfig::default(),
            prompt_len: 8,
            max_vocab: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub pretrain: Schedule,
    pub finetune: Schedule,
    pub soft_prompt: Schedule,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            pretrain: Schedule::pretrain(),
            finetune: Schedule::finetune(),
            soft_prompt: Schedule::soft_prompt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Aggregation rules reported by `evaluate`; the first is the primary rule.
    pub rules: Vec<AggregationRule>,
    pub ratios: Vec<usize>,
    pub few_shot_k: Vec<usize>,
    pub replicates: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            rules: vec![AggregationRule::Min],
            ratios: vec![10, 100, 250],
            few_shot_k: DEFAULT_FEWSHOT_K.to_vec(),
            replicates: 1,
        }
    }
}

impl EvalSection {
    pub fn primary_rule(&self) -> AggregationRule {
        self.rules.first().copied().unwrap_or_default()
    }
}

/// Whole-pipeline configuration. Sub-seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub generator: GeneratorConfig,
    pub cohort: CohortConfig,
    pub split: SplitSpec,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub wem: WemConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Overrides the global seed and propagates it into every section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        let s = self.seed;
        self.generator.seed = s;
        self.split.seed = s;
        self.model.encoder.seed = s;
        self.training.pretrain.seed = s;
        self.training.finetune.seed = s;
        self.training.soft_prompt.seed = s;
        self.wem.seed = s;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate()?;
        self.cohort.validate()?;
        self.split.validate()?;
        self.training.pretrain.validate()?;
        self.training.finetune.validate()?;
        self.training.soft_prompt.validate()?;
        self.wem.validate()?;
        if self.model.max_vocab == 0 {
            return Err(CliError::Config("model.max_vocab must be positive".into()));
        }
        if self.eval.rules.is_empty() {
            return Err(CliError::Config("eval.rules must not be empty".into()));
        }
        if self.eval.replicates == 0 {
            return Err(CliError::Config("eval.replicates must be positive".into()));
        }
        if self.eval.ratios.contains(&0) {
            return Err(CliError::Config("eval.ratios must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding output paths.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.paths = Paths::default();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
