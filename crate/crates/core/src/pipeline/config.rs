use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CanonSpec;
use crate::labels::{GenericCombineParams, DEFAULT_ALPHA, DEFAULT_CONSISTENCY_PENALTY};
use crate::model::{ModelConfig, TrainPlan};
use crate::tokenizer::DEFAULT_VOCAB_SIZE;

use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Anchored translation plus reinforcement bootstrapping.
    Full,
    /// Translation only; alpha is forced to 0 and no reinforced model is trained.
    AnchoringOnly,
    /// Reinforcement bootstrapping with an empty dictionary.
    ReinforcementOnly,
    /// Gradient ascent on the target text instead of generic labels.
    ReversedLoss,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::AnchoringOnly => "anchoring_only",
            Ablation::ReinforcementOnly => "reinforcement_only",
            Ablation::ReversedLoss => "reversed_loss",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Every artifact is written below this directory.
    pub work_dir: PathBuf,
    /// Plain-text generic corpus to use instead of the built-in generator.
    pub generic_corpus: Option<PathBuf>,
    /// Anchor dictionary to use instead of the generated one.
    pub dictionary: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            work_dir: PathBuf::from("run"),
            generic_corpus: None,
            dictionary: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_characters: usize,
    pub n_places: usize,
    pub n_artifacts: usize,
    pub story_count: usize,
    pub canon_tokens: usize,
    pub canon_holdout_tokens: usize,
    pub generic_tokens: usize,
    pub generic_holdout_tokens: usize,
    /// Share of canon blocks in the pretraining mix.
    pub mix_ratio: f64,
    pub vocab_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let c = CanonSpec::default();
        CorpusConfig {
            n_characters: c.n_characters,
            n_places: c.n_places,
            n_artifacts: c.n_artifacts,
            story_count: c.story_count,
            canon_tokens: c.tokens_target,
            canon_holdout_tokens: c.holdout_tokens,
            generic_tokens: 900_000,
            generic_holdout_tokens: 20_000,
            mix_ratio: 0.3,
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub context_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelShape {
            layers: d.layers,
            heads: d.heads,
            embed_dim: d.embed_dim,
            context_len: d.context_len,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    /// Optimizer steps after which training stops even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl PlanConfig {
    pub fn plan(&self, context_len: usize) -> TrainPlan {
        TrainPlan {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            context_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many unlearning steps (and at step 0 and the last step).
    pub every: u64,
    pub max_tokens: usize,
    pub temperature: f64,
    /// Base URL of an external judge; the rule-based judge is used when unset.
    pub judge_url: Option<String>,
    pub judge_timeout_secs: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            every: 20,
            max_tokens: 16,
            temperature: 0.0,
            judge_url: None,
            judge_timeout_secs: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub alpha: f64,
    pub consistency_penalty: f32,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub model: ModelShape,
    pub pretrain: PlanConfig,
    pub reinforce: PlanConfig,
    pub unlearn: PlanConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            ablation: Ablation::Full,
            alpha: DEFAULT_ALPHA,
            consistency_penalty: DEFAULT_CONSISTENCY_PENALTY,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            model: ModelShape::default(),
            pretrain: PlanConfig {
                learning_rate: 1e-3,
                epochs: 2,
                batch_size: 8,
                grad_accum: 1,
                max_steps: None,
            },
            reinforce: PlanConfig {
                learning_rate: 3e-4,
                epochs: 3,
                batch_size: 8,
                grad_accum: 16,
                max_steps: None,
            },
            unlearn: PlanConfig {
                learning_rate: 2e-5,
                epochs: 4,
                batch_size: 16,
                grad_accum: 1,
                max_steps: Some(60),
            },
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML text, applies `key=value` overrides (dotted keys, values
    /// in TOML syntax or bare strings), then enforces the ablation rules.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self, PipelineError> {
        let file: toml::Table =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        // Start from the defaults so partially specified sections keep their other fields.
        let mut table =
            toml::Table::try_from(PipelineConfig::default()).expect("defaults serialize");
        merge(&mut table, file);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: PipelineConfig = table
            .try_into()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.normalized()
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, PipelineError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        PipelineConfig::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    /// Applies the ablation forcing rules and validates every field.
    pub fn normalized(mut self) -> Result<Self, PipelineError> {
        if self.ablation == Ablation::AnchoringOnly {
            self.alpha = 0.0;
        }
        if self.ablation == Ablation::ReinforcementOnly {
            self.paths.dictionary = None;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.consistency_penalty.is_finite() && self.consistency_penalty >= 0.0) {
            return bad(format!(
                "consistency_penalty must be non-negative, got {}",
                self.consistency_penalty
            ));
        }
        if !(self.corpus.mix_ratio > 0.0 && self.corpus.mix_ratio < 1.0) {
            return bad(format!(
                "corpus.mix_ratio must lie in (0, 1), got {}",
                self.corpus.mix_ratio
            ));
        }
        if self.eval.every == 0 || self.eval.max_tokens == 0 {
            return bad("eval.every and eval.max_tokens must be positive".into());
        }
        if self.corpus.generic_tokens == 0 || self.corpus.generic_holdout_tokens == 0 {
            return bad("generic corpus sizes must be positive".into());
        }
        self.canon_spec()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.model_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        for (name, p) in [
            ("pretrain", &self.pretrain),
            ("reinforce", &self.reinforce),
            ("unlearn", &self.unlearn),
        ] {
            p.plan(self.model.context_len)
                .validate()
                .map_err(|e| PipelineError::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Whether anchored terms are translated at all.
    pub fn dictionary_enabled(&self) -> bool {
        self.ablation != Ablation::ReinforcementOnly
    }

    /// Whether the ablation needs a reinforced model.
    pub fn needs_reinforced(&self) -> bool {
        matches!(self.ablation, Ablation::Full | Ablation::ReinforcementOnly) && self.alpha > 0.0
    }

    pub fn combine_params(&self) -> GenericCombineParams {
        GenericCombineParams {
            alpha: self.alpha,
            consistency_penalty: self.consistency_penalty,
        }
    }

    pub fn canon_spec(&self) -> CanonSpec {
        CanonSpec {
            seed: sub_seed(self.seed, "canon"),
            n_characters: self.corpus.n_characters,
            n_places: self.corpus.n_places,
            n_artifacts: self.corpus.n_artifacts,
            story_count: self.corpus.story_count,
            tokens_target: self.corpus.canon_tokens,
            holdout_tokens: self.corpus.canon_holdout_tokens,
        }
    }

    /// Model configuration; the vocabulary size is the configured target
    /// until a trained vocabulary says otherwise.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.model.layers,
            heads: self.model.heads,
            embed_dim: self.model.embed_dim,
            context_len: self.model.context_len,
            vocab_size: self.corpus.vocab_size,
            seed: sub_seed(self.seed, "init"),
        }
    }
}

/// Stage-specific seed derived from the run seed and a stage name.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(format!("{seed}/{name}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        PipelineError::Config(format!("override {assignment:?} is not key=value"))
    })?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            PipelineError::Config(format!("override {key:?}: {p} is not a table"))
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
