//! Experiment configuration: a TOML file, optionally partial, with
//! `key.path=value` overrides applied on top before validation.

use std::fs;
use std::path::{Path, PathBuf};

use poore_core::data::SynthConfig;
use poore_core::encoder::{AttentionQuery, EncoderConfig};
use poore_core::estimators::{EstimatorConfig, EstimatorKind};
use poore_core::keywords::KeywordCriterion;
use poore_core::training::{BaseTrainingConfig, PostHocConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL corpus; when absent the synthetic generator is used.
    pub path: Option<PathBuf>,
    /// Vocabulary size for a JSONL corpus. Defaults to one past the largest id.
    pub vocab_size: Option<u32>,
    /// Class count for a JSONL corpus. Defaults to one past the largest label.
    pub num_classes: Option<usize>,
    pub synthetic: SynthConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeywordConfig {
    pub criterion: KeywordCriterion,
    /// Keyword budget M; defaults to 10% of the observed train vocabulary.
    pub top_m: Option<usize>,
    pub attention_query: AttentionQuery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub roster: Vec<EstimatorKind>,
    pub estimators: EstimatorConfig,
    /// Refit the Mahalanobis estimator on the fine-tuned model. When false the
    /// pre-fine-tuning fit is reused.
    pub refit_mahalanobis: bool,
    /// Histogram bins per SVG plot.
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            roster: EstimatorKind::ALL.to_vec(),
            estimators: EstimatorConfig::default(),
            refit_mahalanobis: true,
            bins: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Model init, dropout, shuffling and masking seeds derive from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    /// `vocab_size`, `num_classes` and `seed` are filled in from the data and
    /// the master seed; `max_len` grows to fit the corpus.
    pub encoder: EncoderConfig,
    pub base: BaseTrainingConfig,
    /// `masking.seed` is derived from the master seed.
    pub posthoc: PostHocConfig,
    pub keywords: KeywordConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            base: BaseTrainingConfig::default(),
            posthoc: PostHocConfig::default(),
            keywords: KeywordConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies `overrides` in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self =
            toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.posthoc.epochs == 0 {
            return bad("posthoc.epochs must be at least 1".into());
        }
        if self.base.batch_size == 0 || self.posthoc.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return bad(format!("data.path {} does not exist", p.display()));
            }
        } else {
            self.data.synthetic.validate().map_err(|e| Error::Config(format!("data.synthetic: {e}")))?;
        }
        self.posthoc.loss.weights.validate().map_err(|e| Error::Config(format!("posthoc.loss: {e}")))?;
        self.posthoc.masking.validate().map_err(|e| Error::Config(format!("posthoc.masking: {e}")))?;
        if self.keywords.top_m == Some(0) {
            return bad("keywords.top_m must be positive".into());
        }
        if self.eval.roster.is_empty() {
            return bad("eval.roster is empty".into());
        }
        if self.eval.bins == 0 {
            return bad("eval.bins must be positive".into());
        }
        let mut enc = self.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(4);
        enc.num_classes = enc.num_classes.max(1);
        enc.validate().map_err(|e| Error::Config(format!("encoder: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override `{spec}` lacks `=`")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
