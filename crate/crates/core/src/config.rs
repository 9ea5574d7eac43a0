//! The single JSON document that fully determines a pretraining run.

use serde::{Deserialize, Serialize};

use crate::corpus::VOCAB_SIZE;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::objectives::ObjectiveConfig;
use crate::trainer::schedule::ScheduleConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus file: UTF-8 text, documents separated by blank lines.
    pub corpus: String,
    pub batch_size: usize,
    pub seq_len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub seed: u64,
    /// Where metrics and checkpoints land. The pretrain command's `--out`
    /// flag takes precedence when both are given.
    #[serde(default)]
    pub out_dir: Option<String>,
    /// CSV row cadence in steps.
    #[serde(default = "default_metric_every")]
    pub metric_every: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
}

fn default_metric_every() -> u64 {
    10
}

fn default_checkpoint_every() -> u64 {
    500
}

impl RunConfig {
    /// Parses strictly: unknown keys are rejected and errors carry the JSON
    /// path of the offending key (for example `schedule.peak_lr`).
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let mut inner = e.inner().to_string();
            if let Some(i) = inner.find(" at line ") {
                inner.truncate(i);
            }
            let path = e.path().to_string();
            // Missing fields surface at the parent struct; splice the field
            // name back on so the message carries the full key path.
            let at = match inner.strip_prefix("missing field `").and_then(|r| r.strip_suffix('`')) {
                Some(field) if path == "." => field.to_string(),
                Some(field) => format!("{path}.{field}"),
                None => path,
            };
            Error::Json(format!("{inner} at `{at}`"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.schedule.validate()?;
        if self.data.batch_size == 0 {
            return Err(Error::config("data.batch_size must be at least 1"));
        }
        if self.data.seq_len < 3 {
            return Err(Error::config(format!(
                "data.seq_len must be at least 3 ([CLS], one byte, [SEP]), got {}",
                self.data.seq_len
            )));
        }
        if self.data.seq_len > self.model.max_seq_len {
            return Err(Error::config(format!(
                "data.seq_len {} exceeds model.max_seq_len {}",
                self.data.seq_len, self.model.max_seq_len
            )));
        }
        if self.model.vocab_size < VOCAB_SIZE {
            return Err(Error::config(format!(
                "model.vocab_size {} is too small for the byte tokenizer ({VOCAB_SIZE})",
                self.model.vocab_size
            )));
        }
        if self.metric_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("metric_every and checkpoint_every must be at least 1"));
        }
        Ok(())
    }

    /// The config with every default materialized, as written to
    /// `effective-config.json`.
    pub fn effective_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
