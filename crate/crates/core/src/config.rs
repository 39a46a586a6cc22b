//! Flat TOML run configuration covering generation, model, selection and
//! training. Unknown keys are rejected and every field is validated before
//! any work starts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::GenConfig;
use crate::encoder::{EncoderConfig, Pooling};
use crate::model::ModelConfig;
use crate::rationale::SelectorConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {msg}")]
    Field { field: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub troll_users_per_campaign: usize,
    pub nontroll_users_per_campaign: usize,
    pub min_posts: usize,
    pub max_posts: usize,
    pub min_post_len: usize,
    pub max_post_len: usize,
    pub base_vocab: usize,
    pub lexicon_size: usize,
    pub troll_marker_rate: f64,
    pub background_marker_rate: f64,
    pub topic_words: usize,
    pub topic_rate: f64,
    pub min_span: usize,
    pub max_span: usize,

    pub d_model: usize,
    pub ff_hidden: usize,
    pub max_tokens: usize,
    pub max_positions: usize,
    pub pooling: Pooling,

    pub lora_rank: usize,
    pub lora_scale: f64,
    pub summary_hidden: usize,
    pub summary_dim: usize,

    pub tau: f64,
    /// Absolute cap `l` on selected rationale tokens.
    pub rationale_max_tokens: usize,
    pub alpha_max: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,

    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub phase_a_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub normalize_continuity: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GenConfig::default();
        let e = EncoderConfig::default();
        let s = SelectorConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            seed: 42,
            troll_users_per_campaign: g.troll_users_per_campaign,
            nontroll_users_per_campaign: g.nontroll_users_per_campaign,
            min_posts: g.min_posts,
            max_posts: g.max_posts,
            min_post_len: g.min_post_len,
            max_post_len: g.max_post_len,
            base_vocab: g.base_vocab,
            lexicon_size: g.lexicon_size,
            troll_marker_rate: g.troll_marker_rate,
            background_marker_rate: g.background_marker_rate,
            topic_words: g.topic_words,
            topic_rate: g.topic_rate,
            min_span: g.min_span,
            max_span: g.max_span,
            d_model: e.d_model,
            ff_hidden: e.ff_hidden,
            max_tokens: e.max_tokens,
            max_positions: e.max_positions,
            pooling: e.pooling,
            lora_rank: 4,
            lora_scale: 1.0,
            summary_hidden: 16,
            summary_dim: 32,
            tau: s.tau,
            rationale_max_tokens: s.max_tokens,
            alpha_max: s.alpha_max,
            lambda_c: s.lambda_c,
            lambda_s: s.lambda_s,
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            phase_a_epochs: t.phase_a_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            normalize_continuity: t.normalize_continuity,
        }
    }
}

fn field(name: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: name.to_string(), msg: msg.into() }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.gen().validate().map_err(|e| match e {
            crate::datagen::GenError::Invalid { field: f, msg } => field(f, msg),
        })?;
        for (name, v) in [("d_model", self.d_model), ("ff_hidden", self.ff_hidden), ("max_tokens", self.max_tokens)] {
            if v == 0 {
                return Err(field(name, "must be at least 1"));
            }
        }
        if self.max_positions == 0 {
            return Err(field("max_positions", "must be at least 1"));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model {
            return Err(field("lora_rank", format!("must lie in 1..={}", self.d_model)));
        }
        if !self.lora_scale.is_finite() {
            return Err(field("lora_scale", "must be finite"));
        }
        if self.summary_hidden == 0 || self.summary_dim == 0 {
            return Err(field("summary_hidden", "summary dimensions must be at least 1"));
        }
        let s = self.selector();
        if !(s.tau > 0.0 && s.tau < 1.0) {
            return Err(field("tau", "must lie in (0, 1)"));
        }
        if !(s.alpha_max > 0.0 && s.alpha_max <= 1.0) {
            return Err(field("alpha_max", "must lie in (0, 1]"));
        }
        if !(s.lambda_c >= 0.0 && s.lambda_c.is_finite()) {
            return Err(field("lambda_c", "must be finite and non-negative"));
        }
        if !(s.lambda_s >= 0.0 && s.lambda_s.is_finite()) {
            return Err(field("lambda_s", "must be finite and non-negative"));
        }
        if s.max_tokens == 0 {
            return Err(field("rationale_max_tokens", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(field("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(field("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be at least 1"));
        }
        if self.patience == 0 || self.patience > self.epochs.max(self.phase_a_epochs).max(1) {
            return Err(field("patience", "must lie in 1..=epochs"));
        }
        Ok(())
    }

    pub fn gen(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            troll_users_per_campaign: self.troll_users_per_campaign,
            nontroll_users_per_campaign: self.nontroll_users_per_campaign,
            min_posts: self.min_posts,
            max_posts: self.max_posts,
            min_post_len: self.min_post_len,
            max_post_len: self.max_post_len,
            base_vocab: self.base_vocab,
            lexicon_size: self.lexicon_size,
            troll_marker_rate: self.troll_marker_rate,
            background_marker_rate: self.background_marker_rate,
            topic_words: self.topic_words,
            topic_rate: self.topic_rate,
            min_span: self.min_span,
            max_span: self.max_span,
        }
    }

    pub fn model(&self, campaigns: Vec<String>) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 0,
                d_model: self.d_model,
                ff_hidden: self.ff_hidden,
                max_tokens: self.max_tokens,
                max_positions: self.max_positions,
                pooling: self.pooling,
            },
            lora_rank: self.lora_rank,
            lora_scale: self.lora_scale,
            summary_hidden: self.summary_hidden,
            summary_dim: self.summary_dim,
            campaigns,
        }
    }

    pub fn selector(&self) -> SelectorConfig {
        SelectorConfig {
            tau: self.tau,
            max_tokens: self.rationale_max_tokens,
            alpha_max: self.alpha_max,
            lambda_c: self.lambda_c,
            lambda_s: self.lambda_s,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            phase_a_epochs: self.phase_a_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            seed: self.seed,
            normalize_continuity: self.normalize_continuity,
        }
    }

    /// SHA-256 over the canonical JSON form, lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig { seed: 7, lambda_c: 0.25, pooling: Pooling::Mean, ..RunConfig::default() };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_toml("learning_rate = 0.1"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn field_errors_name_the_field() {
        let e = RunConfig::from_toml("tau = 1.5").unwrap_err();
        assert_eq!(e, ConfigError::Field { field: "tau".into(), msg: "must lie in (0, 1)".into() });
        let e = RunConfig::from_toml("troll_marker_rate = 2.0").unwrap_err();
        assert!(matches!(e, ConfigError::Field { field, .. } if field == "troll_marker_rate"));
        let e = RunConfig::from_toml("lora_rank = 99").unwrap_err();
        assert!(matches!(e, ConfigError::Field { field, .. } if field == "lora_rank"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), RunConfig { seed: 1, ..a.clone() }.hash());
    }
}
