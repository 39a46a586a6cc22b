//! End-to-end steps shared by the command line and the acceptance suite.

use serde::Serialize;
use serde_json::json;

use crate::adapters::FusionVariant;
use crate::config::RunConfig;
use crate::corpus::UserTimeline;
use crate::datagen::{gen_corpus, GenError};
use crate::encoder::Vocab;
use crate::explain::{explain_user, gating_report, ExplanationReport, GatingRow};
use crate::model::{Encoded, Model};
use crate::numeric::TensorError;
use crate::training::{self, corpus_campaigns, Dataset, Metrics, Split, SplitPart, TrainError, TrainReport};

pub fn generate(cfg: &RunConfig) -> Result<Vec<UserTimeline>, GenError> {
    Ok(gen_corpus(&cfg.gen())?.users)
}

/// A model bound to a corpus: split, examples and frozen encodings.
pub struct Session {
    pub model: Model,
    pub config: RunConfig,
    pub data: Dataset,
    pub cache: Vec<Encoded>,
}

impl Session {
    /// Fresh, untrained model over `users`.
    pub fn init(cfg: &RunConfig, users: &[UserTimeline]) -> Result<Self, TrainError> {
        let vocab = Vocab::from_corpus(users);
        let model = Model::new(cfg.model(corpus_campaigns(users)), vocab, cfg.seed)?;
        Self::attach(model, cfg.clone(), users)
    }

    /// Binds an existing model; encodings are computed with its encoder.
    pub fn attach(model: Model, config: RunConfig, users: &[UserTimeline]) -> Result<Self, TrainError> {
        let split = Split::stratified(users, config.seed);
        let data = Dataset::new(&model, users, &split);
        let cache = training::encode_all(&model, &data)?;
        Ok(Session { model, config, data, cache })
    }

    /// Both training phases; the cache is replaced by the frozen encoder's.
    pub fn train(&mut self) -> Result<TrainReport, TrainError> {
        let (report, cache) = training::train(&mut self.model, &self.data, &self.config.train(), &self.config.selector())?;
        self.cache = cache;
        Ok(report)
    }

    pub fn evaluate(&self, part: SplitPart, variant: FusionVariant) -> Result<Metrics, TensorError> {
        let idx = self.data.part(part);
        Ok(training::evaluate(&self.model, &self.data, &self.cache, idx, variant, &self.config.selector())?.0)
    }

    /// Retrains Phase B per variant from the stored Phase A state.
    pub fn ablate(&self, variant: FusionVariant) -> Result<Metrics, TrainError> {
        let (_, _, m) =
            training::ablate(&self.model, &self.data, &self.cache, variant, &self.config.train(), &self.config.selector())?;
        Ok(m)
    }

    pub fn explain(&self, user_ids: &[String]) -> Result<Vec<ExplanationReport>, ExplainLookupError> {
        let sel = self.config.selector();
        let mut out = Vec::new();
        for id in user_ids {
            let i = self
                .data
                .examples
                .iter()
                .position(|e| &e.user_id == id)
                .ok_or_else(|| ExplainLookupError::UnknownUser(id.clone()))?;
            out.push(explain_user(&self.model, &self.data.examples[i], &self.cache[i], FusionVariant::Full, &sel)?);
        }
        Ok(out)
    }

    pub fn gating(&self, part: SplitPart) -> Result<Vec<GatingRow>, TensorError> {
        let rows: Vec<_> = self.data.part(part).iter().map(|&i| (&self.data.examples[i], &self.cache[i])).collect();
        gating_report(&self.model, &rows, FusionVariant::Full, &self.config.selector())
    }

    pub fn user_ids(&self, part: SplitPart) -> Vec<String> {
        self.data.part(part).iter().map(|&i| self.data.examples[i].user_id.clone()).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExplainLookupError {
    #[error("user {0} is not in the corpus")]
    UnknownUser(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Metrics in the fixed output schema.
pub fn metrics_value(m: &Metrics, cfg: &RunConfig) -> serde_json::Value {
    json!({
        "troll": { "precision": m.troll.precision, "recall": m.troll.recall, "f1": m.troll.f1 },
        "campaign": { "macro_f1": m.campaign_macro_f1 },
        "rationale": { "precision": m.rationale.precision, "recall": m.rationale.recall, "f1": m.rationale.f1 },
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
    })
}

pub fn to_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json output");
    s.push('\n');
    s
}
