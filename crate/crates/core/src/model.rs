//! The assembled detector: encoder, adapters, gate, selector and heads over
//! one parameter store, plus per-user preparation and inference.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, AdapterSet, Fusion, FusionVariant};
use crate::corpus::UserTimeline;
use crate::datagen::SplitMix64;
use crate::encoder::{EncodeError, Encoder, EncoderConfig, TokenIndex, Vocab};
use crate::explain::SummaryAdapter;
use crate::numeric::{softmax, sigmoid, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::rationale::{self, RationaleMask, Selector, SelectorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub summary_hidden: usize,
    pub summary_dim: usize,
    pub campaigns: Vec<String>,
}

/// A user timeline mapped to ids, with every gold label the losses need.
#[derive(Debug, Clone)]
pub struct Example {
    pub user_id: String,
    pub troll: bool,
    pub campaign: Option<usize>,
    pub posts: Vec<Vec<u32>>,
    pub index: TokenIndex,
    /// Appraisal tag index of each kept token.
    pub token_tags: Vec<usize>,
    /// Whether each kept token lies in a gold span.
    pub token_gold: Vec<bool>,
    pub post_propaganda: Vec<bool>,
    pub post_strategy: Vec<Option<usize>>,
}

impl Example {
    pub fn from_user(user: &UserTimeline, vocab: &Vocab, campaigns: &[String], max_tokens: usize) -> Self {
        let posts = vocab.encode_timeline(user);
        let index = TokenIndex::build(&posts, max_tokens);
        let mut token_tags = Vec::with_capacity(index.len());
        let mut token_gold = Vec::with_capacity(index.len());
        for &(j, o) in &index.positions {
            let post = &user.posts[j];
            token_tags.push(post.appraisal_tags[o].index());
            token_gold.push(post.gold_spans.iter().any(|&[s, e]| o >= s && o < e));
        }
        Example {
            user_id: user.user_id.clone(),
            troll: user.is_troll(),
            campaign: user.campaign.as_ref().and_then(|c| campaigns.iter().position(|x| x == c)),
            posts,
            index,
            token_tags,
            token_gold,
            post_propaganda: user.posts.iter().map(|p| p.propaganda == 1).collect(),
            post_strategy: user.posts.iter().map(|p| p.strategy.map(|s| s.index())).collect(),
        }
    }
}

/// Frozen-encoder outputs for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub post_states: Tensor,
    pub pooled: Tensor,
    pub token_states: Tensor,
}

/// How the rationale embedding is formed in the joint forward pass.
#[derive(Debug, Clone, Copy)]
pub enum PoolMode<'a> {
    /// Score-weighted mean over all tokens (differentiable).
    Soft,
    /// Mean over the DP-selected tokens.
    Hard(&'a SelectorConfig),
}

pub struct JointOutput {
    pub fusion: Fusion,
    pub task_logit: Var,
    pub rationale_logit: Var,
    pub troll_logit: Var,
    pub campaign_logits: Var,
    /// `n × 1` token scores.
    pub scores: Var,
    pub rationale: Var,
    pub mask: Option<RationaleMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub user_id: String,
    pub troll_prob: f64,
    pub troll: bool,
    pub campaign: usize,
    pub campaign_probs: Vec<f64>,
    pub alpha: [f64; 4],
    pub scores: Vec<f64>,
    pub mask: RationaleMask,
    pub rationale: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub adapters: AdapterSet,
    pub selector: Selector,
    pub summary: SummaryAdapter,
    /// Phase B tensors as they stood after Phase A, for retraining variants.
    pub phase_a: Vec<(ParamId, Tensor)>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, TensorError> {
        let mut cfg = config;
        cfg.encoder.vocab_size = vocab.len();
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let d = cfg.encoder.d_model;
        let encoder = Encoder::register(&mut store, cfg.encoder.clone(), &mut rng);
        let adapters = AdapterSet::register(&mut store, d, cfg.lora_rank, cfg.lora_scale, cfg.campaigns.len(), &mut rng)?;
        let selector = Selector::register(&mut store, d, &mut rng);
        let summary = SummaryAdapter::register(&mut store, d, cfg.summary_hidden, cfg.summary_dim, &mut rng);
        Ok(Model { config: cfg, vocab, store, encoder, adapters, selector, summary, phase_a: Vec::new() })
    }

    pub fn d_model(&self) -> usize {
        self.config.encoder.d_model
    }

    pub fn example(&self, user: &UserTimeline) -> Example {
        Example::from_user(user, &self.vocab, &self.config.campaigns, self.config.encoder.max_tokens)
    }

    pub fn encode(&self, ex: &Example) -> Result<Encoded, EncodeError> {
        let mut tape = Tape::new();
        let posts = self.encoder.encode_posts(&mut tape, &self.store, &ex.posts)?;
        let tokens = self.encoder.encode_tokens(&mut tape, &self.store, &ex.index)?;
        Ok(Encoded {
            post_states: tape.value(posts.states).clone(),
            pooled: tape.value(posts.pooled).clone(),
            token_states: tape.value(tokens).clone(),
        })
    }

    /// Parameters Phase B may update for a fusion variant.
    pub fn joint_trainable(&self, variant: FusionVariant) -> Vec<ParamId> {
        let active = variant.active();
        let mut ids = Vec::new();
        if active.contains(&AdapterKind::Task) {
            ids.extend(self.adapters.adapter(AdapterKind::Task).trainable());
        }
        if variant.gated() {
            ids.extend(self.adapters.gate.params());
        }
        ids.extend(self.selector.params());
        ids.extend(self.adapters.heads.task.params());
        ids.extend(self.adapters.heads.campaign.params());
        ids
    }

    /// Every tensor Phase B can modify under any variant.
    pub fn joint_params_all(&self) -> Vec<ParamId> {
        self.joint_trainable(FusionVariant::Full)
    }

    /// Fused troll and campaign logits with the rationale path.
    pub fn joint_forward(
        &self,
        tape: &mut Tape,
        enc: &Encoded,
        variant: FusionVariant,
        mode: PoolMode<'_>,
    ) -> Result<JointOutput, TensorError> {
        let store = &self.store;
        let pooled = tape.constant(enc.pooled.clone());
        let tokens = tape.constant(enc.token_states.clone());
        let fusion = self.adapters.fuse(tape, store, pooled, variant)?;
        let task_logit = self.adapters.heads.task.forward(tape, store, fusion.combined)?;
        let campaign_logits = self.adapters.heads.campaign.forward(tape, store, fusion.combined)?;
        let scores = self.selector.score_tokens(tape, store, tokens)?;
        let (rationale, mask) = match mode {
            PoolMode::Soft => (rationale::soft_rationale_pool(tape, tokens, scores)?, None),
            PoolMode::Hard(cfg) => {
                let mask = rationale::select_mask_dp(tape.value(scores).data(), cfg);
                let h = rationale::pool_rationale(&enc.token_states, &mask)?;
                let d = h.len();
                (tape.constant(Tensor::new(vec![1, d], h)?), Some(mask))
            }
        };
        let rationale_logit = self.selector.classifier.forward(tape, store, rationale)?;
        let troll_logit = tape.add(task_logit, rationale_logit)?;
        Ok(JointOutput { fusion, task_logit, rationale_logit, troll_logit, campaign_logits, scores, rationale, mask })
    }

    pub fn predict(
        &self,
        ex: &Example,
        enc: &Encoded,
        variant: FusionVariant,
        sel: &SelectorConfig,
    ) -> Result<Prediction, TensorError> {
        let mut tape = Tape::new();
        let out = self.joint_forward(&mut tape, enc, variant, PoolMode::Hard(sel))?;
        let troll_prob = sigmoid(tape.value(out.troll_logit).data()[0]);
        let campaign_probs = softmax(tape.value(out.campaign_logits).data())?;
        let campaign = argmax(&campaign_probs);
        Ok(Prediction {
            user_id: ex.user_id.clone(),
            troll_prob,
            troll: troll_prob > 0.5,
            campaign,
            campaign_probs,
            alpha: out.fusion.alpha,
            scores: tape.value(out.scores).data().to_vec(),
            mask: out.mask.expect("hard mode selects a mask"),
            rationale: tape.value(out.rationale).data().to_vec(),
        })
    }

    /// Adapter-head output for one pooled row, used by the explanation step.
    pub fn head_probs(&self, kind: AdapterKind, row: &[f64]) -> Result<Vec<f64>, TensorError> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, row.len()], row.to_vec())?);
        let h = self.adapters.adapter(kind).forward_rows(&mut tape, &self.store, x)?;
        let z = self.adapters.heads.for_kind(kind).forward(&mut tape, &self.store, h)?;
        let z = tape.value(z).data().to_vec();
        if z.len() == 1 {
            Ok(vec![sigmoid(z[0])])
        } else {
            softmax(&z)
        }
    }
}

/// First index of the maximum; NaN entries are skipped.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] || v[best].is_nan() {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_corpus, GenConfig};
    use crate::encoder::Pooling;

    pub(crate) fn tiny_model() -> (Model, Vec<UserTimeline>) {
        let cfg = GenConfig {
            troll_users_per_campaign: 2,
            nontroll_users_per_campaign: 2,
            min_posts: 2,
            max_posts: 3,
            ..GenConfig::default()
        };
        let users = gen_corpus(&cfg).unwrap().users;
        let vocab = Vocab::from_corpus(&users);
        let mc = ModelConfig {
            encoder: EncoderConfig { d_model: 8, ff_hidden: 8, max_tokens: 40, pooling: Pooling::Attention, ..EncoderConfig::default() },
            lora_rank: 2,
            lora_scale: 1.0,
            summary_hidden: 4,
            summary_dim: 6,
            campaigns: crate::datagen::campaign_names(),
        };
        (Model::new(mc, vocab, 3).unwrap(), users)
    }

    #[test]
    fn example_labels_align() {
        let (m, users) = tiny_model();
        for u in &users {
            let ex = m.example(u);
            assert_eq!(ex.token_tags.len(), ex.index.len());
            assert_eq!(ex.troll, ex.campaign.is_some());
            let gold = ex.token_gold.iter().filter(|&&g| g).count();
            assert!(gold <= ex.index.len());
        }
    }

    #[test]
    fn untrained_prediction_is_uniform_gate() {
        let (m, users) = tiny_model();
        let ex = m.example(&users[0]);
        let enc = m.encode(&ex).unwrap();
        let p = m.predict(&ex, &enc, FusionVariant::Full, &SelectorConfig::default()).unwrap();
        assert_eq!(p.alpha, [0.25; 4]);
        assert!((p.campaign_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p.scores.len(), ex.index.len());
    }

    #[test]
    fn argmax_first_max() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[f64::NAN, 0.2]), 1);
    }
}
