//! Timeline encoder.
//!
//! Posts are embedded as `ReLU(dense(mean token embedding))`, position
//! embeddings are added by post index, and one single-head Transformer layer
//! (attention, residual, layer norm, feed-forward, residual, layer norm) runs
//! over the post sequence. The same layer runs over the concatenated token
//! sequence, each token entering as a one-token post, to produce the
//! token-level states the rationale selector scores.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::UserTimeline;
use crate::datagen::SplitMix64;
use crate::layers::{LayerNorm, Linear};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const RAT: u32 = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[RAT]"];

/// Token string ↔ id bijection with four reserved ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved ids first, then every corpus token in sorted order.
    pub fn from_corpus(users: &[UserTimeline]) -> Self {
        let words: BTreeSet<&str> = users
            .iter()
            .flat_map(|u| &u.posts)
            .flat_map(|p| &p.tokens)
            .map(String::as_str)
            .filter(|w| !RESERVED.contains(w))
            .collect();
        let tokens = RESERVED.iter().copied().chain(words).map(str::to_string).collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_timeline(&self, user: &UserTimeline) -> Vec<Vec<u32>> {
        user.posts.iter().map(|p| p.tokens.iter().map(|t| self.id(t)).collect()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Attention,
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub ff_hidden: usize,
    pub max_tokens: usize,
    /// Rows of the post-position table; later posts share the last row.
    pub max_positions: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 4,
            d_model: 32,
            ff_hidden: 64,
            max_tokens: 256,
            max_positions: 32,
            pooling: Pooling::Attention,
        }
    }
}

/// One single-head post-norm Transformer encoder layer.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    d_model: usize,
}

pub struct LayerOutput {
    pub states: Var,
    /// Row-stochastic attention matrix.
    pub attention: Var,
}

impl TransformerLayer {
    pub fn register(store: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut SplitMix64) -> Self {
        let b = crate::layers::xavier_bound(d, d);
        let mut sq = |store: &mut ParamStore, n: &str| {
            store.add(format!("{name}.{n}"), Tensor::uniform(&[d, d], -b, b, rng), true)
        };
        let wq = sq(store, "wq");
        let wk = sq(store, "wk");
        let wv = sq(store, "wv");
        let wo = sq(store, "wo");
        TransformerLayer {
            wq,
            wk,
            wv,
            wo,
            norm1: LayerNorm::register(store, &format!("{name}.norm1"), d),
            ff1: Linear::register(store, &format!("{name}.ff1"), d, ff, rng),
            ff2: Linear::register(store, &format!("{name}.ff2"), ff, d, rng),
            norm2: LayerNorm::register(store, &format!("{name}.norm2"), d),
            d_model: d,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<LayerOutput, TensorError> {
        let (wq, wk, wv, wo) = (
            tape.param(store, self.wq),
            tape.param(store, self.wk),
            tape.param(store, self.wv),
            tape.param(store, self.wo),
        );
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.d_model as f64).sqrt());
        let attention = tape.softmax_rows(scores)?;
        let mixed = tape.matmul(attention, v)?;
        let out = tape.matmul(mixed, wo)?;
        let res1 = tape.add(x, out)?;
        let h1 = self.norm1.forward(tape, store, res1)?;
        let f = self.ff1.forward(tape, store, h1)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, store, f)?;
        let res2 = tape.add(h1, f)?;
        let states = self.norm2.forward(tape, store, res2)?;
        Ok(LayerOutput { states, attention })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.wq, self.wk, self.wv, self.wo];
        p.extend(self.norm1.params());
        p.extend(self.ff1.params());
        p.extend(self.ff2.params());
        p.extend(self.norm2.params());
        p
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub post_dense: Linear,
    pub layer: TransformerLayer,
    pub query: ParamId,
}

/// Post-level encoding of one timeline, recorded on a tape.
pub struct PostEncoding {
    pub states: Var,
    pub pooled: Var,
    pub pool_weights: Option<Var>,
    pub attention: Var,
}

/// Token positions kept after truncation, mapped back to their posts.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenIndex {
    /// `(post, offset within post)` of each kept token, in timeline order.
    pub positions: Vec<(usize, usize)>,
    pub ids: Vec<u32>,
}

impl TokenIndex {
    /// Concatenates posts, keeping the earliest `max_tokens` tokens.
    pub fn build(posts: &[Vec<u32>], max_tokens: usize) -> Self {
        let mut positions = Vec::new();
        let mut ids = Vec::new();
        'outer: for (j, post) in posts.iter().enumerate() {
            for (o, &id) in post.iter().enumerate() {
                if ids.len() == max_tokens {
                    break 'outer;
                }
                positions.push((j, o));
                ids.push(id);
            }
        }
        TokenIndex { positions, ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Half-width of the uniform token and position embedding init.
pub const EMBEDDING_INIT: f64 = 0.01;

impl Encoder {
    pub fn register(store: &mut ParamStore, config: EncoderConfig, rng: &mut SplitMix64) -> Self {
        let d = config.d_model;
        // Small embedding init: large random rows let rare filler words
        // separate training users before the marker words are learned.
        let token_embedding = store.add(
            "encoder.token_embedding",
            Tensor::uniform(&[config.vocab_size, d], -EMBEDDING_INIT, EMBEDDING_INIT, rng),
            true,
        );
        let position_embedding = store.add(
            "encoder.position_embedding",
            Tensor::uniform(&[config.max_positions, d], -EMBEDDING_INIT, EMBEDDING_INIT, rng),
            true,
        );
        let post_dense = Linear::register(store, "encoder.post_dense", d, d, rng);
        let layer = TransformerLayer::register(store, "encoder.layer", d, config.ff_hidden, rng);
        let query = store.add("encoder.query", Tensor::uniform(&[d], -0.1, 0.1, rng), true);
        Encoder { config, token_embedding, position_embedding, post_dense, layer, query }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.token_embedding, self.position_embedding];
        p.extend(self.post_dense.params());
        p.extend(self.layer.params());
        p.push(self.query);
        p
    }

    /// `ReLU(dense(mean of token embeddings))` for each post, one row per post.
    pub fn embed_posts(&self, tape: &mut Tape, store: &ParamStore, posts: &[Vec<u32>]) -> Result<Var, EncodeError> {
        if posts.is_empty() {
            return Err(EncodeError::Empty("timeline"));
        }
        if posts.iter().any(Vec::is_empty) {
            return Err(EncodeError::Empty("post"));
        }
        let ids: Vec<usize> = posts.iter().flatten().map(|&i| i as usize).collect();
        let table = tape.param(store, self.token_embedding);
        let emb = tape.gather_rows(table, &ids)?;
        let mut avg = vec![0.0; posts.len() * ids.len()];
        let mut col = 0;
        for (j, p) in posts.iter().enumerate() {
            let w = 1.0 / p.len() as f64;
            for _ in p {
                avg[j * ids.len() + col] = w;
                col += 1;
            }
        }
        let avg = tape.constant(Tensor::matrix(posts.len(), ids.len(), avg)?);
        let mean = tape.matmul(avg, emb)?;
        let dense = self.post_dense.forward(tape, store, mean)?;
        Ok(tape.relu(dense))
    }

    fn add_positions(&self, tape: &mut Tape, store: &ParamStore, x: Var, post_index: &[usize]) -> Result<Var, EncodeError> {
        let last = self.config.max_positions - 1;
        let idx: Vec<usize> = post_index.iter().map(|&j| j.min(last)).collect();
        let table = tape.param(store, self.position_embedding);
        let pos = tape.gather_rows(table, &idx)?;
        Ok(tape.add(x, pos)?)
    }

    /// Post states `H_u`, their pooled summary `t_u`, and the pooling weights.
    pub fn encode_posts(&self, tape: &mut Tape, store: &ParamStore, posts: &[Vec<u32>]) -> Result<PostEncoding, EncodeError> {
        let x = self.embed_posts(tape, store, posts)?;
        let index: Vec<usize> = (0..posts.len()).collect();
        let x = self.add_positions(tape, store, x, &index)?;
        let out = self.layer.forward(tape, store, x)?;
        let (pooled, pool_weights) = self.pool(tape, store, out.states)?;
        Ok(PostEncoding { states: out.states, pooled, pool_weights, attention: out.attention })
    }

    pub fn pool(&self, tape: &mut Tape, store: &ParamStore, states: Var) -> Result<(Var, Option<Var>), EncodeError> {
        Ok(match self.config.pooling {
            Pooling::Attention => {
                let q = tape.param(store, self.query);
                let (w, pooled) = attention_pool(tape, states, q)?;
                (pooled, Some(w))
            }
            Pooling::Mean => (tape.mean_rows(states)?, None),
            Pooling::Max => (tape.max_rows(states)?, None),
        })
    }

    /// Token-level contextual states over the truncated concatenated timeline.
    pub fn encode_tokens(&self, tape: &mut Tape, store: &ParamStore, index: &TokenIndex) -> Result<Var, EncodeError> {
        if index.is_empty() {
            return Err(EncodeError::Empty("timeline"));
        }
        let singles: Vec<Vec<u32>> = index.ids.iter().map(|&i| vec![i]).collect();
        let x = self.embed_posts(tape, store, &singles)?;
        let post_index: Vec<usize> = index.positions.iter().map(|&(j, _)| j).collect();
        let x = self.add_positions(tape, store, x, &post_index)?;
        Ok(self.layer.forward(tape, store, x)?.states)
    }
}

/// `α = softmax(H q)`, `t = αᵀ H`; returns `(α as 1×n, t as 1×d)`.
pub fn attention_pool(tape: &mut Tape, states: Var, query: Var) -> Result<(Var, Var), TensorError> {
    let d = tape.value(query).len();
    let q = tape.reshape(query, &[d, 1])?;
    let logits = tape.matmul(states, q)?;
    let n = tape.value(logits).len();
    let logits = tape.reshape(logits, &[1, n])?;
    let weights = tape.softmax_rows(logits)?;
    let pooled = tape.matmul(weights, states)?;
    Ok((weights, pooled))
}
