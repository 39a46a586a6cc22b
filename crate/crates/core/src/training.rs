//! Losses, stratified splits, metrics and the two-phase training protocol.
//!
//! Phase A trains each adapter against its own supervision: the task adapter
//! first, together with the encoder, which is frozen afterwards; then the
//! appraisal, propaganda-identification and strategy adapters on cached
//! encoder states. Phase B freezes the knowledge adapters and trains the
//! task adapter, gate, selector and classifier heads jointly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterKind, FusionVariant};
use crate::corpus::{AppraisalTag, StrategyClass, UserTimeline};
use crate::datagen::SplitMix64;
use crate::encoder::EncodeError;
use crate::model::{Encoded, Example, Model, PoolMode, Prediction};
use crate::numeric::{sigmoid, AdamW, AdamWConfig, ParamId, Result, Tape, Tensor, TensorError, Var, LOG_EPS};
use crate::rationale::{self, SelectorConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

// ---------------------------------------------------------------- losses

/// Mean binary cross-entropy of probabilities against 0/1 targets.
pub fn bce(tape: &mut Tape, probs: Var, targets: &[f64]) -> Result<Var> {
    let n = tape.value(probs).len();
    if n != targets.len() || n == 0 {
        return Err(TensorError::Contract(format!("bce: {n} predictions for {} targets", targets.len())));
    }
    let shape = tape.value(probs).shape().to_vec();
    let y = tape.constant(Tensor::new(shape.clone(), targets.to_vec())?);
    let not_y = tape.constant(Tensor::new(shape, targets.iter().map(|t| 1.0 - t).collect())?);
    let lp = tape.log_clamped(probs, LOG_EPS);
    let neg = tape.scale(probs, -1.0);
    let q = tape.add_const(neg, 1.0);
    let lq = tape.log_clamped(q, LOG_EPS);
    let a = tape.mul(y, lp)?;
    let b = tape.mul(not_y, lq)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s);
    Ok(tape.scale(total, -1.0 / n as f64))
}

pub fn bce_logits(tape: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    let p = tape.sigmoid(logits);
    bce(tape, p, targets)
}

/// Mean categorical cross-entropy of probability rows `N×C`.
pub fn cross_entropy_probs(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.value(probs).dims2();
    if n != labels.len() || n == 0 {
        return Err(TensorError::Contract(format!("cross_entropy: {n} rows for {} labels", labels.len())));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(TensorError::Contract(format!("cross_entropy: label {l} outside {c} classes")));
        }
        onehot[i * c + l] = 1.0;
    }
    let y = tape.constant(Tensor::new(vec![n, c], onehot)?);
    let lp = tape.log_clamped(probs, LOG_EPS);
    let picked = tape.mul(y, lp)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.value(logits).dims2();
    let logits = tape.reshape(logits, &[n, c])?;
    let p = tape.softmax_rows(logits)?;
    cross_entropy_probs(tape, p, labels)
}

/// Mean per-token cross-entropy; `None` labels are padding and excluded.
pub fn appraisal_loss(tape: &mut Tape, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
    let (n, _) = tape.value(logits).dims2();
    if n != labels.len() {
        return Err(TensorError::Contract(format!("appraisal_loss: {n} token rows for {} labels", labels.len())));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| labels[i].is_some()).collect();
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let kept: Vec<usize> = rows.iter().map(|&i| labels[i].unwrap()).collect();
    let picked = tape.gather_rows(logits, &rows)?;
    cross_entropy(tape, picked, &kept)
}

// ---------------------------------------------------------------- splits

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl Split {
    /// 70:10:20 within every (troll, campaign) stratum. Parts keep corpus order.
    pub fn stratified(users: &[UserTimeline], seed: u64) -> Self {
        let mut strata: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
        for (i, u) in users.iter().enumerate() {
            let key = if u.is_troll() { Some(u.campaign.as_deref().unwrap_or("")) } else { None };
            strata.entry(key).or_default().push(i);
        }
        let mut rng = SplitMix64::new(seed ^ 0x5EED_5EED_0000_0001);
        let mut part = vec![SplitPart::Test; users.len()];
        for members in strata.values_mut() {
            rng.shuffle(members);
            let n = members.len();
            let n_train = (0.7 * n as f64).round() as usize;
            let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
            for (r, &i) in members.iter().enumerate() {
                part[i] = if r < n_train {
                    SplitPart::Train
                } else if r < n_train + n_val {
                    SplitPart::Validation
                } else {
                    SplitPart::Test
                };
            }
        }
        let pick = |p: SplitPart| users.iter().zip(&part).filter(|(_, &q)| q == p).map(|(u, _)| u.user_id.clone()).collect();
        Split { train: pick(SplitPart::Train), validation: pick(SplitPart::Validation), test: pick(SplitPart::Test) }
    }

    pub fn part(&self, p: SplitPart) -> &[String] {
        match p {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, predicted: bool, gold: bool) {
        match (predicted, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    pub fn scores(&self) -> BinaryScores {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if self.tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        BinaryScores { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// One-vs-rest F1 averaged over `classes`.
pub fn macro_f1(predicted: &[usize], gold: &[usize], classes: usize) -> f64 {
    if classes == 0 {
        return 0.0;
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let mut k = Counts::default();
            for (&p, &g) in predicted.iter().zip(gold) {
                k.add(p == c, g == c);
            }
            k.scores().f1
        })
        .sum();
    total / classes as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub troll: BinaryScores,
    pub campaign_macro_f1: f64,
    pub rationale: BinaryScores,
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Phase B epochs.
    pub epochs: usize,
    /// Epochs for each Phase A adapter.
    pub phase_a_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Divide the soft continuity penalty by the timeline length.
    pub normalize_continuity: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            epochs: 10,
            phase_a_epochs: 10,
            patience: 2,
            batch_size: 8,
            seed: 42,
            normalize_continuity: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.patience > self.epochs.max(self.phase_a_epochs).max(1) {
            return bad("patience must not exceed epochs");
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() })
    }
}

// ---------------------------------------------------------------- data

/// Examples, their split membership and (after Phase A) frozen encodings.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn new(model: &Model, users: &[UserTimeline], split: &Split) -> Self {
        let examples: Vec<Example> = users.iter().map(|u| model.example(u)).collect();
        let pos: BTreeMap<&str, usize> = examples.iter().enumerate().map(|(i, e)| (e.user_id.as_str(), i)).collect();
        let idx = |ids: &[String]| ids.iter().filter_map(|id| pos.get(id.as_str()).copied()).collect();
        Dataset { train: idx(&split.train), validation: idx(&split.validation), test: idx(&split.test), examples }
    }

    pub fn part(&self, p: SplitPart) -> &[usize] {
        match p {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }
}

pub fn encode_all(model: &Model, data: &Dataset) -> std::result::Result<Vec<Encoded>, EncodeError> {
    data.examples.iter().map(|e| model.encode(e)).collect()
}

// ---------------------------------------------------------------- loop

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub name: String,
    /// Mean per-user training loss of each completed epoch.
    pub epoch_loss: Vec<f64>,
    /// Validation score after each epoch (higher is better).
    pub validation: Vec<f64>,
    /// 1-based epoch whose snapshot was kept; 0 means the initial state.
    pub best_epoch: usize,
}

/// Mini-batch AdamW over `order`, early stopping on `score`.
///
/// Each user gets its own tape; losses are divided by the batch size and
/// gradients accumulate in the store. Returns with the best snapshot
/// restored. Ties keep the earlier snapshot.
#[allow(clippy::too_many_arguments)]
fn run_phase<L, S>(
    model: &mut Model,
    name: &str,
    trainable: &[ParamId],
    order: &[usize],
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
    loss: L,
    score: S,
) -> std::result::Result<PhaseLog, TrainError>
where
    L: Fn(&Model, &mut Tape, usize) -> std::result::Result<Var, TrainError>,
    S: Fn(&Model) -> std::result::Result<f64, TrainError>,
{
    model.store.set_trainable(trainable);
    model.store.zero_grads();
    let mut opt = cfg.optimizer();
    let mut log = PhaseLog { name: name.to_string(), ..PhaseLog::default() };
    let mut best: Option<(f64, Vec<(ParamId, Tensor)>)> = None;
    let mut stale = 0;
    let mut order = order.to_vec();
    for epoch in 1..=epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let mut tape = Tape::new();
                let l = loss(model, &mut tape, i)?;
                total += tape.value(l).data()[0];
                let scaled = tape.scale(l, 1.0 / batch.len() as f64);
                tape.backward_into(scaled, &mut model.store)?;
            }
            opt.step(&mut model.store)?;
        }
        log.epoch_loss.push(total / order.len().max(1) as f64);
        let s = score(model)?;
        log.validation.push(s);
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, model.store.snapshot(trainable)));
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, snap)) = best {
        model.store.restore(&snap);
    }
    model.store.set_trainable(&[]);
    Ok(log)
}

// ---------------------------------------------------------------- Phase A

fn troll_target(ex: &Example) -> f64 {
    if ex.troll {
        1.0
    } else {
        0.0
    }
}

/// Task-adapter pre-pass loss; trains the encoder as well.
pub fn task_prepass_loss(model: &Model, tape: &mut Tape, ex: &Example) -> std::result::Result<Var, TrainError> {
    let (logit, campaign) = task_prepass_forward(model, tape, ex)?;
    let mut l = bce_logits(tape, logit, &[troll_target(ex)])?;
    if let Some(c) = ex.campaign {
        let ce = cross_entropy(tape, campaign, &[c])?;
        l = tape.add(l, ce)?;
    }
    Ok(l)
}

fn task_prepass_forward(model: &Model, tape: &mut Tape, ex: &Example) -> std::result::Result<(Var, Var), TrainError> {
    let enc = model.encoder.encode_posts(tape, &model.store, &ex.posts)?;
    let h = model.adapters.adapter(AdapterKind::Task).forward_rows(tape, &model.store, enc.pooled)?;
    let logit = model.adapters.heads.task.forward(tape, &model.store, h)?;
    let campaign = model.adapters.heads.campaign.forward(tape, &model.store, h)?;
    Ok((logit, campaign))
}

pub fn appraisal_adapter_loss(model: &Model, tape: &mut Tape, ex: &Example, enc: &Encoded) -> Result<Var> {
    let x = tape.constant(enc.token_states.clone());
    let h = model.adapters.adapter(AdapterKind::Appraisal).forward_rows(tape, &model.store, x)?;
    let z = model.adapters.heads.appraisal.forward(tape, &model.store, h)?;
    let labels: Vec<Option<usize>> = ex.token_tags.iter().map(|&t| Some(t)).collect();
    appraisal_loss(tape, z, &labels)
}

pub fn prop_id_adapter_loss(model: &Model, tape: &mut Tape, ex: &Example, enc: &Encoded) -> Result<Var> {
    let x = tape.constant(enc.post_states.clone());
    let h = model.adapters.adapter(AdapterKind::PropagandaId).forward_rows(tape, &model.store, x)?;
    let z = model.adapters.heads.prop_id.forward(tape, &model.store, h)?;
    let y: Vec<f64> = ex.post_propaganda.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    bce_logits(tape, z, &y)
}

/// Strategy loss over the user's propaganda posts; the user must have one.
pub fn strategy_adapter_loss(model: &Model, tape: &mut Tape, ex: &Example, enc: &Encoded) -> Result<Var> {
    let rows: Vec<usize> = (0..ex.post_strategy.len()).filter(|&j| ex.post_strategy[j].is_some()).collect();
    let labels: Vec<usize> = rows.iter().map(|&j| ex.post_strategy[j].unwrap()).collect();
    let x = tape.constant(enc.post_states.clone());
    let x = tape.gather_rows(x, &rows)?;
    let h = model.adapters.adapter(AdapterKind::PropagandaStrategy).forward_rows(tape, &model.store, x)?;
    let z = model.adapters.heads.strategy.forward(tape, &model.store, h)?;
    cross_entropy(tape, z, &labels)
}

fn has_strategy(ex: &Example) -> bool {
    ex.post_strategy.iter().any(Option::is_some)
}

fn knowledge_loss(kind: AdapterKind, model: &Model, tape: &mut Tape, ex: &Example, enc: &Encoded) -> Result<Var> {
    match kind {
        AdapterKind::Appraisal => appraisal_adapter_loss(model, tape, ex, enc),
        AdapterKind::PropagandaId => prop_id_adapter_loss(model, tape, ex, enc),
        AdapterKind::PropagandaStrategy => strategy_adapter_loss(model, tape, ex, enc),
        AdapterKind::Task => Err(TensorError::Contract("the task adapter has no knowledge loss".into())),
    }
}

/// Troll F1 of the pre-pass classifier on the given users.
fn prepass_f1(model: &Model, data: &Dataset, part: &[usize]) -> std::result::Result<f64, TrainError> {
    let mut k = Counts::default();
    for &i in part {
        let ex = &data.examples[i];
        let mut tape = Tape::new();
        let (logit, _) = task_prepass_forward(model, &mut tape, ex)?;
        k.add(sigmoid(tape.value(logit).data()[0]) > 0.5, ex.troll);
    }
    Ok(k.scores().f1)
}

fn rng_stream(seed: u64, tag: u64) -> SplitMix64 {
    SplitMix64::new(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Phase A: task pre-pass with the encoder, then each knowledge adapter.
pub fn train_phase_a(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
) -> std::result::Result<(Vec<PhaseLog>, Vec<Encoded>), TrainError> {
    let mut logs = Vec::new();
    let mut rng = rng_stream(cfg.seed, 1);

    let mut trainable = model.encoder.params();
    trainable.extend(model.adapters.adapter(AdapterKind::Task).trainable());
    trainable.extend(model.adapters.heads.task.params());
    trainable.extend(model.adapters.heads.campaign.params());
    logs.push(run_phase(
        model,
        "task",
        &trainable,
        &data.train,
        cfg.phase_a_epochs,
        cfg,
        &mut rng,
        |m, t, i| task_prepass_loss(m, t, &data.examples[i]),
        |m| prepass_f1(m, data, &data.validation),
    )?);

    let cache = encode_all(model, data)?;
    for kind in AdapterKind::KNOWLEDGE {
        let usable = |i: &usize| kind != AdapterKind::PropagandaStrategy || has_strategy(&data.examples[*i]);
        let train: Vec<usize> = data.train.iter().copied().filter(usable).collect();
        let val: Vec<usize> = data.validation.iter().copied().filter(usable).collect();
        let head = model.adapters.heads.for_kind(kind);
        let mut trainable = model.adapters.adapter(kind).trainable().to_vec();
        trainable.extend(head.params());
        let cache = &cache;
        logs.push(run_phase(
            model,
            kind.slug(),
            &trainable,
            &train,
            cfg.phase_a_epochs,
            cfg,
            &mut rng,
            |m, t, i| Ok(knowledge_loss(kind, m, t, &data.examples[i], &cache[i])?),
            |m| {
                let mut total = 0.0;
                for &i in &val {
                    let mut t = Tape::new();
                    let l = knowledge_loss(kind, m, &mut t, &data.examples[i], &cache[i])?;
                    total += t.value(l).data()[0];
                }
                Ok(-total / val.len().max(1) as f64)
            },
        )?);
    }
    model.phase_a = model.store.snapshot(&model.joint_params_all());
    Ok((logs, cache))
}

// ---------------------------------------------------------------- Phase B

/// Joint loss for one user: troll BCE, campaign CE for trolls, and the soft
/// continuity and sparsity penalties on token scores.
pub fn joint_loss(
    model: &Model,
    tape: &mut Tape,
    ex: &Example,
    enc: &Encoded,
    variant: FusionVariant,
    sel: &SelectorConfig,
    normalize_continuity: bool,
) -> Result<Var> {
    let out = model.joint_forward(tape, enc, variant, PoolMode::Soft)?;
    let mut l = bce_logits(tape, out.troll_logit, &[troll_target(ex)])?;
    if let Some(c) = ex.campaign {
        let ce = cross_entropy(tape, out.campaign_logits, &[c])?;
        l = tape.add(l, ce)?;
    }
    let cont = rationale::soft_continuity(tape, out.scores)?;
    let n = tape.value(out.scores).len() as f64;
    let w = if normalize_continuity { sel.lambda_c / n } else { sel.lambda_c };
    let cont = tape.scale(cont, w);
    let sparse = rationale::soft_sparsity(tape, out.scores)?;
    let sparse = tape.scale(sparse, sel.lambda_s);
    let l = tape.add(l, cont)?;
    tape.add(l, sparse)
}

/// Validation score for Phase B: troll F1, ties broken by campaign macro-F1.
fn joint_score(metrics: &Metrics) -> f64 {
    metrics.troll.f1 + 1e-3 * metrics.campaign_macro_f1
}

pub fn train_phase_b(
    model: &mut Model,
    data: &Dataset,
    cache: &[Encoded],
    variant: FusionVariant,
    cfg: &TrainConfig,
    sel: &SelectorConfig,
) -> std::result::Result<PhaseLog, TrainError> {
    let mut rng = rng_stream(cfg.seed, 2);
    let trainable = model.joint_trainable(variant);
    run_phase(
        model,
        &format!("joint:{}", variant.name()),
        &trainable,
        &data.train,
        cfg.epochs,
        cfg,
        &mut rng,
        |m, t, i| Ok(joint_loss(m, t, &data.examples[i], &cache[i], variant, sel, cfg.normalize_continuity)?),
        |m| Ok(joint_score(&evaluate(m, data, cache, &data.validation, variant, sel)?.0)),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phases: Vec<PhaseLog>,
}

/// Both phases in order; returns the logs and the frozen encodings.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    sel: &SelectorConfig,
) -> std::result::Result<(TrainReport, Vec<Encoded>), TrainError> {
    cfg.validate()?;
    sel.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let (mut phases, cache) = train_phase_a(model, data, cfg)?;
    phases.push(train_phase_b(model, data, &cache, FusionVariant::Full, cfg, sel)?);
    Ok((TrainReport { phases }, cache))
}

// ---------------------------------------------------------------- evaluation

/// Metrics over `part`. Campaign and rationale scores are computed on the
/// gold troll users of the part.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    cache: &[Encoded],
    part: &[usize],
    variant: FusionVariant,
    sel: &SelectorConfig,
) -> Result<(Metrics, Vec<Prediction>)> {
    let mut troll = Counts::default();
    let mut rat = Counts::default();
    let (mut cp, mut cg) = (Vec::new(), Vec::new());
    let mut preds = Vec::with_capacity(part.len());
    for &i in part {
        let ex = &data.examples[i];
        let p = model.predict(ex, &cache[i], variant, sel)?;
        troll.add(p.troll, ex.troll);
        if let Some(c) = ex.campaign {
            cp.push(p.campaign);
            cg.push(c);
            for (&m, &g) in p.mask.0.iter().zip(&ex.token_gold) {
                rat.add(m, g);
            }
        }
        preds.push(p);
    }
    let metrics = Metrics {
        troll: troll.scores(),
        campaign_macro_f1: macro_f1(&cp, &cg, model.config.campaigns.len()),
        rationale: rat.scores(),
    };
    Ok((metrics, preds))
}

/// Retrains Phase B from the stored Phase A state under `variant`.
pub fn ablate(
    model: &Model,
    data: &Dataset,
    cache: &[Encoded],
    variant: FusionVariant,
    cfg: &TrainConfig,
    sel: &SelectorConfig,
) -> std::result::Result<(Model, PhaseLog, Metrics), TrainError> {
    if model.phase_a.is_empty() {
        return Err(TrainError::Config("model carries no Phase A state".into()));
    }
    let mut m = model.clone();
    let snap = m.phase_a.clone();
    m.store.restore(&snap);
    let log = train_phase_b(&mut m, data, cache, variant, cfg, sel)?;
    let (metrics, _) = evaluate(&m, data, cache, &data.test, variant, sel)?;
    Ok((m, log, metrics))
}

/// Label sets the heads cover, for reporting.
pub fn label_names() -> (Vec<&'static str>, Vec<&'static str>) {
    let tags = AppraisalTag::ALL.iter().map(|t| t.label()).collect();
    let strategies = StrategyClass::ALL.iter().map(|s| s.phrase()).collect();
    (tags, strategies)
}

/// Distinct campaign names of the troll users, sorted.
pub fn corpus_campaigns(users: &[UserTimeline]) -> Vec<String> {
    let set: BTreeSet<&str> = users.iter().filter_map(|u| u.campaign.as_deref()).collect();
    set.into_iter().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(t: &Tape, v: Var) -> f64 {
        t.value(v).data()[0]
    }

    #[test]
    fn bce_examples() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::vector(vec![0.5]));
        let l = bce(&mut t, p, &[1.0]).unwrap();
        assert!((scalar(&t, l) - std::f64::consts::LN_2).abs() < 1e-12);
        let p = t.constant(Tensor::vector(vec![1e-15, 1.0 - 1e-15]));
        let l = bce(&mut t, p, &[0.0, 1.0]).unwrap();
        assert!(scalar(&t, l) < 1e-12);
    }

    #[test]
    fn bce_is_mean_of_samples() {
        let ps = [0.2, 0.7, 0.9];
        let ys = [0.0, 1.0, 0.0];
        let mut t = Tape::new();
        let p = t.constant(Tensor::vector(ps.to_vec()));
        let l = bce(&mut t, p, &ys).unwrap();
        let mut each = 0.0;
        for (p, y) in ps.iter().zip(ys) {
            let pv = t.constant(Tensor::vector(vec![*p]));
            let li = bce(&mut t, pv, &[y]).unwrap();
            each += scalar(&t, li);
        }
        assert!((scalar(&t, l) - each / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::matrix(1, 3, vec![1.0 / 3.0; 3]).unwrap());
        let l = cross_entropy_probs(&mut t, p, &[2]).unwrap();
        assert!((scalar(&t, l) - 3f64.ln()).abs() < 1e-12);
        let p = t.constant(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap());
        let l = cross_entropy_probs(&mut t, p, &[1]).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let z = vec![0.3, -1.2, 2.0];
        let mut t = Tape::new();
        let x = t.input(Tensor::matrix(1, 3, z.clone()).unwrap());
        let l = cross_entropy(&mut t, x, &[0]).unwrap();
        let g = t.backward(l).unwrap();
        let p = crate::numeric::softmax(&z).unwrap();
        let got = g.wrt(x).unwrap();
        for c in 0..3 {
            let want = p[c] - if c == 0 { 1.0 } else { 0.0 };
            assert!((got[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn appraisal_loss_excludes_padding() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::from_rows(&[vec![0.0; 5], vec![9.0, 0.0, 0.0, 0.0, 0.0]]).unwrap());
        let l = appraisal_loss(&mut t, z, &[Some(3), None]).unwrap();
        assert!((scalar(&t, l) - 5f64.ln()).abs() < 1e-12);
        assert!(appraisal_loss(&mut t, z, &[Some(3)]).is_err());
    }

    #[test]
    fn f1_conventions() {
        let k = Counts { tp: 2, fp: 1, fn_: 1 };
        assert!((k.scores().f1 - 2.0 / 3.0).abs() < 1e-12);
        let mut none = Counts::default();
        none.add(false, true);
        none.add(false, false);
        assert_eq!(none.scores().f1, 0.0);
        let mut all = Counts::default();
        all.add(true, true);
        all.add(false, false);
        assert_eq!(all.scores().f1, 1.0);
    }

    #[test]
    fn macro_f1_perfect_and_partial() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3), 1.0);
        let m = macro_f1(&[0, 0, 2], &[0, 1, 2], 3);
        assert!((m - (2.0 / 3.0 + 0.0 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let users = crate::datagen::gen_corpus(&crate::datagen::GenConfig::default()).unwrap().users;
        let s = Split::stratified(&users, 42);
        let all: BTreeSet<&String> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        assert_eq!(all.len(), users.len());
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (315, 45, 90));
        let by_id: BTreeMap<&str, &UserTimeline> = users.iter().map(|u| (u.user_id.as_str(), u)).collect();
        for c in ["A", "B", "C"] {
            let count = |ids: &[String]| ids.iter().filter(|id| by_id[id.as_str()].campaign.as_deref() == Some(c)).count();
            assert_eq!((count(&s.train), count(&s.validation), count(&s.test)), (35, 5, 10));
        }
        assert_eq!(s, Split::stratified(&users, 42));
        assert_ne!(s, Split::stratified(&users, 43));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 20, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
