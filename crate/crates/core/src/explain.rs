//! Explanation assembly: the E_A projection of the rationale embedding, a
//! fixed English template over the selected spans, and per-campaign gate
//! profiles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, FusionVariant};
use crate::corpus::{AppraisalTag, StrategyClass};
use crate::datagen::SplitMix64;
use crate::layers::xavier_bound;
use crate::model::{argmax, Encoded, Example, Model};
use crate::numeric::{ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};
use crate::rationale::{RationaleSet, SelectorConfig};

pub const FALLBACK_CLAUSE: &str = "no rationale tokens exceeded threshold";

/// `E_A(r) = W2·ReLU(W1 r + b1) + b2`, with `W1: h×d` and `W2: e×h`.
#[derive(Debug, Clone, Copy)]
pub struct SummaryAdapter {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SummaryAdapter {
    /// Seeded Glorot init; the projection is not trained.
    pub fn register(store: &mut ParamStore, d: usize, hidden: usize, out: usize, rng: &mut SplitMix64) -> Self {
        let b1 = xavier_bound(d, hidden);
        let b2 = xavier_bound(hidden, out);
        SummaryAdapter {
            w1: store.add("summary.w1", Tensor::uniform(&[hidden, d], -b1, b1, rng), false),
            b1: store.add("summary.b1", Tensor::zeros(&[hidden]), false),
            w2: store.add("summary.w2", Tensor::uniform(&[out, hidden], -b2, b2, rng), false),
            b2: store.add("summary.b2", Tensor::zeros(&[out]), false),
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Tape version over a `1×d` row.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, r: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let w1t = tape.transpose(w1);
        let w2t = tape.transpose(w2);
        let z = tape.matmul(r, w1t)?;
        let z = tape.add_row(z, b1)?;
        let a = tape.relu(z);
        let y = tape.matmul(a, w2t)?;
        tape.add_row(y, b2)
    }

    pub fn project_rationale(&self, store: &ParamStore, h_r: &[f64]) -> Result<Vec<f64>> {
        let d = store.value(self.w1).cols();
        if h_r.len() != d {
            return Err(TensorError::Shape { op: "project_rationale", lhs: vec![d], rhs: vec![h_r.len()] });
        }
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::new(vec![1, d], h_r.to_vec())?);
        let y = self.forward(&mut tape, store, r)?;
        Ok(tape.value(y).data().to_vec())
    }
}

/// One contiguous selected span with the heads' reading of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanEvidence {
    pub post: usize,
    pub token_indices: Vec<usize>,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub strategy: StrategyClass,
    pub strategy_prob: f64,
    pub appraisal_tags: Vec<AppraisalTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub user_id: String,
    pub troll: bool,
    pub troll_prob: f64,
    pub confidence: f64,
    pub campaign: Option<String>,
    pub campaign_prob: f64,
    pub gate_weights: [f64; 4],
    pub spans: Vec<SpanEvidence>,
    pub text: String,
    pub rationale_embedding: Vec<f64>,
}

/// Everything the template reads.
#[derive(Debug, Clone)]
pub struct ExplanationInputs<'a> {
    pub user_id: &'a str,
    pub troll: bool,
    pub confidence: f64,
    pub campaign: Option<&'a str>,
    pub gate_weights: [f64; 4],
    pub spans: &'a [SpanEvidence],
}

/// Verdict, dominant adapter, one sentence per span, fallback when empty.
pub fn assemble_explanation(inp: &ExplanationInputs<'_>) -> String {
    let mut s = String::new();
    if inp.troll {
        let _ = write!(s, "User {} is classified as a troll account (confidence {:.3})", inp.user_id, inp.confidence);
        if let Some(c) = inp.campaign {
            let _ = write!(s, ", most likely operating in campaign {c}");
        }
        s.push('.');
    } else {
        let _ = write!(s, "User {} is classified as a regular account (confidence {:.3}).", inp.user_id, inp.confidence);
    }
    let k = argmax(&inp.gate_weights);
    let _ = write!(
        s,
        " The {} adapter carries the largest gate weight ({:.3}).",
        AdapterKind::ALL[k].display_name(),
        inp.gate_weights[k]
    );
    if inp.spans.is_empty() {
        let _ = write!(s, " Evidence: {FALLBACK_CLAUSE}.");
    }
    for span in inp.spans {
        let tags = if span.appraisal_tags.is_empty() {
            "no appraisal tags".to_string()
        } else {
            let names: Vec<&str> = span.appraisal_tags.iter().map(|t| t.label()).collect();
            format!("appraisal tags {}", names.join(", "))
        };
        let _ = write!(
            s,
            " Span \"{}\" in post {} reads as {} (p = {:.3}) with {}.",
            span.tokens.join(" "),
            span.post,
            span.strategy.phrase(),
            span.strategy_prob,
            tags
        );
    }
    s
}

/// Full report for one user, from a single hard-selection forward pass.
pub fn explain_user(
    model: &Model,
    ex: &Example,
    enc: &Encoded,
    variant: FusionVariant,
    sel: &SelectorConfig,
) -> Result<ExplanationReport> {
    let pred = model.predict(ex, enc, variant, sel)?;
    let set = RationaleSet::from_mask(&pred.mask, &pred.scores, &ex.index, &model.vocab);
    let mut spans = Vec::new();
    for run in set.spans() {
        let post = run[0].post;
        let probs = model.head_probs(AdapterKind::PropagandaStrategy, enc.post_states.row(post))?;
        let top = argmax(&probs);
        let mut tags = Vec::new();
        for t in run {
            let p = model.head_probs(AdapterKind::Appraisal, enc.token_states.row(t.index))?;
            let tag = AppraisalTag::from_index(argmax(&p));
            if tag != AppraisalTag::O && !tags.contains(&tag) {
                tags.push(tag);
            }
        }
        tags.sort_by_key(|t| t.index());
        spans.push(SpanEvidence {
            post,
            token_indices: run.iter().map(|t| t.index).collect(),
            tokens: run.iter().map(|t| t.token.clone()).collect(),
            scores: run.iter().map(|t| t.score).collect(),
            strategy: StrategyClass::from_index(top),
            strategy_prob: probs[top],
            appraisal_tags: tags,
        });
    }
    let campaign = pred.troll.then(|| model.config.campaigns[pred.campaign].clone());
    let confidence = if pred.troll { pred.troll_prob } else { 1.0 - pred.troll_prob };
    let text = assemble_explanation(&ExplanationInputs {
        user_id: &ex.user_id,
        troll: pred.troll,
        confidence,
        campaign: campaign.as_deref(),
        gate_weights: pred.alpha,
        spans: &spans,
    });
    let rationale_embedding = model.summary.project_rationale(&model.store, &pred.rationale)?;
    Ok(ExplanationReport {
        user_id: ex.user_id.clone(),
        troll: pred.troll,
        troll_prob: pred.troll_prob,
        confidence,
        campaign,
        campaign_prob: pred.campaign_probs[pred.campaign],
        gate_weights: pred.alpha,
        spans,
        text,
        rationale_embedding,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingRow {
    pub campaign: String,
    pub weights: [f64; 4],
}

/// Mean gate weights per gold campaign over the given troll users.
pub fn gating_report(
    model: &Model,
    data: &[(&Example, &Encoded)],
    variant: FusionVariant,
    sel: &SelectorConfig,
) -> Result<Vec<GatingRow>> {
    let c = model.config.campaigns.len();
    let mut sums = vec![[0.0; 4]; c];
    let mut counts = vec![0usize; c];
    for (ex, enc) in data {
        let Some(k) = ex.campaign else { continue };
        let pred = model.predict(ex, enc, variant, sel)?;
        for (s, a) in sums[k].iter_mut().zip(pred.alpha) {
            *s += a;
        }
        counts[k] += 1;
    }
    Ok(model
        .config
        .campaigns
        .iter()
        .enumerate()
        .filter(|&(k, _)| counts[k] > 0)
        .map(|(k, name)| GatingRow { campaign: name.clone(), weights: sums[k].map(|s| s / counts[k] as f64) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(strategy: StrategyClass, tags: Vec<AppraisalTag>) -> SpanEvidence {
        SpanEvidence {
            post: 2,
            token_indices: vec![5, 6],
            tokens: vec!["loaded03".into(), "loaded07".into()],
            scores: vec![0.9, 0.8],
            strategy,
            strategy_prob: 0.77,
            appraisal_tags: tags,
        }
    }

    fn inputs<'a>(spans: &'a [SpanEvidence], troll: bool) -> ExplanationInputs<'a> {
        ExplanationInputs {
            user_id: "u0001",
            troll,
            confidence: 0.91,
            campaign: troll.then_some("A"),
            gate_weights: [0.1, 0.2, 0.6, 0.1],
            spans,
        }
    }

    #[test]
    fn empty_set_uses_fallback() {
        let t = assemble_explanation(&inputs(&[], true));
        assert!(t.contains(FALLBACK_CLAUSE));
        let t = assemble_explanation(&inputs(&[], false));
        assert!(t.contains(FALLBACK_CLAUSE));
    }

    #[test]
    fn names_strategy_once() {
        let spans = [span(StrategyClass::LoadedLanguage, vec![])];
        let t = assemble_explanation(&inputs(&spans, true));
        assert_eq!(t.matches("loaded language").count(), 1);
        assert!(!t.contains(FALLBACK_CLAUSE));
    }

    #[test]
    fn names_dominant_adapter_and_tags() {
        let spans = [span(StrategyClass::Doubt, vec![AppraisalTag::SentNeg, AppraisalTag::Persona])];
        let t = assemble_explanation(&inputs(&spans, true));
        assert!(t.contains("The propaganda strategy adapter carries the largest gate weight (0.600)."));
        assert!(t.contains("appraisal tags SENT_NEG, PERSONA"));
        assert!(t.contains("campaign A"));
    }

    #[test]
    fn byte_deterministic() {
        let spans = [span(StrategyClass::AppealToCommonality, vec![AppraisalTag::Ideational])];
        let a = assemble_explanation(&inputs(&spans, false));
        let b = assemble_explanation(&inputs(&spans, false));
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    fn summary(d: usize) -> (ParamStore, SummaryAdapter) {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(9);
        let s = SummaryAdapter::register(&mut store, d, 16, 32, &mut rng);
        (store, s)
    }

    #[test]
    fn zero_weights_project_to_zero() {
        let (mut store, s) = summary(5);
        store.set_value(s.w1, Tensor::zeros(&[16, 5])).unwrap();
        let y = s.project_rationale(&store, &[1.0, -2.0, 3.0, 0.5, 0.0]).unwrap();
        assert_eq!(y.len(), 32);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dead_hidden_layer_outputs_bias() {
        let (mut store, s) = summary(3);
        store.set_value(s.b1, Tensor::filled(&[16], -100.0)).unwrap();
        let b2 = Tensor::uniform(&[32], -1.0, 1.0, &mut SplitMix64::new(1));
        store.set_value(s.b2, b2.clone()).unwrap();
        let y = s.project_rationale(&store, &[0.3, 0.1, -0.2]).unwrap();
        assert_eq!(y, b2.data());
    }

    #[test]
    fn projection_rejects_wrong_length() {
        let (store, s) = summary(3);
        assert!(s.project_rationale(&store, &[1.0]).is_err());
    }
}
