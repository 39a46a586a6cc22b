//! Token scoring and constrained rationale selection.
//!
//! Selection maximises
//! `J(r) = Σ r_i (a_i - τ) - λ_c Σ_{i≥1} |r_i - r_{i-1}|` subject to
//! `Σ r_i ≤ k`, `k = min(l, ⌊α_max n⌋)`. Ties go to the mask with fewer
//! tokens, then to the one whose first differing position is selected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::SplitMix64;
use crate::encoder::{TokenIndex, Vocab};
use crate::layers::Linear;
use crate::numeric::{ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Exhaustive search is refused above this length.
pub const BRUTEFORCE_MAX_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("invalid selector config: {0}")]
    Config(String),
    #[error("brute force refused for n = {0} (max {BRUTEFORCE_MAX_LEN})")]
    TooLong(usize),
    #[error("empty score vector")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorConfig {
    pub tau: f64,
    pub max_tokens: usize,
    pub alpha_max: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig { tau: 0.5, max_tokens: 64, alpha_max: 0.3, lambda_c: 0.5, lambda_s: 0.01 }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> std::result::Result<(), SelectError> {
        let bad = |m: &str| Err(SelectError::Config(m.into()));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if !(self.alpha_max > 0.0 && self.alpha_max <= 1.0) {
            return bad("alpha_max must lie in (0, 1]");
        }
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return bad("lambda_c must be a finite non-negative number");
        }
        if !(self.lambda_s >= 0.0 && self.lambda_s.is_finite()) {
            return bad("lambda_s must be a finite non-negative number");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1");
        }
        Ok(())
    }

    /// `min(l, ⌊α_max n⌋)`.
    pub fn budget(&self, n: usize) -> usize {
        let frac = (self.alpha_max * n as f64).floor() as usize;
        self.max_tokens.min(frac).min(n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleMask(pub Vec<bool>);

impl RationaleMask {
    pub fn empty(n: usize) -> Self {
        RationaleMask(vec![false; n])
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        RationaleMask(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    pub fn bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| b as u8).collect()
    }

    /// Maximal runs of selected positions as half-open `[start, end)`.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, &b) in self.0.iter().enumerate() {
            match (b, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    out.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, self.0.len()));
        }
        out
    }
}

/// Number of adjacent positions whose bits differ.
pub fn continuity_loss(mask: &RationaleMask) -> usize {
    mask.0.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Contribution of position `i` to `J`; `prev` is `None` at `i = 0`.
///
/// Both search strategies accumulate `J` through this function in position
/// order so that equal masks produce bitwise equal objectives.
#[inline]
fn term(score: f64, tau: f64, lambda_c: f64, bit: bool, prev: Option<bool>) -> f64 {
    let gain = if bit { score - tau } else { 0.0 };
    let pen = match prev {
        Some(p) if p != bit => lambda_c,
        _ => 0.0,
    };
    gain - pen
}

/// `J(r)` for an arbitrary mask, budget not checked.
pub fn objective(scores: &[f64], mask: &RationaleMask, tau: f64, lambda_c: f64) -> f64 {
    let mut j = 0.0;
    let mut prev = None;
    for (&a, &b) in scores.iter().zip(&mask.0) {
        j += term(a, tau, lambda_c, b, prev);
        prev = Some(b);
    }
    j
}

/// Fixed-width bitset used to carry prefix masks through the DP.
#[derive(Clone, PartialEq, Eq)]
struct Bits(Vec<u64>);

impl Bits {
    fn new(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64).max(1)])
    }

    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    /// True when `self` is preferred: its first differing position is set.
    fn leftmost_before(&self, other: &Bits) -> bool {
        for (a, b) in self.0.iter().zip(&other.0) {
            if a != b {
                let diff = a ^ b;
                let low = diff.trailing_zeros();
                return a >> low & 1 == 1;
            }
        }
        false
    }

    fn into_mask(self, n: usize) -> RationaleMask {
        RationaleMask((0..n).map(|i| self.get(i)).collect())
    }
}

#[derive(Clone)]
struct Cand {
    value: f64,
    bits: Bits,
}

/// `a` beats `b` within one DP state, where token counts are equal.
fn better(a: &Cand, b: &Cand) -> bool {
    a.value > b.value || (a.value == b.value && a.bits.leftmost_before(&b.bits))
}

fn selectable(a: f64) -> bool {
    a.is_finite()
}

/// Exact maximiser of `J` with an explicit budget `k`.
///
/// State `(used, last bit)` after each position; `O(n·k)` states with two
/// transitions each. Positions with non-finite scores are never selected.
pub fn select_with_budget(scores: &[f64], tau: f64, lambda_c: f64, k: usize) -> RationaleMask {
    let n = scores.len();
    if n == 0 {
        return RationaleMask::empty(0);
    }
    let k = k.min(n);
    // layer[used][bit]
    let mut layer: Vec<[Option<Cand>; 2]> = vec![[None, None]; k + 1];
    layer[0][0] = Some(Cand { value: term(scores[0], tau, lambda_c, false, None), bits: Bits::new(n) });
    if k >= 1 && selectable(scores[0]) {
        let mut bits = Bits::new(n);
        bits.set(0);
        layer[1][1] = Some(Cand { value: term(scores[0], tau, lambda_c, true, None), bits });
    }
    for i in 1..n {
        let a = scores[i];
        let mut next: Vec<[Option<Cand>; 2]> = vec![[None, None]; k + 1];
        for used in 0..=k {
            for prev in [false, true] {
                let Some(c) = &layer[used][prev as usize] else { continue };
                let mut push = |used: usize, bit: bool, cand: Cand| {
                    let slot = &mut next[used][bit as usize];
                    if slot.as_ref().is_none_or(|s| better(&cand, s)) {
                        *slot = Some(cand);
                    }
                };
                push(used, false, Cand { value: c.value + term(a, tau, lambda_c, false, Some(prev)), bits: c.bits.clone() });
                if used < k && selectable(a) {
                    let mut bits = c.bits.clone();
                    bits.set(i);
                    push(used + 1, true, Cand { value: c.value + term(a, tau, lambda_c, true, Some(prev)), bits });
                }
            }
        }
        layer = next;
    }
    let mut best: Option<(usize, Cand)> = None;
    for (used, states) in layer.into_iter().enumerate() {
        for c in states.into_iter().flatten() {
            let take = match &best {
                None => true,
                Some((bu, b)) => {
                    c.value > b.value
                        || (c.value == b.value && (used < *bu || (used == *bu && c.bits.leftmost_before(&b.bits))))
                }
            };
            if take {
                best = Some((used, c));
            }
        }
    }
    best.expect("the empty mask is always feasible").1.bits.into_mask(n)
}

pub fn select_mask_dp(scores: &[f64], cfg: &SelectorConfig) -> RationaleMask {
    select_with_budget(scores, cfg.tau, cfg.lambda_c, cfg.budget(scores.len()))
}

/// Exhaustive reference over all `2^n` masks with the same objective and
/// tie-break as [`select_mask_dp`].
pub fn select_mask_bruteforce(scores: &[f64], cfg: &SelectorConfig) -> std::result::Result<RationaleMask, SelectError> {
    bruteforce_with_budget(scores, cfg.tau, cfg.lambda_c, cfg.budget(scores.len()))
}

pub fn bruteforce_with_budget(
    scores: &[f64],
    tau: f64,
    lambda_c: f64,
    k: usize,
) -> std::result::Result<RationaleMask, SelectError> {
    let n = scores.len();
    if n > BRUTEFORCE_MAX_LEN {
        return Err(SelectError::TooLong(n));
    }
    let mut best: Option<(f64, usize, RationaleMask)> = None;
    for code in 0u32..(1 << n) {
        let mask = RationaleMask((0..n).map(|i| code >> i & 1 == 1).collect());
        let used = mask.count();
        if used > k || mask.indices().iter().any(|&i| !selectable(scores[i])) {
            continue;
        }
        let j = objective(scores, &mask, tau, lambda_c);
        let take = match &best {
            None => true,
            Some((bj, bu, bm)) => {
                j > *bj || (j == *bj && (used < *bu || (used == *bu && mask.indices() < bm.indices())))
            }
        };
        if take {
            best = Some((j, used, mask));
        }
    }
    Ok(best.expect("the empty mask is always feasible").2)
}

/// Mean of the selected rows of `states: n×d`; zero vector for an empty mask.
pub fn pool_rationale(states: &Tensor, mask: &RationaleMask) -> Result<Vec<f64>> {
    let (n, d) = states.dims2();
    if mask.len() != n {
        return Err(TensorError::Shape { op: "pool_rationale", lhs: vec![n, d], rhs: vec![mask.len()] });
    }
    let mut out = vec![0.0; d];
    let idx = mask.indices();
    for &i in &idx {
        for (o, v) in out.iter_mut().zip(states.row(i)) {
            *o += v;
        }
    }
    if !idx.is_empty() {
        let c = idx.len() as f64;
        out.iter_mut().for_each(|o| *o /= c);
    }
    Ok(out)
}

/// `σ(w_cᵀ h_R + b_c)`.
pub fn classify_from_rationale(h_r: &[f64], w_c: &[f64], b_c: f64) -> Result<f64> {
    if h_r.len() != w_c.len() {
        return Err(TensorError::Shape { op: "classify_from_rationale", lhs: vec![h_r.len()], rhs: vec![w_c.len()] });
    }
    let z: f64 = h_r.iter().zip(w_c).map(|(h, w)| h * w).sum::<f64>() + b_c;
    Ok(crate::numeric::sigmoid(z))
}

/// Token scorer `a_i = σ(w_aᵀ H_i + b_a)` plus the rationale classifier
/// `(w_c, b_c)`.
#[derive(Debug, Clone, Copy)]
pub struct Selector {
    pub scorer: Linear,
    pub classifier: Linear,
}

impl Selector {
    /// The classifier starts at zero so the rationale path enters Phase B
    /// without perturbing the pre-trained task logit.
    pub fn register(store: &mut ParamStore, d: usize, rng: &mut SplitMix64) -> Self {
        let scorer = Linear::register(store, "selector.score", d, 1, rng);
        let classifier = Linear::register(store, "selector.classify", d, 1, rng);
        store.get_mut(classifier.weight).value = Tensor::zeros(&[d, 1]);
        Selector { scorer, classifier }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.scorer.params().to_vec();
        v.extend(self.classifier.params());
        v
    }

    /// `n×1` column of token scores.
    pub fn score_tokens(&self, tape: &mut Tape, store: &ParamStore, states: Var) -> Result<Var> {
        let z = self.scorer.forward(tape, store, states)?;
        Ok(tape.sigmoid(z))
    }
}

/// `Σ a_i H_i / Σ a_i` as a `1×d` row.
pub fn soft_rationale_pool(tape: &mut Tape, states: Var, scores: Var) -> Result<Var> {
    let at = tape.transpose(scores);
    let weighted = tape.matmul(at, states)?;
    let total = tape.sum(scores);
    let inv = tape.recip(total)?;
    tape.scale_by(weighted, inv)
}

/// `Σ_{i≥1} |a_i - a_{i-1}|`; zero for a single token.
pub fn soft_continuity(tape: &mut Tape, scores: Var) -> Result<Var> {
    let n = tape.value(scores).len();
    if n < 2 {
        let z = tape.constant(Tensor::scalar(0.0));
        return Ok(z);
    }
    let col = tape.reshape(scores, &[n, 1])?;
    let tail: Vec<usize> = (1..n).collect();
    let head: Vec<usize> = (0..n - 1).collect();
    let t = tape.gather_rows(col, &tail)?;
    let h = tape.gather_rows(col, &head)?;
    let diff = tape.sub(t, h)?;
    let a = tape.abs(diff);
    Ok(tape.sum(a))
}

/// `Σ a_i / n`.
pub fn soft_sparsity(tape: &mut Tape, scores: Var) -> Result<Var> {
    tape.mean(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleToken {
    pub index: usize,
    pub post: usize,
    pub offset: usize,
    pub token: String,
    pub score: f64,
}

/// Selected tokens in increasing index order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RationaleSet {
    pub tokens: Vec<RationaleToken>,
}

impl RationaleSet {
    pub fn from_mask(mask: &RationaleMask, scores: &[f64], index: &TokenIndex, vocab: &Vocab) -> Self {
        let tokens = mask
            .indices()
            .into_iter()
            .map(|i| {
                let (post, offset) = index.positions[i];
                RationaleToken { index: i, post, offset, token: vocab.token(index.ids[i]).to_string(), score: scores[i] }
            })
            .collect();
        RationaleSet { tokens }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Groups tokens into runs that are contiguous within one post.
    pub fn spans(&self) -> Vec<&[RationaleToken]> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.tokens.len() {
            let split = i == self.tokens.len() || {
                let (p, c) = (&self.tokens[i - 1], &self.tokens[i]);
                c.index != p.index + 1 || c.post != p.post
            };
            if split {
                out.push(&self.tokens[start..i]);
                start = i;
            }
        }
        out.retain(|s| !s.is_empty());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tau: f64, lambda_c: f64, alpha_max: f64) -> SelectorConfig {
        SelectorConfig { tau, max_tokens: 64, alpha_max, lambda_c, lambda_s: 0.0 }
    }

    #[test]
    fn continuity_examples() {
        assert_eq!(continuity_loss(&RationaleMask::from_bits(&[1, 1, 0, 1])), 2);
        assert_eq!(continuity_loss(&RationaleMask::from_bits(&[0, 0, 0])), 0);
        assert_eq!(continuity_loss(&RationaleMask::from_bits(&[1, 1, 1])), 0);
    }

    #[test]
    fn threshold_example() {
        let m = select_with_budget(&[0.9, 0.1, 0.8], 0.5, 0.0, 3);
        assert_eq!(m.bits(), vec![1, 0, 1]);
    }

    #[test]
    fn bridging_example() {
        let s = [0.9, 0.45, 0.9];
        let m = select_with_budget(&s, 0.5, 0.5, 3);
        assert_eq!(m.bits(), vec![1, 1, 1]);
        assert!((objective(&s, &m, 0.5, 0.5) - 0.75).abs() < 1e-12);
        assert_eq!(bruteforce_with_budget(&s, 0.5, 0.5, 3).unwrap(), m);
    }

    #[test]
    fn below_threshold_selects_nothing() {
        let m = select_with_budget(&[0.1, 0.49, 0.3, 0.0], 0.5, 0.0, 4);
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn tie_prefers_fewer_then_leftmost() {
        // exactly at threshold: including adds nothing
        let m = select_with_budget(&[0.5, 0.5], 0.5, 0.0, 2);
        assert_eq!(m.count(), 0);
        // two equal gains, budget one
        let m = select_with_budget(&[0.75, 0.75], 0.5, 0.0, 1);
        assert_eq!(m.bits(), vec![1, 0]);
        let b = bruteforce_with_budget(&[0.75, 0.75], 0.5, 0.0, 1).unwrap();
        assert_eq!(b, m);
    }

    #[test]
    fn non_finite_scores_never_selected() {
        let m = select_with_budget(&[f64::NAN, 0.9, f64::INFINITY], 0.5, 0.0, 3);
        assert_eq!(m.bits(), vec![0, 1, 0]);
    }

    #[test]
    fn budget_uses_floor() {
        let c = cfg(0.5, 0.5, 0.3);
        assert_eq!(c.budget(3), 0);
        assert_eq!(c.budget(10), 3);
        assert_eq!(c.budget(1000), 64);
    }

    #[test]
    fn bruteforce_refuses_long_input() {
        let s = vec![0.9; 17];
        assert_eq!(select_mask_bruteforce(&s, &cfg(0.5, 0.0, 1.0)), Err(SelectError::TooLong(17)));
    }

    #[test]
    fn long_inputs_cross_word_boundaries() {
        let mut s = vec![0.1; 130];
        s[63] = 0.9;
        s[64] = 0.9;
        s[129] = 0.95;
        let m = select_with_budget(&s, 0.5, 0.1, 10);
        assert_eq!(m.indices(), vec![63, 64, 129]);
    }

    #[test]
    fn config_validation() {
        assert!(SelectorConfig::default().validate().is_ok());
        assert!(cfg(0.0, 0.5, 0.3).validate().is_err());
        assert!(cfg(0.5, -1.0, 0.3).validate().is_err());
        assert!(cfg(0.5, 0.5, 1.5).validate().is_err());
    }

    #[test]
    fn pooling_cases() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(pool_rationale(&h, &RationaleMask::from_bits(&[0, 1])).unwrap(), vec![3.0, 6.0]);
        assert_eq!(pool_rationale(&h, &RationaleMask::from_bits(&[1, 1])).unwrap(), vec![2.0, 4.0]);
        let empty = pool_rationale(&h, &RationaleMask::from_bits(&[0, 0])).unwrap();
        assert_eq!(empty, vec![0.0, 0.0]);
        assert_eq!(classify_from_rationale(&empty, &[3.0, -1.0], 0.0).unwrap(), 0.5);
    }

    #[test]
    fn scoring_limits() {
        let mut rng = SplitMix64::new(5);
        let mut store = ParamStore::new();
        let sel = Selector::register(&mut store, 3, &mut rng);
        store.set_value(sel.scorer.weight, Tensor::zeros(&[3, 1])).unwrap();
        let mut t = Tape::new();
        let h = t.constant(Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng));
        let a = sel.score_tokens(&mut t, &store, h).unwrap();
        assert!(t.value(a).data().iter().all(|&x| x == 0.5));
        store.set_value(sel.scorer.bias, Tensor::vector(vec![50.0])).unwrap();
        let mut t = Tape::new();
        let h = t.constant(Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng));
        let a = sel.score_tokens(&mut t, &store, h).unwrap();
        assert!(t.value(a).data().iter().all(|&x| x > 1.0 - 1e-9));
    }

    #[test]
    fn soft_terms_by_hand() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![3, 1], vec![0.2, 0.8, 0.5]).unwrap());
        let h = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap());
        let c = soft_continuity(&mut t, a).unwrap();
        assert!((t.value(c).data()[0] - 0.9).abs() < 1e-12);
        let s = soft_sparsity(&mut t, a).unwrap();
        assert!((t.value(s).data()[0] - 0.5).abs() < 1e-12);
        let p = soft_rationale_pool(&mut t, h, a).unwrap();
        let got = t.value(p).data();
        assert!((got[0] - 0.7 / 1.5).abs() < 1e-12 && (got[1] - 1.3 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn runs_and_spans() {
        let m = RationaleMask::from_bits(&[1, 1, 0, 1, 0, 1]);
        assert_eq!(m.runs(), vec![(0, 2), (3, 4), (5, 6)]);
    }
}
