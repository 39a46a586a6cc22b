//! LoRA adapters for the four expert tasks, their heads, and gated fusion.
//!
//! All adapters share one frozen base projection `W` of the pooled timeline
//! representation. Adapter `k` computes `h_k = W·t + s·B_k(A_k·t)` and the
//! gate mixes them as `h = Σ α_k h_k` with `α = softmax(z)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{AppraisalTag, StrategyClass};
use crate::datagen::SplitMix64;
use crate::layers::Linear;
use crate::numeric::{ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdapterKind {
    Appraisal,
    PropagandaId,
    PropagandaStrategy,
    Task,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 4] =
        [AdapterKind::Appraisal, AdapterKind::PropagandaId, AdapterKind::PropagandaStrategy, AdapterKind::Task];
    pub const KNOWLEDGE: [AdapterKind; 3] =
        [AdapterKind::Appraisal, AdapterKind::PropagandaId, AdapterKind::PropagandaStrategy];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn slug(self) -> &'static str {
        match self {
            AdapterKind::Appraisal => "appraisal",
            AdapterKind::PropagandaId => "prop_id",
            AdapterKind::PropagandaStrategy => "prop_strategy",
            AdapterKind::Task => "task",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.slug() == s)
    }

    pub fn display_name(self) -> &'static str {
        match self {
            AdapterKind::Appraisal => "appraisal",
            AdapterKind::PropagandaId => "propaganda identification",
            AdapterKind::PropagandaStrategy => "propaganda strategy",
            AdapterKind::Task => "task",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// A LoRA update held as plain tensors, in the `W: d×k`, `B: d×r`, `A: r×k`
/// orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraWeights {
    pub base: Tensor,
    pub b: Tensor,
    pub a: Tensor,
    pub scale: f64,
}

impl LoraWeights {
    /// Zero `B`, small uniform `A`.
    pub fn init(base: Tensor, rank: usize, scale: f64, rng: &mut SplitMix64) -> Result<Self> {
        let (d, k) = base.dims2();
        if rank == 0 || rank > d.min(k) {
            return Err(TensorError::Contract(format!("rank {rank} outside 1..={}", d.min(k))));
        }
        Ok(LoraWeights {
            base,
            b: Tensor::zeros(&[d, rank]),
            a: Tensor::uniform(&[rank, k], -0.05, 0.05, rng),
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `W·h + s·B(A·h)`; the update path never forms `BA`.
    pub fn forward(&self, h: &[f64]) -> Result<Vec<f64>> {
        let (d, k) = self.base.dims2();
        if h.len() != k {
            return Err(TensorError::Shape { op: "lora_forward", lhs: self.base.shape().to_vec(), rhs: vec![h.len()] });
        }
        let col = Tensor::new(vec![k, 1], h.to_vec())?;
        let wh = self.base.matmul(&col)?;
        let ah = self.a.matmul(&col)?;
        let bah = self.b.matmul(&ah)?;
        Ok((0..d).map(|i| wh.data()[i] + self.scale * bah.data()[i]).collect())
    }

    /// Dense `W + s·BA`.
    pub fn merge(&self) -> Result<Tensor> {
        let mut ba = self.b.matmul(&self.a)?;
        for (x, w) in ba.data_mut().iter_mut().zip(self.base.data()) {
            *x = w + self.scale * *x;
        }
        Ok(ba)
    }
}

/// One adapter's trainable `(B, A)` pair over the shared base projection.
#[derive(Debug, Clone, Copy)]
pub struct LoraAdapter {
    pub kind: AdapterKind,
    pub base: ParamId,
    pub b: ParamId,
    pub a: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn register(
        store: &mut ParamStore,
        kind: AdapterKind,
        base: ParamId,
        rank: usize,
        scale: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let w = LoraWeights::init(store.value(base).clone(), rank, scale, rng)?;
        let b = store.add(format!("adapter.{}.b", kind.slug()), w.b, true);
        let a = store.add(format!("adapter.{}.a", kind.slug()), w.a, true);
        Ok(LoraAdapter { kind, base, b, a, rank, scale })
    }

    pub fn trainable(&self) -> [ParamId; 2] {
        [self.b, self.a]
    }

    pub fn weights(&self, store: &ParamStore) -> LoraWeights {
        LoraWeights {
            base: store.value(self.base).clone(),
            b: store.value(self.b).clone(),
            a: store.value(self.a).clone(),
            scale: self.scale,
        }
    }

    /// Applies the adapted projection to every row of `x: m×k`, giving `m×d`.
    pub fn forward_rows(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.base);
        let b = tape.param(store, self.b);
        let a = tape.param(store, self.a);
        let wt = tape.transpose(w);
        let at = tape.transpose(a);
        let bt = tape.transpose(b);
        let base = tape.matmul(x, wt)?;
        let low = tape.matmul(x, at)?;
        let up = tape.matmul(low, bt)?;
        let up = tape.scale(up, self.scale);
        tape.add(base, up)
    }
}

/// Learnable gate logits `z = w + t·V` over the four adapters.
///
/// `w` are the per-adapter scalars; `V: d×K` conditions the mixture on the
/// pooled timeline. Both start at zero so an untrained gate is uniform.
#[derive(Debug, Clone, Copy)]
pub struct GatingUnit {
    pub w: ParamId,
    pub cond: ParamId,
}

impl GatingUnit {
    pub fn register(store: &mut ParamStore, d: usize) -> Self {
        let k = AdapterKind::ALL.len();
        let w = store.add("gate.w", Tensor::zeros(&[k]), true);
        let cond = store.add("gate.cond", Tensor::zeros(&[d, k]), true);
        GatingUnit { w, cond }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.cond]
    }

    /// `1 × K` logits for one pooled timeline `t: 1×d`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let v = tape.param(store, self.cond);
        let tv = tape.matmul(pooled, v)?;
        tape.add_row(tv, w)
    }
}

/// `α = softmax(logits)`, `h = Σ α_k h_k`. Each `h_k` is a `1×d` row.
pub fn gate(tape: &mut Tape, outputs: &[Var], logits: Var) -> Result<(Var, Var)> {
    let k = outputs.len();
    if tape.value(logits).len() != k {
        return Err(TensorError::Shape { op: "gate", lhs: vec![k], rhs: tape.value(logits).shape().to_vec() });
    }
    let d = tape.value(outputs[0]).len();
    if let Some(&bad) = outputs.iter().find(|&&h| tape.value(h).len() != d) {
        return Err(TensorError::Shape { op: "gate", lhs: vec![d], rhs: tape.value(bad).shape().to_vec() });
    }
    let row = tape.reshape(logits, &[1, k])?;
    let alpha = tape.softmax_rows(row)?;
    let rows = outputs.iter().map(|&h| tape.reshape(h, &[1, d])).collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_rows(&rows)?;
    let combined = tape.matmul(alpha, stacked)?;
    Ok((alpha, combined))
}

/// Linear read-outs on top of the adapted representations.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub appraisal: Linear,
    pub prop_id: Linear,
    pub strategy: Linear,
    pub task: Linear,
    pub campaign: Linear,
}

impl Heads {
    pub fn register(store: &mut ParamStore, d: usize, campaigns: usize, rng: &mut SplitMix64) -> Self {
        Heads {
            appraisal: Linear::register(store, "head.appraisal", d, AppraisalTag::ALL.len(), rng),
            prop_id: Linear::register(store, "head.prop_id", d, 1, rng),
            strategy: Linear::register(store, "head.strategy", d, StrategyClass::ALL.len(), rng),
            task: Linear::register(store, "head.task", d, 1, rng),
            campaign: Linear::register(store, "head.campaign", d, campaigns, rng),
        }
    }

    /// The head an adapter is pre-trained with.
    pub fn for_kind(&self, kind: AdapterKind) -> Linear {
        match kind {
            AdapterKind::Appraisal => self.appraisal,
            AdapterKind::PropagandaId => self.prop_id,
            AdapterKind::PropagandaStrategy => self.strategy,
            AdapterKind::Task => self.task,
        }
    }
}

/// Which adapters take part in the fused representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionVariant {
    /// All four adapters, gated.
    Full,
    /// Gate over the three remaining adapters.
    Without(AdapterKind),
    /// One adapter, gate bypassed.
    Single(AdapterKind),
}

impl FusionVariant {
    pub fn active(self) -> Vec<AdapterKind> {
        match self {
            FusionVariant::Full => AdapterKind::ALL.to_vec(),
            FusionVariant::Without(k) => AdapterKind::ALL.into_iter().filter(|&x| x != k).collect(),
            FusionVariant::Single(k) => vec![k],
        }
    }

    pub fn gated(self) -> bool {
        !matches!(self, FusionVariant::Single(_))
    }

    /// Every remove-one and single-adapter configuration.
    pub fn ablations() -> Vec<FusionVariant> {
        let mut v: Vec<_> = AdapterKind::ALL.into_iter().map(FusionVariant::Without).collect();
        v.extend(AdapterKind::ALL.into_iter().map(FusionVariant::Single));
        v
    }

    pub fn name(self) -> String {
        match self {
            FusionVariant::Full => "full".into(),
            FusionVariant::Without(k) => format!("without_{}", k.slug()),
            FusionVariant::Single(k) => format!("only_{}", k.slug()),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "full" {
            return Some(FusionVariant::Full);
        }
        if let Some(k) = s.strip_prefix("without_") {
            return AdapterKind::from_slug(k).map(FusionVariant::Without);
        }
        s.strip_prefix("only_").and_then(AdapterKind::from_slug).map(FusionVariant::Single)
    }
}

/// Fused representation of one timeline.
pub struct Fusion {
    pub combined: Var,
    /// Mixture weights over [`AdapterKind::ALL`]; inactive adapters get 0.
    pub alpha: [f64; 4],
    pub alpha_var: Option<Var>,
}

/// The shared base projection, four adapters, gate and heads.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub base: ParamId,
    pub adapters: [LoraAdapter; 4],
    pub gate: GatingUnit,
    pub heads: Heads,
}

impl AdapterSet {
    pub fn register(
        store: &mut ParamStore,
        d: usize,
        rank: usize,
        scale: f64,
        campaigns: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let base = store.add("adapter.base", Tensor::identity(d), false);
        let mut adapters = Vec::with_capacity(4);
        for kind in AdapterKind::ALL {
            adapters.push(LoraAdapter::register(store, kind, base, rank, scale, rng)?);
        }
        let adapters: [LoraAdapter; 4] = adapters.try_into().expect("four kinds");
        let gate = GatingUnit::register(store, d);
        let heads = Heads::register(store, d, campaigns, rng);
        Ok(AdapterSet { base, adapters, gate, heads })
    }

    pub fn adapter(&self, kind: AdapterKind) -> &LoraAdapter {
        &self.adapters[kind.index()]
    }

    /// `h_k` for one adapter applied to the pooled timeline.
    pub fn adapter_branch(&self, tape: &mut Tape, store: &ParamStore, kind: AdapterKind, pooled: Var) -> Result<Var> {
        self.adapter(kind).forward_rows(tape, store, pooled)
    }

    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, pooled: Var, variant: FusionVariant) -> Result<Fusion> {
        let active = variant.active();
        let outputs = active
            .iter()
            .map(|&k| self.adapter_branch(tape, store, k, pooled))
            .collect::<Result<Vec<_>>>()?;
        let mut alpha = [0.0; 4];
        if !variant.gated() {
            alpha[active[0].index()] = 1.0;
            return Ok(Fusion { combined: outputs[0], alpha, alpha_var: None });
        }
        let logits = self.gate.logits(tape, store, pooled)?;
        let logits = if active.len() == AdapterKind::ALL.len() {
            logits
        } else {
            let k = AdapterKind::ALL.len();
            let col = tape.reshape(logits, &[k, 1])?;
            let idx: Vec<usize> = active.iter().map(|k| k.index()).collect();
            let picked = tape.gather_rows(col, &idx)?;
            tape.reshape(picked, &[1, idx.len()])?
        };
        let (a, combined) = gate(tape, &outputs, logits)?;
        for (k, w) in active.iter().zip(tape.value(a).data()) {
            alpha[k.index()] = *w;
        }
        Ok(Fusion { combined, alpha, alpha_var: Some(a) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_b_is_identity_on_base() {
        let mut rng = SplitMix64::new(1);
        let base = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let w = LoraWeights::init(base.clone(), 2, 1.0, &mut rng).unwrap();
        let h = [0.3, -1.2, 2.0];
        let col = Tensor::new(vec![3, 1], h.to_vec()).unwrap();
        let wh = base.matmul(&col).unwrap();
        assert_eq!(w.forward(&h).unwrap(), wh.data());
    }

    #[test]
    fn rank_one_by_hand() {
        let w = LoraWeights {
            base: Tensor::zeros(&[2, 2]),
            b: Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
            a: Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap(),
            scale: 1.0,
        };
        assert_eq!(w.forward(&[5.0, 7.0]).unwrap(), vec![7.0, 0.0]);
    }

    #[test]
    fn rank_bounds_checked() {
        let mut rng = SplitMix64::new(1);
        assert!(LoraWeights::init(Tensor::zeros(&[3, 2]), 3, 1.0, &mut rng).is_err());
        assert!(LoraWeights::init(Tensor::zeros(&[3, 2]), 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn forward_shape_mismatch() {
        let mut rng = SplitMix64::new(1);
        let w = LoraWeights::init(Tensor::zeros(&[3, 2]), 1, 1.0, &mut rng).unwrap();
        assert!(matches!(w.forward(&[1.0]), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = SplitMix64::new(3);
        let mut store = ParamStore::new();
        let base = store.add("w", Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng), false);
        let ad = LoraAdapter::register(&mut store, AdapterKind::Task, base, 2, 0.5, &mut rng).unwrap();
        store.set_value(ad.b, Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng)).unwrap();
        let h = vec![0.5, -0.25, 1.0, 2.0];
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 4], h.clone()).unwrap());
        let y = ad.forward_rows(&mut t, &store, x).unwrap();
        let plain = ad.weights(&store).forward(&h).unwrap();
        for (a, b) in t.value(y).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn run_gate(outputs: &[Vec<f64>], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut t = Tape::new();
        let hs: Vec<Var> = outputs.iter().map(|h| t.constant(Tensor::vector(h.clone()))).collect();
        let l = t.constant(Tensor::vector(w.to_vec()));
        let (a, c) = gate(&mut t, &hs, l).unwrap();
        (t.value(a).data().to_vec(), t.value(c).data().to_vec())
    }

    #[test]
    fn uniform_gate_is_mean() {
        let hs = vec![vec![1.0, 0.0], vec![3.0, 4.0], vec![-1.0, 2.0], vec![5.0, 2.0]];
        let (a, c) = run_gate(&hs, &[0.0; 4]);
        assert_eq!(a, vec![0.25; 4]);
        assert!((c[0] - 2.0).abs() < 1e-15 && (c[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn identical_outputs_ignore_weights() {
        let hs = vec![vec![1.5, -2.0]; 4];
        let (_, c) = run_gate(&hs, &[3.0, -1.0, 0.2, 7.0]);
        assert!((c[0] - 1.5).abs() < 1e-12 && (c[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn gate_length_mismatch() {
        let mut t = Tape::new();
        let h1 = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let h2 = t.constant(Tensor::vector(vec![1.0]));
        let l = t.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(gate(&mut t, &[h1, h2], l).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in std::iter::once(FusionVariant::Full).chain(FusionVariant::ablations()) {
            assert_eq!(FusionVariant::parse(&v.name()), Some(v));
        }
        assert_eq!(FusionVariant::ablations().len(), 8);
    }

    #[test]
    fn untrained_set_is_adapter_neutral() {
        let mut rng = SplitMix64::new(11);
        let mut store = ParamStore::new();
        let set = AdapterSet::register(&mut store, 6, 2, 1.0, 3, &mut rng).unwrap();
        let mut t = Tape::new();
        let pooled = t.constant(Tensor::uniform(&[1, 6], -1.0, 1.0, &mut rng));
        let f = set.fuse(&mut t, &store, pooled, FusionVariant::Full).unwrap();
        assert_eq!(f.alpha, [0.25; 4]);
        assert!(t.value(f.combined).max_abs_diff(t.value(pooled)) < 1e-15);
    }
}
