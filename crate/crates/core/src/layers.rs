//! Small parameterised building blocks shared by the model modules.

use crate::datagen::SplitMix64;
use crate::numeric::{ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Glorot-uniform bound for a `fan_in × fan_out` weight.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `y = x·W + b` with `W: in × out` stored row-major.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Self {
        let b = xavier_bound(fan_in, fan_out);
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[fan_in, fan_out], -b, b, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true);
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Row-wise layer normalisation with a learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-9;

    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true);
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm_rows(x, Self::EPS);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let scaled = tape.mul_row(n, g)?;
        tape.add_row(scaled, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}
