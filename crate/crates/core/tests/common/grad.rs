//! Gradient-check cases shared by the gradient and acceptance targets.

use super::{fd_error, randomise, sample_coords, small_config};
use xtroll::datagen::SplitMix64;
use xtroll::numeric::{ParamId, Tape, Tensor, TensorError, Var};
use xtroll::pipeline::Session;

pub const SEEDS: u64 = 20;

type Build = fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

/// How inputs of one op are drawn.
#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
}

pub struct OpCase {
    pub name: &'static str,
    shapes: &'static [&'static [usize]],
    domain: Domain,
    build: Build,
}

fn draw(shape: &[usize], domain: Domain, rng: &mut SplitMix64) -> Tensor {
    match domain {
        Domain::Any => Tensor::uniform(shape, -2.0, 2.0, rng),
        Domain::Positive => Tensor::uniform(shape, 0.2, 2.0, rng),
    }
}

/// `sum(op(inputs) ⊙ weights)` so every output coordinate matters.
fn scalar_loss(case: &OpCase, values: &[Tensor], weights: &mut Option<Tensor>, rng: &mut SplitMix64) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.input(v.clone())).collect();
    let out = (case.build)(&mut tape, &vars).expect("op applies");
    let shape = tape.value(out).shape().to_vec();
    let w = weights.get_or_insert_with(|| Tensor::uniform(&shape, -1.0, 1.0, rng)).clone();
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss).unwrap();
    let g = vars.iter().map(|&v| grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()])).collect();
    (value, g)
}

pub fn check_op(case: &OpCase, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let values: Vec<Tensor> = case.shapes.iter().map(|s| draw(s, case.domain, &mut rng)).collect();
    let mut weights = None;
    let (_, analytic) = scalar_loss(case, &values, &mut weights, &mut rng);
    let mut worst: f64 = 0.0;
    for (k, v) in values.iter().enumerate() {
        let coords: Vec<usize> = (0..v.len()).collect();
        let mut f = |x: &[f64]| {
            let mut probe = values.clone();
            probe[k] = Tensor::new(v.shape().to_vec(), x.to_vec()).unwrap();
            let mut w = weights.clone();
            scalar_loss(case, &probe, &mut w, &mut SplitMix64::new(0)).0
        };
        worst = worst.max(fd_error(&mut f, v.data(), &analytic[k], &coords));
    }
    worst
}

pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], domain: Domain::Any, build: |t, v| t.matmul(v[0], v[1]) },
        OpCase { name: "transpose", shapes: &[&[3, 4]], domain: Domain::Any, build: |t, v| Ok(t.transpose(v[0])) },
        OpCase { name: "reshape", shapes: &[&[3, 4]], domain: Domain::Any, build: |t, v| t.reshape(v[0], &[2, 6]) },
        OpCase { name: "add", shapes: &[&[2, 3], &[2, 3]], domain: Domain::Any, build: |t, v| t.add(v[0], v[1]) },
        OpCase { name: "sub", shapes: &[&[2, 3], &[2, 3]], domain: Domain::Any, build: |t, v| t.sub(v[0], v[1]) },
        OpCase { name: "mul", shapes: &[&[2, 3], &[2, 3]], domain: Domain::Any, build: |t, v| t.mul(v[0], v[1]) },
        OpCase { name: "add_row", shapes: &[&[3, 4], &[4]], domain: Domain::Any, build: |t, v| t.add_row(v[0], v[1]) },
        OpCase { name: "mul_row", shapes: &[&[3, 4], &[4]], domain: Domain::Any, build: |t, v| t.mul_row(v[0], v[1]) },
        OpCase { name: "scale", shapes: &[&[2, 3]], domain: Domain::Any, build: |t, v| Ok(t.scale(v[0], -1.7)) },
        OpCase { name: "add_const", shapes: &[&[2, 3]], domain: Domain::Any, build: |t, v| Ok(t.add_const(v[0], 0.3)) },
        OpCase { name: "scale_by", shapes: &[&[2, 3], &[1]], domain: Domain::Any, build: |t, v| t.scale_by(v[0], v[1]) },
        OpCase { name: "recip", shapes: &[&[2, 3]], domain: Domain::Positive, build: |t, v| t.recip(v[0]) },
        OpCase { name: "relu", shapes: &[&[3, 4]], domain: Domain::Any, build: |t, v| Ok(t.relu(v[0])) },
        OpCase { name: "sigmoid", shapes: &[&[3, 4]], domain: Domain::Any, build: |t, v| Ok(t.sigmoid(v[0])) },
        OpCase { name: "exp", shapes: &[&[3, 4]], domain: Domain::Any, build: |t, v| Ok(t.exp(v[0])) },
        OpCase { name: "log", shapes: &[&[3, 4]], domain: Domain::Positive, build: |t, v| t.log(v[0]) },
        OpCase {
            name: "log_clamped",
            shapes: &[&[3, 4]],
            domain: Domain::Positive,
            build: |t, v| Ok(t.log_clamped(v[0], 1e-12)),
        },
        OpCase { name: "abs", shapes: &[&[3, 4]], domain: Domain::Any, build: |t, v| Ok(t.abs(v[0])) },
        OpCase { name: "softmax_rows", shapes: &[&[3, 5]], domain: Domain::Any, build: |t, v| t.softmax_rows(v[0]) },
        OpCase {
            name: "layer_norm_rows",
            shapes: &[&[3, 5]],
            domain: Domain::Any,
            build: |t, v| Ok(t.layer_norm_rows(v[0], 1e-5)),
        },
        OpCase { name: "sum", shapes: &[&[3, 4]], domain: Domain::Any, build: |t, v| Ok(t.sum(v[0])) },
        OpCase { name: "mean", shapes: &[&[3, 4]], domain: Domain::Any, build: |t, v| t.mean(v[0]) },
        OpCase { name: "mean_rows", shapes: &[&[3, 4]], domain: Domain::Any, build: |t, v| t.mean_rows(v[0]) },
        OpCase { name: "max_rows", shapes: &[&[4, 3]], domain: Domain::Any, build: |t, v| t.max_rows(v[0]) },
        OpCase {
            name: "gather_rows",
            shapes: &[&[4, 3]],
            domain: Domain::Any,
            build: |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]),
        },
        OpCase {
            name: "concat_rows",
            shapes: &[&[2, 3], &[1, 3]],
            domain: Domain::Any,
            build: |t, v| t.concat_rows(&[v[0], v[1]]),
        },
        OpCase {
            name: "attention_block",
            shapes: &[&[4, 3], &[3]],
            domain: Domain::Any,
            build: |t, v| {
                let q = t.reshape(v[1], &[3, 1])?;
                let s = t.matmul(v[0], q)?;
                let st = t.transpose(s);
                let a = t.softmax_rows(st)?;
                t.matmul(a, v[0])
            },
        },
    ]
}

/// Checks `loss` against central differences over sampled coordinates of
/// every listed parameter.
pub fn check_model_loss(
    session: &Session,
    params: &[ParamId],
    per_param: usize,
    seed: u64,
    loss: &dyn Fn(&Session, &mut Tape) -> Var,
) -> f64 {
    let mut probe = session.model.clone();
    probe.store.set_trainable(params);
    probe.store.zero_grads();
    let mut tape = Tape::new();
    let as_session = |m: &xtroll::model::Model| Session {
        model: m.clone(),
        config: session.config.clone(),
        data: session.data.clone(),
        cache: session.cache.clone(),
    };
    let s = as_session(&probe);
    let l = loss(&s, &mut tape);
    tape.backward_into(l, &mut probe.store).unwrap();
    let mut rng = SplitMix64::new(seed);
    let mut worst: f64 = 0.0;
    for &id in params {
        let base = probe.store.value(id).clone();
        let analytic = probe.store.get(id).grad.as_ref().map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; base.len()]);
        let coords = sample_coords(base.len(), per_param, &mut rng);
        let mut work = as_session(&probe);
        let mut f = |x: &[f64]| {
            work.model.store.set_value(id, Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap()).unwrap();
            let mut t = Tape::new();
            let l = loss(&work, &mut t);
            t.value(l).data()[0]
        };
        let err = fd_error(&mut f, base.data(), &analytic, &coords);
        assert!(err.is_finite(), "{}: non-finite error", probe.store.get(id).name);
        worst = worst.max(err);
    }
    worst
}

pub fn random_session(seed: u64) -> Session {
    let cfg = small_config(seed);
    let users = super::corpus(&cfg);
    let mut s = Session::init(&cfg, &users).unwrap();
    randomise(&mut s, seed ^ 0xABCD, 0.4);
    s.cache = xtroll::training::encode_all(&s.model, &s.data).unwrap();
    s
}

