//! Analytic gradients against central finite differences, for every tape op
//! and for the full training losses.

mod common;

use common::grad::{cases, check_model_loss, check_op, random_session, SEEDS};
use common::GRAD_TOL;
use xtroll::adapters::FusionVariant;
use xtroll::numeric::Tape;
use xtroll::training::{
    appraisal_adapter_loss, joint_loss, prop_id_adapter_loss, strategy_adapter_loss, task_prepass_loss,
};

#[test]
fn every_op_matches_finite_differences() {
    for case in cases() {
        for seed in 0..SEEDS {
            let err = check_op(&case, 1000 + seed);
            assert!(err < GRAD_TOL, "{} seed {seed}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn joint_loss_matches_finite_differences() {
    for seed in 0..SEEDS {
        let s = random_session(seed);
        let user = (seed as usize * 7) % s.data.examples.len();
        let sel = s.config.selector();
        for variant in [FusionVariant::Full, FusionVariant::ablations()[seed as usize % 8]] {
            let params = s.model.joint_trainable(variant);
            let err = check_model_loss(&s, &params, 6, seed, &|s, t| {
                joint_loss(&s.model, t, &s.data.examples[user], &s.cache[user], variant, &sel, true).unwrap()
            });
            assert!(err < GRAD_TOL, "seed {seed} {}: relative error {err:e}", variant.name());
        }
    }
}

#[test]
fn task_prepass_loss_matches_finite_differences() {
    for seed in 0..SEEDS {
        let s = random_session(100 + seed);
        let user = seed as usize % s.data.examples.len();
        let mut params = s.model.encoder.params();
        params.extend(s.model.adapters.adapter(xtroll::adapters::AdapterKind::Task).trainable());
        params.extend(s.model.adapters.heads.task.params());
        params.extend(s.model.adapters.heads.campaign.params());
        let err = check_model_loss(&s, &params, 4, seed, &|s, t| {
            task_prepass_loss(&s.model, t, &s.data.examples[user]).unwrap()
        });
        assert!(err < GRAD_TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn knowledge_adapter_losses_match_finite_differences() {
    use xtroll::adapters::AdapterKind;
    for seed in 0..SEEDS {
        let s = random_session(200 + seed);
        // Pick a user with strategy posts so the strategy loss is defined.
        let user = (0..s.data.examples.len())
            .map(|k| (k + seed as usize) % s.data.examples.len())
            .find(|&i| s.data.examples[i].post_strategy.iter().any(Option::is_some))
            .expect("corpus has strategy posts");
        for kind in AdapterKind::KNOWLEDGE {
            let mut params = s.model.adapters.adapter(kind).trainable().to_vec();
            params.extend(s.model.adapters.heads.for_kind(kind).params());
            let err = check_model_loss(&s, &params, 8, seed, &|s, t| {
                let (ex, enc) = (&s.data.examples[user], &s.cache[user]);
                match kind {
                    AdapterKind::Appraisal => appraisal_adapter_loss(&s.model, t, ex, enc),
                    AdapterKind::PropagandaId => prop_id_adapter_loss(&s.model, t, ex, enc),
                    _ => strategy_adapter_loss(&s.model, t, ex, enc),
                }
                .unwrap()
            });
            assert!(err < GRAD_TOL, "seed {seed} {kind}: relative error {err:e}");
        }
    }
}

#[test]
fn every_encoder_parameter_receives_gradient() {
    let mut s = random_session(77);
    let params = s.model.encoder.params();
    s.model.store.set_trainable(&params);
    s.model.store.zero_grads();
    for ex in s.data.examples.iter().take(8) {
        let mut t = Tape::new();
        let l = task_prepass_loss(&s.model, &mut t, ex).unwrap();
        t.backward_into(l, &mut s.model.store).unwrap();
    }
    for id in params {
        let p = s.model.store.get(id);
        let norm: f64 = p.grad.as_ref().map(|g| g.data().iter().map(|v| v * v).sum()).unwrap_or(0.0);
        assert!(norm > 0.0, "{} received no gradient", p.name);
    }
}
