//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod grad;

use xtroll::config::RunConfig;
use xtroll::corpus::UserTimeline;
use xtroll::datagen::SplitMix64;
use xtroll::numeric::gradcheck::{central_difference, max_relative_error};
use xtroll::numeric::{ParamId, Tensor};
use xtroll::pipeline::{self, Session};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// A corpus small enough for per-test training.
pub fn small_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        troll_users_per_campaign: 4,
        nontroll_users_per_campaign: 8,
        min_posts: 3,
        max_posts: 6,
        d_model: 8,
        ff_hidden: 12,
        epochs: 2,
        phase_a_epochs: 2,
        patience: 1,
        ..RunConfig::default()
    }
}

pub fn corpus(cfg: &RunConfig) -> Vec<UserTimeline> {
    pipeline::generate(cfg).expect("valid generator config")
}

pub fn trained_session(cfg: &RunConfig) -> Session {
    let users = corpus(cfg);
    let mut s = Session::init(cfg, &users).expect("session");
    s.train().expect("training");
    s
}

/// Overwrites every parameter with uniform noise so that no gradient path is
/// masked by a zero initialisation.
pub fn randomise(session: &mut Session, seed: u64, half_width: f64) {
    let mut rng = SplitMix64::new(seed);
    let ids: Vec<ParamId> = session.model.store.ids().collect();
    for id in ids {
        let shape = session.model.store.value(id).shape().to_vec();
        session.model.store.set_value(id, Tensor::uniform(&shape, -half_width, half_width, &mut rng)).unwrap();
    }
}

/// Up to `count` distinct coordinates of a tensor with `len` elements.
pub fn sample_coords(len: usize, count: usize, rng: &mut SplitMix64) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut all: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut all);
    all.truncate(count);
    all.sort_unstable();
    all
}

/// Compares an analytic gradient with central differences on `coords`.
pub fn fd_error(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], coords: &[usize]) -> f64 {
    let numeric = central_difference(f, x, coords, FD_STEP);
    let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    max_relative_error(&picked, &numeric)
}
