#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sla_core::head::{self, FrameSequence, HeadMode, HeadParameters};

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-4;

pub struct Instance {
    pub params: HeadParameters,
    pub seq: FrameSequence,
    pub target: f64,
}

/// Random head, frames and target with d <= max_d, N <= max_n, T <= max_t.
pub fn random_instance(seed: u64, max_d: usize, max_n: usize, max_t: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=max_d);
    let n = rng.random_range(1..=max_n);
    let t = rng.random_range(1..=max_t);
    let da = rng.random_range(1..=6);
    let mode = if rng.random_bool(0.5) {
        HeadMode::Regression
    } else {
        HeadMode::Classification
    };
    let levels: Vec<f64> = (0..n).map(|j| 2.0 + 0.5 * j as f64).collect();
    let mut params = HeadParameters::random(&mut rng, d, da, levels.clone(), mode).unwrap();
    // larger weights so tanh and softmax are exercised away from linearity
    for slice in params.weights.slices_mut() {
        for v in slice {
            *v *= 2.0;
        }
    }
    let frames = Array2::from_shape_simple_fn((t, d), || rng.random_range(-2.0..2.0));
    let seq = FrameSequence::new(frames, None).unwrap();
    let target = levels[rng.random_range(0..n)];
    Instance {
        params,
        seq,
        target,
    }
}

pub fn loss_at(params: &HeadParameters, seq: &FrameSequence, target: f64) -> f64 {
    let cache = head::forward(seq, params).unwrap();
    head::loss(cache.output(), target, params).unwrap()
}

/// Largest relative error between analytic and central-difference gradients
/// over every scalar parameter, with the tensor name where it occurs.
pub fn max_gradient_error(inst: &Instance) -> (f64, &'static str) {
    let cache = head::forward(&inst.seq, &inst.params).unwrap();
    let (_, upstream) =
        head::loss_with_gradient(cache.output(), inst.target, &inst.params).unwrap();
    let analytic = head::backward(&inst.params, &cache, &upstream).unwrap();

    let mut worst = (0.0, "");
    let mut probe = inst.params.clone();
    for (t, name) in head::HeadWeights::NAMES.iter().enumerate() {
        let len = analytic.slices()[t].len();
        for i in 0..len {
            let original = probe.weights.slices()[t][i];
            probe.weights.slices_mut()[t][i] = original + FD_STEP;
            let plus = loss_at(&probe, &inst.seq, inst.target);
            probe.weights.slices_mut()[t][i] = original - FD_STEP;
            let minus = loss_at(&probe, &inst.seq, inst.target);
            probe.weights.slices_mut()[t][i] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.slices()[t][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    worst
}
