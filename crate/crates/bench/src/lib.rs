//! Input builders shared by the benchmarks.

use ldcrf::seqdata::{generate_synthetic, GeneratorConfig};
use ldcrf::trainer::{initial_model, TrainConfig};
use ldcrf::{Dataset, Model};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random chain potentials: `(scores T×S, transitions S×S, upstream T×S)`.
pub fn random_chain(frames: usize, states: usize, seed: u64) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: (usize, usize)| Array2::from_shape_fn(shape, |_| rng.random_range(-2.0..2.0));
    let scores = draw((frames, states));
    let trans = draw((states, states));
    let upstream = draw((frames, states));
    (scores, trans, upstream)
}

/// Random per-frame label distributions, `T×labels`, rows summing to one.
pub fn random_marginals(frames: usize, labels: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array2::from_shape_fn((frames, labels), |_| rng.random_range(0.01..1.0));
    for mut row in q.rows_mut() {
        let z = row.sum();
        row /= z;
    }
    q
}

/// The default synthetic task and a randomly initialized model for it.
pub fn task(sequences: usize, seed: u64) -> (Dataset, Model) {
    let config = GeneratorConfig {
        sequences,
        ..GeneratorConfig::default()
    };
    let data = generate_synthetic(config, seed).expect("valid generator config");
    let model = initial_model(&data, &TrainConfig::default()).expect("valid model");
    (data, model)
}
