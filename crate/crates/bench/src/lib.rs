//! Fixtures shared by the benchmarks.

use calikd::{LabelVec, LogitMatrix, ProbMatrix, Temperature};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random logits in `[-scale, scale]` with labels drawn to agree with the
/// argmax most of the time.
pub fn logits_and_labels(n: usize, k: usize, scale: f64, seed: u64) -> (LogitMatrix, LabelVec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Array2::from_shape_fn((n, k), |_| rng.random_range(-scale..scale));
    let z = LogitMatrix::new(z).expect("finite");
    let labels = z
        .argmax()
        .into_iter()
        .map(|top| if rng.random::<f64>() < 0.7 { top } else { rng.random_range(0..k) })
        .collect();
    (z, LabelVec::new(labels, k).expect("labels in range"))
}

pub fn probs_and_labels(n: usize, k: usize, seed: u64) -> (ProbMatrix, LabelVec) {
    let (z, y) = logits_and_labels(n, k, 5.0, seed);
    (calikd::tempered_softmax(&z, Temperature::ONE), y)
}

/// Dense row-major features for `n` samples of dimension `d`.
pub fn features(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}
