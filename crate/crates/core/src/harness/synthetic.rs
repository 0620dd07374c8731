use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitTag};
use crate::error::{Error, Result};

/// Gaussian-cluster classification benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub d: usize,
    pub k: usize,
    /// Expected distance between two class means, in units of the
    /// per-coordinate noise standard deviation.
    pub class_separation: f64,
    /// Probability that a training label is replaced by a different class.
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 5000,
            n_val: 1000,
            n_test: 2000,
            d: 32,
            k: 10,
            class_separation: 3.5,
            label_noise: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k < 2 {
            return bad("need at least 2 classes");
        }
        if self.d == 0 {
            return bad("feature dimension must be positive");
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("train and test splits must be non-empty");
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation must be positive");
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 0.5)");
        }
        Ok(())
    }
}

/// `k` clusters with identity covariance around random means of norm
/// `class_separation / sqrt(2)`; rows come out as train, then val, then test.
/// Label noise touches the training rows only.
pub fn gen_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let radius = spec.class_separation / std::f64::consts::SQRT_2;
    let mut means = Array2::<f64>::zeros((spec.k, spec.d));
    for mut row in means.outer_iter_mut() {
        row.mapv_inplace(|_| StandardNormal.sample(&mut rng));
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm * radius);
    }

    let n = spec.n_train + spec.n_val + spec.n_test;
    let mut features = Array2::<f64>::zeros((n, spec.d));
    let mut clean = Vec::with_capacity(n);
    let mut tags = Vec::with_capacity(n);
    for i in 0..n {
        let y = rng.random_range(0..spec.k);
        for (x, m) in features.row_mut(i).iter_mut().zip(means.row(y)) {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *x = m + noise;
        }
        clean.push(y);
        tags.push(if i < spec.n_train {
            SplitTag::Train
        } else if i < spec.n_train + spec.n_val {
            SplitTag::Val
        } else {
            SplitTag::Test
        });
    }

    let mut labels = clean.clone();
    for y in labels.iter_mut().take(spec.n_train) {
        if rng.random::<f64>() < spec.label_noise {
            let other = rng.random_range(0..spec.k - 1);
            *y = if other >= *y { other + 1 } else { other };
        }
    }
    Dataset::new(features, labels, tags, spec.k)?.with_clean_labels(clean)
}
