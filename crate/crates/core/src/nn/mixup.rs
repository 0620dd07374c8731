use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};

/// Convex combination of each row with a partner row:
/// `lambda * row_i + (1 - lambda) * row_partner(i)`, for features and targets alike.
pub fn mix_pairs(
    features: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    lambda: f64,
    partners: &[usize],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = features.nrows();
    if targets.nrows() != n || partners.len() != n {
        return Err(Error::shape("mixup rows disagree"));
    }
    if partners.iter().any(|&j| j >= n) {
        return Err(Error::shape("mixup partner out of range"));
    }
    let mix = |m: ArrayView2<'_, f64>| {
        Array2::from_shape_fn(m.dim(), |(i, c)| {
            lambda * m[[i, c]] + (1.0 - lambda) * m[[partners[i], c]]
        })
    };
    Ok((mix(features), mix(targets)))
}

/// Mixup for one batch: draws `lambda ~ Beta(alpha, alpha)` and a uniformly
/// random partner for every row.
pub fn mixup_batch<R: Rng + ?Sized>(
    features: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    alpha: f64,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("mixup alpha must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(e.to_string()))?;
    let lambda = beta.sample(rng);
    let n = features.nrows();
    let partners: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    mix_pairs(features, targets, lambda, &partners)
}
