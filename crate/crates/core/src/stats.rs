//! Correlation statistics for paired series.

use crate::error::{Error, Result};

/// Two equally long, finite series with at least three points.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSeries {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl PairedSeries {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::shape(format!("{} x values, {} y values", x.len(), y.len())));
        }
        if x.len() < 3 {
            return Err(Error::InvalidInput(format!("need at least 3 points, got {}", x.len())));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite value in series".into()));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_spread(x: &[f64], y: &[f64]) -> Result<()> {
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) {
        return Err(Error::DegenerateSeries("x is constant".into()));
    }
    if constant(y) {
        return Err(Error::DegenerateSeries("y is constant".into()));
    }
    Ok(())
}

/// Centered sums `(sxx, syy, sxy)`.
fn moments(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    x.iter().zip(y).fold((0.0, 0.0, 0.0), |(sxx, syy, sxy), (a, b)| {
        let (dx, dy) = (a - mx, b - my);
        (sxx + dx * dx, syy + dy * dy, sxy + dx * dy)
    })
}

fn pearson_raw(x: &[f64], y: &[f64]) -> Result<f64> {
    check_spread(x, y)?;
    let (sxx, syy, sxy) = moments(x, y);
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ordinary least-squares fit `y = intercept + slope * x`.
pub fn ols(s: &PairedSeries) -> Result<(f64, f64)> {
    if s.x.iter().all(|&a| a == s.x[0]) {
        return Err(Error::DegenerateSeries("x is constant".into()));
    }
    let (sxx, _, sxy) = moments(&s.x, &s.y);
    let slope = sxy / sxx;
    Ok((mean(&s.y) - slope * mean(&s.x), slope))
}

/// Coefficient of determination of the OLS line of `y` on `x`.
pub fn r_squared(s: &PairedSeries) -> Result<f64> {
    check_spread(&s.x, &s.y)?;
    let (sxx, syy, sxy) = moments(&s.x, &s.y);
    // 1 - SS_res / SS_tot for the OLS line reduces to sxy^2 / (sxx syy).
    Ok((sxy * sxy / (sxx * syy)).clamp(0.0, 1.0))
}

pub fn pearson(s: &PairedSeries) -> Result<f64> {
    pearson_raw(&s.x, &s.y)
}

/// 1-based ranks, ties sharing the average of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(s: &PairedSeries) -> Result<f64> {
    pearson_raw(&average_ranks(&s.x), &average_ranks(&s.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(x: &[f64], y: &[f64]) -> PairedSeries {
        PairedSeries::new(x.to_vec(), y.to_vec()).unwrap()
    }

    #[test]
    fn perfect_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        let s = series(&x, &y);
        assert!((r_squared(&s).unwrap() - 1.0).abs() < 1e-15);
        let (b, a) = ols(&s).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 3.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&series(&x, &neg)).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn four_point_hand_fit() {
        let s = series(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 2.0]);
        let (_, slope) = ols(&s).unwrap();
        assert!((slope - 0.7).abs() < 1e-12);
        // residual check through the definition 1 - SS_res / SS_tot
        let (b, a) = ols(&s).unwrap();
        let my = 1.25;
        let ss_res: f64 = s.x().iter().zip(s.y()).map(|(x, y)| (y - (b + a * x)).powi(2)).sum();
        let ss_tot: f64 = s.y().iter().map(|y| (y - my).powi(2)).sum();
        let r2 = r_squared(&s).unwrap();
        assert!((r2 - (1.0 - ss_res / ss_tot)).abs() < 1e-12);
        assert!((r2 - 49.0 / 55.0).abs() < 1e-12);
    }

    #[test]
    fn independent_noise_has_tiny_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
        assert!(r_squared(&series(&x, &y)).unwrap() < 0.05);
    }

    #[test]
    fn spearman_with_ties() {
        let s = series(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
        assert!((spearman(&s).unwrap() - 0.866).abs() < 1e-3);
        assert!((spearman(&s).unwrap() - 3f64.sqrt() / 2.0).abs() < 1e-12);
        let inc = series(&[1.0, 5.0, 9.0, 10.0], &[0.1, 0.2, 7.0, 8.0]);
        assert!((spearman(&inc).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_series() {
        let s = series(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]);
        assert!(matches!(r_squared(&s), Err(Error::DegenerateSeries(_))));
        assert!(matches!(pearson(&s), Err(Error::DegenerateSeries(_))));
        assert!(matches!(spearman(&s), Err(Error::DegenerateSeries(_))));
        assert!(PairedSeries::new(vec![1.0, 2.0], vec![1.0, 2.0]).is_err());
        assert!(PairedSeries::new(vec![1.0, 2.0, f64::NAN], vec![1.0, 2.0, 3.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (3usize..30).prop_flat_map(|n| {
                (
                    proptest::collection::vec(-100.0f64..100.0, n),
                    proptest::collection::vec(-100.0f64..100.0, n),
                )
            })
        }

        proptest! {
            #[test]
            fn r2_is_pearson_squared((x, y) in pairs()) {
                let s = PairedSeries::new(x, y).unwrap();
                if let (Ok(r2), Ok(r)) = (r_squared(&s), pearson(&s)) {
                    prop_assert!((r2 - r * r).abs() < 1e-12);
                }
            }

            #[test]
            fn affine_and_monotone_invariance((x, y) in pairs(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
                let s = PairedSeries::new(x.clone(), y.clone()).unwrap();
                let t = PairedSeries::new(x.iter().map(|v| a * v + b).collect(), y.clone()).unwrap();
                let u = PairedSeries::new(x.iter().map(|v| v.powi(3)).collect(), y).unwrap();
                if let (Ok(p1), Ok(p2)) = (pearson(&s), pearson(&t)) {
                    prop_assert!((p1 - p2).abs() < 1e-9);
                }
                if let (Ok(s1), Ok(s2)) = (spearman(&s), spearman(&u)) {
                    prop_assert_eq!(s1, s2);
                }
            }
        }
    }
}
