//! Test-side reference implementations, written independently of the
//! library code they check.

#![allow(dead_code)]

use calikd::{LabelVec, LogitMatrix, ProbMatrix};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Naive softmax: exponentiate, then normalize.
pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn random_logits(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, k), |_| scale * normal(rng))
}

pub fn random_probs(rng: &mut ChaCha8Rng, n: usize, k: usize) -> ProbMatrix {
    let scale = rng.random_range(0.1..6.0);
    let z = random_logits(rng, n, k, scale);
    let mut p = Array2::zeros((n, k));
    for i in 0..n {
        let row = softmax_row(&z.row(i).to_vec());
        for j in 0..k {
            p[[i, j]] = row[j];
        }
    }
    ProbMatrix::new(p).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> LabelVec {
    LabelVec::new((0..n).map(|_| rng.random_range(0..k)).collect(), k).unwrap()
}

/// Labels drawn from the rows of `p`, so the probabilities are calibrated.
pub fn sample_labels(rng: &mut ChaCha8Rng, p: &Array2<f64>) -> LabelVec {
    let k = p.ncols();
    let labels = p
        .rows()
        .into_iter()
        .map(|row| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (j, v) in row.iter().enumerate() {
                acc += v;
                if u < acc {
                    return j;
                }
            }
            k - 1
        })
        .collect();
    LabelVec::new(labels, k).unwrap()
}

/// Logits whose softmax is calibrated for the labels drawn alongside.
pub fn calibrated_logits(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> (LogitMatrix, LabelVec) {
    let z = random_logits(rng, n, k, scale);
    let p = Array2::from_shape_fn((n, k), |(i, j)| softmax_row(&z.row(i).to_vec())[j]);
    let y = sample_labels(rng, &p);
    (LogitMatrix::new(z).unwrap(), y)
}

/// First index of the largest value.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Equal-width ECE by explicit interval tests, returning (ece, over, under).
pub fn oracle_ece(p: &ProbMatrix, y: &LabelVec, m: usize) -> (f64, f64, f64) {
    let n = p.n();
    let mut conf = vec![Vec::new(); m];
    let mut hit = vec![Vec::new(); m];
    for i in 0..n {
        let row = p.row(i).to_vec();
        let pred = argmax(&row);
        let c = row[pred];
        let bin = (0..m)
            .find(|&b| {
                let lo = b as f64 / m as f64;
                let hi = (b + 1) as f64 / m as f64;
                if b + 1 == m {
                    c >= lo && c <= hi
                } else {
                    c >= lo && c < hi
                }
            })
            .unwrap();
        conf[bin].push(c);
        hit[bin].push(if pred == y.get(i) { 1.0 } else { 0.0 });
    }
    let (mut ece, mut over, mut under) = (0.0, 0.0, 0.0);
    for b in 0..m {
        if conf[b].is_empty() {
            continue;
        }
        let cnt = conf[b].len() as f64;
        let mc = conf[b].iter().sum::<f64>() / cnt;
        let ma = hit[b].iter().sum::<f64>() / cnt;
        let w = cnt / n as f64;
        ece += w * (ma - mc).abs();
        if mc > ma {
            over += w * (mc - ma);
        } else {
            under += w * (ma - mc);
        }
    }
    (ece, over, under)
}

/// ACE: per class, sort by (probability, index), cut into r contiguous
/// groups whose first `n mod r` take one extra sample.
pub fn oracle_ace(p: &ProbMatrix, y: &LabelVec, r: usize) -> f64 {
    let (n, k) = (p.n(), p.k());
    let base = n / r;
    let extra = n % r;
    let mut total = 0.0;
    for class in 0..k {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| p.values()[[a, class]].total_cmp(&p.values()[[b, class]]).then(a.cmp(&b)));
        let mut start = 0;
        for g in 0..r {
            let size = base + usize::from(g < extra);
            let idx = &order[start..start + size];
            start += size;
            let mc = idx.iter().map(|&i| p.values()[[i, class]]).sum::<f64>() / size as f64;
            let ma = idx.iter().filter(|&&i| y.get(i) == class).count() as f64 / size as f64;
            total += (ma - mc).abs();
        }
    }
    total / (k * r) as f64
}
