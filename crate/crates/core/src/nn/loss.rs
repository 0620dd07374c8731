use ndarray::{Array2, ArrayView2};

use super::model::{Dense, MlpModel};
use crate::distill::{self, KdTerms};
use crate::error::{Error, Result};
use crate::prob;

/// What a batch is scored against.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Cross-entropy against integer labels.
    HardCe,
    /// Cross-entropy against per-row target distributions.
    SoftCe(ArrayView2<'a, f64>),
    /// Hard CE on labels mixed with KL to teacher probabilities that were
    /// already computed at the distillation temperature.
    KdComposite {
        teacher_probs: ArrayView2<'a, f64>,
        terms: KdTerms,
    },
}

/// Mean hard cross-entropy of `softmax(z)` and its gradient in `z`.
pub(crate) fn hard_ce(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let logp = prob::log_softmax_rows(logits, 1.0);
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n);
    (loss / n, grad)
}

/// Mean soft cross-entropy `-sum_j t_j log softmax(z)_j` and its gradient.
pub(crate) fn soft_ce(logits: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let logp = prob::log_softmax_rows(logits, 1.0);
    let mut loss = 0.0;
    for (t, lp) in targets.iter().zip(logp.iter()) {
        if *t != 0.0 {
            loss -= t * lp;
        }
    }
    let mut grad = logp.mapv(f64::exp);
    grad.zip_mut_with(&targets, |g, &t| *g = (*g - t) / n);
    (loss / n, grad)
}

/// Batch loss and exact gradients, including `0.5 * weight_decay * |theta|^2`.
pub fn loss_and_grads(
    model: &MlpModel,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    spec: &LossSpec<'_>,
    weight_decay: f64,
) -> Result<(f64, Vec<Dense>)> {
    let cache = model.forward_cached(features)?;
    let logits = cache.output.view();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("forward", "non-finite logits"));
    }
    let rows = logits.nrows();
    let k = logits.ncols();
    let check_labels = || -> Result<()> {
        if labels.len() != rows {
            return Err(Error::shape(format!("{} labels for {rows} rows", labels.len())));
        }
        if labels.iter().any(|&y| y >= k) {
            return Err(Error::shape("label outside the output classes"));
        }
        Ok(())
    };
    let check_targets = |t: &ArrayView2<'_, f64>| -> Result<()> {
        if t.dim() != logits.dim() {
            return Err(Error::shape(format!(
                "targets {:?} vs logits {:?}",
                t.dim(),
                logits.dim()
            )));
        }
        Ok(())
    };

    let (data_loss, d_out) = match spec {
        LossSpec::HardCe => {
            check_labels()?;
            hard_ce(logits, labels)
        }
        LossSpec::SoftCe(targets) => {
            check_targets(targets)?;
            soft_ce(logits, *targets)
        }
        LossSpec::KdComposite {
            teacher_probs,
            terms,
        } => {
            check_labels()?;
            check_targets(teacher_probs)?;
            let out = distill::kd_loss_with_grad(logits, *teacher_probs, labels, terms);
            (out.loss, out.grad)
        }
    };

    let mut grads = model.backward(&cache, d_out);
    let mut loss = data_loss;
    if weight_decay > 0.0 {
        loss += 0.5 * weight_decay * model.squared_norm();
        for (g, p) in grads.iter_mut().zip(model.layers()) {
            g.weights.scaled_add(weight_decay, &p.weights);
            g.bias.scaled_add(weight_decay, &p.bias);
        }
    }
    if !loss.is_finite() {
        return Err(Error::numerical("loss", format!("non-finite loss {loss}")));
    }
    Ok((loss, grads))
}
