//! InfoNCE with in-batch negatives.
//!
//! Row `i` of the logit matrix scores anchor `i` against every target in the
//! batch; the diagonal entry is the positive and the remaining `B − 1`
//! entries are the negatives.

use crate::error::{PamError, Result};
use crate::numerics::kernels::{l2_normalize_backward, l2_normalize_rows};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix};

#[derive(Debug, Clone)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_predicted: Matrix,
    pub grad_targets: Matrix,
}

/// Mean cross-entropy of each row's softmax against its diagonal entry.
/// Returns the loss and its gradient with respect to the logits.
pub fn infonce_from_logits(logits: &Matrix) -> Result<(f64, Matrix)> {
    let b = logits.rows();
    if b < 2 || logits.cols() != b {
        return Err(PamError::shape(
            "infonce",
            format!("need a square logit matrix with B >= 2, got {:?}", logits.shape()),
        ));
    }
    if !logits.is_finite() {
        return Err(PamError::Numerical("non-finite InfoNCE logits".into()));
    }
    let mut grad = Matrix::zeros(b, b);
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|s| (s - max).exp()).sum();
        let log_z = max + denom.ln();
        total += log_z - row[i];
        let g = grad.row_mut(i);
        for (gj, s) in g.iter_mut().zip(row) {
            *gj = (s - log_z).exp() * inv_b;
        }
        g[i] -= inv_b;
    }
    Ok((total * inv_b, grad))
}

/// InfoNCE over cosine logits `cos(predicted_i, target_j) / temperature`.
pub fn infonce_loss(predicted: &Matrix, targets: &Matrix, temperature: f64) -> Result<InfoNceOutput> {
    if predicted.shape() != targets.shape() {
        return Err(PamError::shape(
            "infonce",
            format!("predicted {:?} vs targets {:?}", predicted.shape(), targets.shape()),
        ));
    }
    if !(temperature > 0.0) {
        return Err(PamError::config("temperature", "must be positive"));
    }
    let (p_hat, p_norm) = l2_normalize_rows(predicted)?;
    let (t_hat, t_norm) = l2_normalize_rows(targets)?;
    let mut logits = matmul_nt(&p_hat, &t_hat)?;
    logits.scale(1.0 / temperature);
    let (loss, mut d_logits) = infonce_from_logits(&logits)?;
    d_logits.scale(1.0 / temperature);
    let d_p_hat = matmul(&d_logits, &t_hat)?;
    let d_t_hat = matmul_tn(&d_logits, &p_hat)?;
    Ok(InfoNceOutput {
        loss,
        grad_predicted: l2_normalize_backward(&p_hat, &p_norm, &d_p_hat),
        grad_targets: l2_normalize_backward(&t_hat, &t_norm, &d_t_hat),
    })
}
