//! Dense kernels with hand-written backward passes.
//!
//! All arithmetic is `f64`. Matrix products run through a blocked GEMM whose
//! output rows are split into fixed-size blocks, so results do not depend on
//! the size of the rayon pool.

mod adam;
mod infonce;
pub mod kernels;
mod matrix;
mod schedule;
#[cfg(test)]
pub(crate) mod testing;

pub use adam::{adam_step, AdamState};
pub use infonce::{infonce_from_logits, infonce_loss, InfoNceOutput};
pub use kernels::{
    gelu, gelu_backward, gelu_forward, gelu_grad, l2_normalize_backward, l2_normalize_rows,
    layernorm_backward, layernorm_forward, residual_add, LayerNormCache, LayerNormGrads,
};
pub use matrix::{matmul, matmul_nt, matmul_tn, Matrix};
pub use schedule::{anneal_temp, cosine_lr, ScheduleConfig};

/// Cosine similarity of two equal-length vectors. Zero-norm inputs yield NaN.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
