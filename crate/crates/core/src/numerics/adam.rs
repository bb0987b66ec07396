use serde::{Deserialize, Serialize};

use crate::error::{PamError, Result};

/// Bias-corrected Adam over a fixed list of parameter tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zeroed accumulators shaped like `sizes`, with the usual defaults.
    pub fn new(sizes: &[usize]) -> Self {
        Self::with_hyperparams(sizes, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(sizes: &[usize], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(PamError::shape(
            "adam_step",
            format!(
                "{} parameter tensors, {} gradients, {} accumulators",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(PamError::shape(
                "adam_step",
                format!("tensor {i}: {} params vs {} grads", p.len(), g.len()),
            ));
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(PamError::Numerical(format!(
                "non-finite gradient at step {} (tensor {i}, index {pos})",
                state.step_count + 1
            )));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
