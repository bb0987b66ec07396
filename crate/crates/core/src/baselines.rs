//! Comparison methods: untrained cosine retrieval and a learned bilinear
//! compatibility `s(x, y) = xᵀ W y` trained with the predictor's harness.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assoc_graph::AssociationGraph;
use crate::error::{PamError, Result};
use crate::numerics::{adam_step, infonce_from_logits, matmul, matmul_nt, matmul_tn, AdamState, Matrix};
use crate::predictor::{run_training, ContrastiveModel, TrainConfig, TrainReport};
use crate::rng::{substream, Domain};
use crate::worldgen::World;

/// Standard deviation of the noise added to the identity at initialisation.
pub const BILINEAR_INIT_NOISE: f64 = 0.01;

/// Cosine similarity of `query` to every memory row.
pub fn cosine_scores(query: &[f64], memory: &Matrix) -> Result<Vec<f64>> {
    if query.len() != memory.cols() {
        return Err(PamError::shape(
            "cosine_scores",
            format!("query width {} vs memory width {}", query.len(), memory.cols()),
        ));
    }
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(qn > 0.0) {
        return Err(PamError::Numerical("zero-norm query".into()));
    }
    Ok(memory
        .row_iter()
        .map(|m| {
            let dot: f64 = query.iter().zip(m).map(|(a, b)| a * b).sum();
            let mn = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (qn * mn)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearParams {
    pub weight: Matrix,
    pub init_seed: u64,
}

impl BilinearParams {
    /// `I + N(0, 0.01²)` so that early training behaves like dot-product
    /// retrieval.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = substream(seed, Domain::Init, 0xb1);
        let noise = Normal::new(0.0, BILINEAR_INIT_NOISE).expect("valid sigma");
        let mut weight = Matrix::identity(dim);
        for v in weight.as_mut_slice() {
            *v += noise.sample(&mut rng);
        }
        BilinearParams { weight, init_seed: seed }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite()
    }
}

impl ContrastiveModel for BilinearParams {
    type Grads = Matrix;

    fn tensor_sizes(&self) -> Vec<usize> {
        vec![self.weight.as_slice().len()]
    }

    fn loss_and_grads(&self, anchors: &Matrix, targets: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
        let projected = matmul(anchors, &self.weight)?;
        let mut logits = matmul_nt(&projected, targets)?;
        logits.scale(1.0 / temperature);
        let (loss, mut d_logits) = infonce_from_logits(&logits)?;
        d_logits.scale(1.0 / temperature);
        // dL/dW = Xᵀ · dS · Y
        let d_w = matmul_tn(anchors, &matmul(&d_logits, targets)?)?;
        Ok((loss, d_w))
    }

    fn apply(&mut self, grads: &Matrix, adam: &mut AdamState, lr: f64) -> Result<()> {
        adam_step(&mut [self.weight.as_mut_slice()], &[grads.as_slice()], adam, lr)
    }
}

pub fn bilinear_train(
    world: &World,
    graph: &AssociationGraph,
    config: &TrainConfig,
) -> Result<(BilinearParams, TrainReport)> {
    let mut params = BilinearParams::init(world.config.embed_dim, config.init_seed);
    let report = run_training(&mut params, world, graph, config)?;
    if !params.is_finite() {
        return Err(PamError::Numerical("non-finite bilinear weights after training".into()));
    }
    params.weight.round_to_f32();
    Ok((params, report))
}

/// `s_j = qᵀ W m_j` for every memory row.
pub fn bilinear_scores(params: &BilinearParams, query: &[f64], memory: &Matrix) -> Result<Vec<f64>> {
    let d = params.weight.rows();
    if query.len() != d || memory.cols() != d {
        return Err(PamError::shape(
            "bilinear_scores",
            format!("W is {d}x{d}, query {}, memory width {}", query.len(), memory.cols()),
        ));
    }
    let q = Matrix::from_vec(1, d, query.to_vec())?;
    let projected = matmul(&q, &params.weight)?;
    Ok(matmul_nt(&projected, memory)?.into_vec())
}
