//! Scoring memory states against a query, uniformly across methods.
//!
//! Every method maps a state to a query point and scores memory rows
//! against it. Multi-hop retrieval reuses the same map on retrieved states.

use crate::baselines::BilinearParams;
use crate::error::{PamError, Result};
use crate::numerics::{matmul, matmul_nt, Matrix};
use crate::predictor::MlpParams;

#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    /// Cosine similarity between raw embeddings.
    Cosine,
    /// Cosine similarity between the predicted point and each memory state.
    Predictor(&'a MlpParams),
    /// `qᵀ W m`.
    Bilinear(&'a BilinearParams),
    /// A fixed score table, row = query state, column = memory state.
    Table(&'a Matrix),
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Cosine => "cosine",
            Method::Predictor(_) => "predictor",
            Method::Bilinear(_) => "bilinear",
            Method::Table(_) => "table",
        }
    }

    pub fn trained(&self) -> bool {
        matches!(self, Method::Predictor(_) | Method::Bilinear(_))
    }
}

/// Scores queries against a memory bank of state embeddings.
pub struct Retriever<'a> {
    method: Method<'a>,
    memory: &'a Matrix,
    /// Unit-normalised memory rows for the cosine-based methods.
    unit_memory: Option<Matrix>,
}

fn unit_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(PamError::Numerical(format!("zero-norm row {r}")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

impl<'a> Retriever<'a> {
    pub fn new(method: Method<'a>, memory: &'a Matrix) -> Result<Self> {
        let unit_memory = match method {
            Method::Cosine | Method::Predictor(_) => Some(unit_rows(memory)?),
            Method::Bilinear(p) => {
                if p.weight.rows() != memory.cols() {
                    return Err(PamError::shape(
                        "retriever",
                        format!("bilinear width {} vs memory width {}", p.weight.rows(), memory.cols()),
                    ));
                }
                None
            }
            Method::Table(t) => {
                if t.cols() != memory.rows() {
                    return Err(PamError::shape(
                        "retriever",
                        format!("score table has {} columns for {} states", t.cols(), memory.rows()),
                    ));
                }
                None
            }
        };
        Ok(Retriever { method, memory, unit_memory })
    }

    pub fn method(&self) -> Method<'a> {
        self.method
    }

    pub fn n_memory(&self) -> usize {
        self.memory.rows()
    }

    /// Scores of every memory state for each query state in `ids`,
    /// one row per query.
    pub fn scores(&self, ids: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.memory.rows()) {
            return Err(PamError::UnknownState(bad));
        }
        match self.method {
            Method::Cosine => {
                let unit = self.unit_memory.as_ref().expect("cosine memory");
                matmul_nt(&unit.select_rows(ids), unit)
            }
            Method::Predictor(p) => {
                let predicted = p.forward_batch(&self.memory.select_rows(ids))?;
                matmul_nt(&unit_rows(&predicted)?, self.unit_memory.as_ref().expect("cosine memory"))
            }
            Method::Bilinear(p) => {
                let projected = matmul(&self.memory.select_rows(ids), &p.weight)?;
                matmul_nt(&projected, self.memory)
            }
            Method::Table(t) => Ok(t.select_rows(ids)),
        }
    }
}
