pub mod ablations;
pub mod assoc_graph;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod io;
pub mod numerics;
pub mod predictor;
pub mod rng;
pub mod worldgen;

pub use error::{PamError, Result};
