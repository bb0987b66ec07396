//! The inward predictor: a residual MLP mapping a state embedding to the
//! predicted centre of its temporal association neighbourhood.

mod mlp;
mod training;

pub use mlp::{init_params, Dense, ForwardCache, MlpParams, ModelDims};
pub use training::{
    directed_pool, predict_point, run_training, sample_pairs, train, ConstraintEcho,
    ContrastiveModel, PairSampler, SamplingMode, TrainConfig, TrainReport,
};
