//! Contrastive training over temporal association pairs.
//!
//! The harness is shared by the predictor and the bilinear baseline: both
//! see the same pairs, batches, schedules and optimiser, and differ only in
//! how a batch of anchors is scored against a batch of targets.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::assoc_graph::{AnchorHoldout, AssociationGraph, EdgeSplit};
use crate::error::{PamError, Result};
use crate::numerics::{adam_step, anneal_temp, cosine_lr, infonce_loss, AdamState, Matrix, ScheduleConfig};
use crate::predictor::mlp::{init_params, MlpParams, ModelDims};
use crate::rng::{substream, Domain};
use crate::worldgen::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// One draw of pairs, repeated every epoch.
    Fixed,
    /// A fresh draw every epoch.
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Directed pairs per epoch; `None` uses every available pair.
    #[serde(default)]
    pub n_pairs: Option<usize>,
    pub sampling_mode: SamplingMode,
    pub schedule: ScheduleConfig,
    pub init_seed: u64,
    pub pair_seed: u64,
    pub hidden: usize,
    pub layers: usize,
    #[serde(skip)]
    pub anchor_holdout: Option<AnchorHoldout>,
    #[serde(skip)]
    pub edge_split: Option<EdgeSplit>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 512,
            n_pairs: None,
            sampling_mode: SamplingMode::Fixed,
            schedule: ScheduleConfig::default(),
            init_seed: 42,
            pair_seed: 42,
            hidden: 1024,
            layers: 4,
            anchor_holdout: None,
            edge_split: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(PamError::config("batch_size", "must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(PamError::config("epochs", "must be positive"));
        }
        if self.schedule.total_epochs != self.epochs {
            return Err(PamError::config(
                "schedule.total_epochs",
                format!("must equal epochs ({})", self.epochs),
            ));
        }
        if self.n_pairs == Some(0) {
            return Err(PamError::config("n_pairs", "must be positive"));
        }
        self.schedule.validate()
    }

    /// Seeds both the initialiser and the pair sampler.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self.pair_seed = seed;
        self
    }
}

/// Summary of a held-out or split constraint for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintEcho {
    pub fraction: f64,
    pub seed: u64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub pairs_per_epoch: usize,
    pub steps: u64,
    pub wall_clock_seconds: f64,
    pub config: TrainConfig,
    pub anchor_holdout: Option<ConstraintEcho>,
    pub edge_split: Option<ConstraintEcho>,
}

/// Every directed `(anchor, target)` pair the configuration allows: both
/// orientations of each (training) edge, minus held-out anchors.
pub fn directed_pool(graph: &AssociationGraph, config: &TrainConfig) -> Vec<(usize, usize)> {
    let edges = match &config.edge_split {
        Some(split) => split.train_edges.as_slice(),
        None => graph.edges(),
    };
    let allowed = |anchor: usize| {
        config
            .anchor_holdout
            .as_ref()
            .is_none_or(|h| !h.is_held(anchor))
    };
    let mut pool = Vec::with_capacity(edges.len() * 2);
    for &(a, b) in edges {
        if allowed(a) {
            pool.push((a, b));
        }
        if allowed(b) {
            pool.push((b, a));
        }
    }
    pool
}

/// Resolved pair source for a training run.
pub struct PairSampler {
    pool: Vec<(usize, usize)>,
    n_pairs: usize,
    mode: SamplingMode,
    seed: u64,
    fixed: Option<Vec<(usize, usize)>>,
}

impl PairSampler {
    pub fn new(graph: &AssociationGraph, config: &TrainConfig) -> Result<Self> {
        let pool = directed_pool(graph, config);
        if pool.is_empty() {
            return Err(PamError::config("n_pairs", "no training pairs available"));
        }
        let n_pairs = config.n_pairs.unwrap_or(pool.len());
        if n_pairs > pool.len() {
            return Err(PamError::config(
                "n_pairs",
                format!("requested {n_pairs} pairs but only {} directed pairs are available", pool.len()),
            ));
        }
        let mut sampler = PairSampler {
            pool,
            n_pairs,
            mode: config.sampling_mode,
            seed: config.pair_seed,
            fixed: None,
        };
        if sampler.mode == SamplingMode::Fixed {
            sampler.fixed = Some(sampler.draw(0));
        }
        Ok(sampler)
    }

    fn draw(&self, stream: u64) -> Vec<(usize, usize)> {
        if self.n_pairs == self.pool.len() {
            return self.pool.clone();
        }
        let mut rng = substream(self.seed, Domain::Pairs, stream);
        let mut picked: Vec<usize> = index::sample(&mut rng, self.pool.len(), self.n_pairs).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| self.pool[i]).collect()
    }

    /// Pairs for `epoch` (0-based), in canonical (unshuffled) order.
    pub fn pairs(&self, epoch: usize) -> Vec<(usize, usize)> {
        match &self.fixed {
            Some(p) => p.clone(),
            None => self.draw(epoch as u64 + 1),
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }
}

pub fn sample_pairs(graph: &AssociationGraph, config: &TrainConfig, epoch: usize) -> Result<Vec<(usize, usize)>> {
    Ok(PairSampler::new(graph, config)?.pairs(epoch))
}

/// A model trainable by InfoNCE over (anchor, target) embedding batches.
pub trait ContrastiveModel {
    type Grads;

    fn tensor_sizes(&self) -> Vec<usize>;

    fn loss_and_grads(&self, anchors: &Matrix, targets: &Matrix, temperature: f64) -> Result<(f64, Self::Grads)>;

    fn apply(&mut self, grads: &Self::Grads, adam: &mut AdamState, lr: f64) -> Result<()>;
}

impl ContrastiveModel for MlpParams {
    type Grads = MlpParams;

    fn tensor_sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    fn loss_and_grads(&self, anchors: &Matrix, targets: &Matrix, temperature: f64) -> Result<(f64, MlpParams)> {
        let (predicted, cache) = self.forward_with_cache(anchors)?;
        let out = infonce_loss(&predicted, targets, temperature)?;
        let grads = self.backward(&cache, &out.grad_predicted)?;
        Ok((out.loss, grads))
    }

    fn apply(&mut self, grads: &MlpParams, adam: &mut AdamState, lr: f64) -> Result<()> {
        let g = grads.tensors();
        adam_step(&mut self.tensors_mut(), &g, adam, lr)
    }
}

/// Runs the full optimisation loop on `model` in place.
pub fn run_training<M: ContrastiveModel>(
    model: &mut M,
    world: &World,
    graph: &AssociationGraph,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if graph.n_states() != world.n_states() {
        return Err(PamError::shape(
            "train",
            format!("graph has {} states, world {}", graph.n_states(), world.n_states()),
        ));
    }
    let sampler = PairSampler::new(graph, config)?;
    let start = Instant::now();
    let mut adam = AdamState::new(&model.tensor_sizes());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut pairs = sampler.pairs(epoch);
        pairs.shuffle(&mut substream(config.pair_seed, Domain::EpochOrder, epoch as u64));
        let lr = cosine_lr(epoch, &config.schedule);
        let temperature = anneal_temp(epoch, &config.schedule);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (batch, chunk) in pairs.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let anchor_ids: Vec<usize> = chunk.iter().map(|p| p.0).collect();
            let target_ids: Vec<usize> = chunk.iter().map(|p| p.1).collect();
            let anchors = world.embeddings.select_rows(&anchor_ids);
            let targets = world.embeddings.select_rows(&target_ids);
            let diverged = |detail: String| PamError::Training { epoch, batch, detail };
            let (loss, grads) = model
                .loss_and_grads(&anchors, &targets, temperature)
                .map_err(|e| diverged(e.to_string()))?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}")));
            }
            model
                .apply(&grads, &mut adam, lr)
                .map_err(|e| diverged(e.to_string()))?;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    let echo = |fraction: f64, seed: u64, size: usize| ConstraintEcho { fraction, seed, size };
    Ok(TrainReport {
        final_loss: *epoch_losses.last().expect("at least one epoch"),
        epoch_losses,
        pairs_per_epoch: sampler.n_pairs(),
        steps: adam.step_count,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        config: config.clone(),
        anchor_holdout: config
            .anchor_holdout
            .as_ref()
            .map(|h| echo(h.fraction, h.seed, h.held_states.len())),
        edge_split: config
            .edge_split
            .as_ref()
            .map(|s| echo(s.fraction, s.seed, s.train_edges.len())),
    })
}

/// Trains the residual MLP predictor. Returned parameters are rounded to
/// `f32`, the checkpoint precision, so in-memory and reloaded models agree.
pub fn train(world: &World, graph: &AssociationGraph, config: &TrainConfig) -> Result<(MlpParams, TrainReport)> {
    let dims = ModelDims::new(world.config.embed_dim, config.hidden, config.layers);
    let mut params = init_params(dims, config.init_seed)?;
    let report = run_training(&mut params, world, graph, config)?;
    if !params.is_finite() {
        return Err(PamError::Numerical("non-finite parameters after training".into()));
    }
    params.round_to_f32();
    Ok((params, report))
}

/// `ẑ = g(s_q)` for a stored state.
pub fn predict_point(params: &MlpParams, state_id: usize, world: &World) -> Result<Vec<f64>> {
    params.forward(world.embedding(state_id)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assoc_graph::{build_graph, holdout_anchor_ids, split_edges};
    use crate::worldgen::{gen_world, WorldConfig};

    fn toy() -> (World, AssociationGraph) {
        let w = gen_world(&WorldConfig {
            embed_dim: 8,
            n_rooms: 2,
            n_objects: 4,
            objects_per_room: 2,
            n_shared_objects: 0,
            n_trajectories: 2,
            trajectory_len: 20,
            room_dwell_mean: 4,
            state_noise_sigma: 1.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let g = build_graph(&w, 2).unwrap();
        (w, g)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            hidden: 16,
            layers: 3,
            schedule: ScheduleConfig { total_epochs: epochs, lr_start: 5e-3, ..ScheduleConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pool_has_both_orientations() {
        let (_, g) = toy();
        let pool = directed_pool(&g, &TrainConfig::default());
        assert_eq!(pool.len(), 2 * g.n_edges());
        assert!(pool.contains(&(0, 1)) && pool.contains(&(1, 0)));
    }

    #[test]
    fn fixed_pairs_repeat_and_online_pairs_change() {
        let (_, g) = toy();
        let pool = directed_pool(&g, &TrainConfig::default());
        let fixed = TrainConfig { n_pairs: Some(40), ..TrainConfig::default() };
        let online = TrainConfig { sampling_mode: SamplingMode::Online, ..fixed.clone() };
        let s = PairSampler::new(&g, &fixed).unwrap();
        assert_eq!(s.pairs(0), s.pairs(7));
        assert_eq!(s.pairs(0).len(), 40);
        let o = PairSampler::new(&g, &online).unwrap();
        assert_ne!(o.pairs(0), o.pairs(1));
        for p in o.pairs(3) {
            assert!(pool.contains(&p));
        }
        let mut distinct = o.pairs(2);
        distinct.dedup();
        assert_eq!(distinct.len(), 40);
    }

    #[test]
    fn too_many_pairs_names_the_field() {
        let (_, g) = toy();
        let cfg = TrainConfig { n_pairs: Some(1_000_000), ..TrainConfig::default() };
        match PairSampler::new(&g, &cfg) {
            Err(PamError::Config { field, .. }) => assert_eq!(field, "n_pairs"),
            other => panic!("expected config error, got {:?}", other.err()),
        }
    }

    #[test]
    fn held_anchors_never_appear_on_the_input_side() {
        let (w, g) = toy();
        let held = holdout_anchor_ids(w.n_states(), 0.2, 5).unwrap();
        let cfg = TrainConfig { anchor_holdout: Some(held.clone()), ..TrainConfig::default() };
        let pool = directed_pool(&g, &cfg);
        assert!(pool.iter().all(|&(a, _)| !held.is_held(a)));
        assert!(pool.iter().any(|&(_, b)| held.is_held(b)));
    }

    #[test]
    fn split_restricts_pairs_to_train_edges() {
        let (_, g) = toy();
        let split = split_edges(&g, 0.7, 1).unwrap();
        let cfg = TrainConfig { edge_split: Some(split.clone()), ..TrainConfig::default() };
        let pool = directed_pool(&g, &cfg);
        assert_eq!(pool.len(), 2 * split.train_edges.len());
        for (a, b) in pool {
            assert!(split.train_edges.contains(&(a.min(b), a.max(b))));
        }
    }

    #[test]
    fn schedule_must_span_the_run() {
        let (w, g) = toy();
        let cfg = TrainConfig { epochs: 3, ..quick(5) };
        assert!(matches!(train(&w, &g, &cfg), Err(PamError::Config { field, .. }) if field == "schedule.total_epochs"));
    }

    #[test]
    fn toy_world_loss_falls() {
        let (w, g) = toy();
        let (_, report) = train(&w, &g, &quick(150)).unwrap();
        let l = &report.epoch_losses;
        assert!(report.final_loss < 0.7 * l[0], "{} -> {}", l[0], report.final_loss);
        let early: f64 = l[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(late < early);
        assert_eq!(report.steps, 150 * (2 * g.n_edges()).div_ceil(32) as u64);
    }

    #[test]
    fn two_state_world_is_learned_almost_perfectly() {
        let (w, _) = toy();
        let metas = (0..4)
            .map(|i| crate::assoc_graph::StateMeta { trajectory: 0, timestep: i, room: 0 })
            .collect();
        let mut w2 = w.clone();
        w2.embeddings = w.embeddings.select_rows(&[0, 1, 2, 3]);
        w2.states.truncate(4);
        let g = AssociationGraph::from_edges(1, metas, [(0, 1), (2, 3)]).unwrap();
        let cfg = TrainConfig { batch_size: 4, ..quick(300) };
        let (_, report) = train(&w2, &g, &cfg).unwrap();
        assert!(report.final_loss < 0.1, "{}", report.final_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let (w, g) = toy();
        let (a, ra) = train(&w, &g, &quick(5)).unwrap();
        let (b, rb) = train(&w, &g, &quick(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
        let (c, _) = train(&w, &g, &quick(5).with_seed(7)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn non_finite_input_reports_epoch_and_batch() {
        let (mut w, g) = toy();
        for v in w.embeddings.row_mut(3) {
            *v = f64::NAN;
        }
        match train(&w, &g, &quick(2)) {
            Err(PamError::Training { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected training error, got {:?}", other.map(|r| r.1.final_loss)),
        }
    }

    #[test]
    fn report_echoes_constraints() {
        let (w, g) = toy();
        let held = holdout_anchor_ids(w.n_states(), 0.25, 5).unwrap();
        let cfg = TrainConfig { anchor_holdout: Some(held.clone()), ..quick(1) };
        let (_, r) = train(&w, &g, &cfg).unwrap();
        let echo = r.anchor_holdout.unwrap();
        assert_eq!((echo.fraction, echo.seed, echo.size), (0.25, 5, held.held_states.len()));
        assert!(r.edge_split.is_none());
    }
}
