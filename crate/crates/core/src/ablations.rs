//! Named, reproducible experiment pipelines over the world, graph,
//! predictor, baselines and metrics.
//!
//! A [`Lab`] owns one world and caches every model it trains, keyed by arm,
//! model kind and seed, so experiments sharing a model train it once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assoc_graph::{
    build_graph, count_cross_trajectory_edges, holdout_anchor_ids, shuffled_graph, split_edges, AnchorHoldout,
    AssociationGraph, EdgeSplit,
};
use crate::baselines::{bilinear_train, BilinearParams};
use crate::error::{PamError, Result};
use crate::eval::{
    cross_room_recall, evaluate_on, matched_negative_auc, mean_reciprocal_rank, select_queries_where, EvalConfig,
    Method, MetricsReport, QueryCriterion, QuerySets, Retriever,
};
use crate::io::{
    graph_to_bytes, json_leaves_csv, read_bytes, save_bilinear, save_predictor, sha256_hex, to_json_bytes, world_hash, write_bytes,
    write_json, RunManifest, WORLD_HASH_FILE,
};
use crate::predictor::{directed_pool, train, MlpParams, SamplingMode, TrainConfig, TrainReport};
use crate::rng::{substream, Domain};
use crate::worldgen::{gen_world, World, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    Main,
    Shuffle,
    MatchedNegatives,
    HoldoutAnchor,
    EdgeDisjoint,
    BridgingOracle,
    ArchSweep,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 7] = [
        ExperimentName::Main,
        ExperimentName::Shuffle,
        ExperimentName::MatchedNegatives,
        ExperimentName::HoldoutAnchor,
        ExperimentName::EdgeDisjoint,
        ExperimentName::BridgingOracle,
        ExperimentName::ArchSweep,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentName::Main => "main",
            ExperimentName::Shuffle => "shuffle",
            ExperimentName::MatchedNegatives => "matched_negatives",
            ExperimentName::HoldoutAnchor => "holdout_anchor",
            ExperimentName::EdgeDisjoint => "edge_disjoint",
            ExperimentName::BridgingOracle => "bridging_oracle",
            ExperimentName::ArchSweep => "arch_sweep",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = PamError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|n| n.as_str()).collect();
            PamError::config("experiment", format!("unknown experiment `{s}`; valid names: {}", valid.join(", ")))
        })
    }
}

/// One architecture-sweep configuration, trained on the split protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub label: String,
    pub layers: usize,
    pub hidden: usize,
    #[serde(default)]
    pub n_pairs: Option<usize>,
    pub sampling_mode: SamplingMode,
}

impl SweepEntry {
    fn new(label: &str, layers: usize, hidden: usize, n_pairs: usize, sampling_mode: SamplingMode) -> Self {
        SweepEntry { label: label.into(), layers, hidden, n_pairs: Some(n_pairs), sampling_mode }
    }

    /// The six development configurations, Baseline through D2.
    pub fn full_sweep() -> Vec<SweepEntry> {
        use SamplingMode::{Fixed, Online};
        vec![
            SweepEntry::new("baseline", 3, 256, 100_000, Fixed),
            SweepEntry::new("capacity", 3, 1024, 100_000, Fixed),
            SweepEntry::new("depth_b", 4, 1024, 100_000, Fixed),
            SweepEntry::new("coverage_c", 3, 1024, 200_000, Fixed),
            SweepEntry::new("both_online_d", 4, 1024, 200_000, Online),
            SweepEntry::new("both_fixed_d2", 4, 1024, 200_000, Fixed),
        ]
    }
}

fn default_seeds() -> Vec<u64> {
    vec![42, 123, 456]
}
fn default_tau() -> usize {
    5
}
fn default_holdout_fraction() -> f64 {
    0.2
}
fn default_split_fraction() -> f64 {
    0.7
}
fn default_aux_seed() -> u64 {
    42
}
fn default_bridging_instances() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    pub world: WorldConfig,
    #[serde(default = "default_tau")]
    pub tau: usize,
    pub train: TrainConfig,
    /// Bilinear training settings; the predictor's when absent.
    #[serde(default)]
    pub bilinear: Option<TrainConfig>,
    pub eval: EvalConfig,
    #[serde(default = "default_seeds")]
    pub train_seeds: Vec<u64>,
    /// Training seeds for the control experiments (shuffle, holdout,
    /// edge-disjoint, sweep); `train_seeds` when absent.
    #[serde(default)]
    pub control_seeds: Option<Vec<u64>>,
    #[serde(default = "default_holdout_fraction")]
    pub holdout_fraction: f64,
    #[serde(default = "default_aux_seed")]
    pub holdout_seed: u64,
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    #[serde(default = "default_aux_seed")]
    pub split_seed: u64,
    #[serde(default = "default_aux_seed")]
    pub shuffle_seed: u64,
    #[serde(default = "default_aux_seed")]
    pub bridging_seed: u64,
    #[serde(default = "default_bridging_instances")]
    pub bridging_instances: usize,
    #[serde(default = "SweepEntry::full_sweep")]
    pub sweep: Vec<SweepEntry>,
}

impl ExperimentSpec {
    /// Full-scale settings for `name`.
    pub fn full_scale(name: ExperimentName) -> Self {
        ExperimentSpec {
            name,
            world: WorldConfig::default(),
            tau: default_tau(),
            train: TrainConfig::default(),
            bilinear: None,
            eval: EvalConfig::default(),
            train_seeds: default_seeds(),
            control_seeds: None,
            holdout_fraction: default_holdout_fraction(),
            holdout_seed: default_aux_seed(),
            split_fraction: default_split_fraction(),
            split_seed: default_aux_seed(),
            shuffle_seed: default_aux_seed(),
            bridging_seed: default_aux_seed(),
            bridging_instances: default_bridging_instances(),
            sweep: SweepEntry::full_sweep(),
        }
    }

    pub fn control_seeds(&self) -> &[u64] {
        self.control_seeds.as_deref().unwrap_or(&self.train_seeds)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if let Some(b) = &self.bilinear {
            b.validate()?;
        }
        self.eval.validate()?;
        if self.tau == 0 {
            return Err(PamError::config("tau", "must be at least 1"));
        }
        if self.train_seeds.is_empty() {
            return Err(PamError::config("train_seeds", "must not be empty"));
        }
        if self.control_seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(PamError::config("control_seeds", "must not be empty when given"));
        }
        for (field, v) in [("holdout_fraction", self.holdout_fraction), ("split_fraction", self.split_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(PamError::config(field, "must lie strictly between 0 and 1"));
            }
        }
        for (i, e) in self.sweep.iter().enumerate() {
            if e.layers < 3 || e.hidden == 0 {
                return Err(PamError::config(format!("sweep[{i}]"), "needs layers >= 3 and hidden > 0"));
            }
        }
        Ok(())
    }
}

/// Which graph (and training constraint) a model was trained under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Intact,
    Shuffled,
    Holdout,
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Predictor,
    Bilinear,
    /// Index into the spec's sweep list.
    Sweep(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModelKey {
    pub arm: Arm,
    pub kind: ModelKind,
    pub seed: u64,
}

impl ModelKey {
    /// File stem for the model's checkpoint.
    pub fn stem(&self, spec: &ExperimentSpec) -> String {
        let arm = match self.arm {
            Arm::Intact => "intact",
            Arm::Shuffled => "shuffled",
            Arm::Holdout => "holdout",
            Arm::Split => "split",
        };
        let kind = match self.kind {
            ModelKind::Predictor => "predictor".to_string(),
            ModelKind::Bilinear => "bilinear".to_string(),
            ModelKind::Sweep(i) => format!("sweep_{}", spec.sweep.get(i).map_or("unknown", |e| e.label.as_str())),
        };
        format!("{arm}_{kind}_seed{}", self.seed)
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Predictor(MlpParams),
    Bilinear(BilinearParams),
}

impl Model {
    pub fn method(&self) -> Method<'_> {
        match self {
            Model::Predictor(p) => Method::Predictor(p),
            Model::Bilinear(p) => Method::Bilinear(p),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub key: ModelKey,
    pub model: Model,
    pub report: TrainReport,
}

/// Training outcome without wall-clock fields, for byte-stable reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: String,
    pub seed: u64,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub steps: u64,
    pub first_loss: f64,
    pub final_loss: f64,
}

impl TrainSummary {
    fn of(t: &Trained, spec: &ExperimentSpec) -> Self {
        TrainSummary {
            model: t.key.stem(spec),
            seed: t.key.seed,
            epochs: t.report.epoch_losses.len(),
            pairs_per_epoch: t.report.pairs_per_epoch,
            steps: t.report.steps,
            first_loss: t.report.epoch_losses[0],
            final_loss: t.report.final_loss,
        }
    }
}

/// Mean and sample standard deviation (`None` for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub metric: String,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub n: usize,
}

/// Mean ± SD of every flat metric across reports, in first-seen order.
pub fn summarise(reports: &[&MetricsReport]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (method, metric, v) in r.flat_rows() {
            let key = (method, metric);
            if !order.contains(&key) {
                order.push(key.clone());
            }
            if let Some(v) = v {
                values.entry(key).or_default().push(v);
            }
        }
    }
    order
        .into_iter()
        .map(|key| {
            let vals = values.get(&key).cloned().unwrap_or_default();
            let (mean, sd) = mean_sd(&vals);
            SummaryRow {
                method: key.0,
                metric: key.1,
                mean: (!vals.is_empty()).then_some(mean),
                sd,
                n: vals.len(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Results

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainSeed {
    pub seed: u64,
    pub predictor: TrainSummary,
    pub bilinear: TrainSummary,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainResult {
    pub seeds: Vec<MainSeed>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleSeed {
    pub seed: u64,
    pub intact_training: TrainSummary,
    pub shuffled_training: TrainSummary,
    pub intact: MetricsReport,
    pub shuffled: MetricsReport,
    /// Predictor `1 − shuffled / intact` per metric with a positive intact value.
    pub collapse: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleResult {
    pub world_hash: String,
    pub intact_graph_hash: String,
    pub shuffled_graph_hash: String,
    pub seeds: Vec<ShuffleSeed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAuc {
    pub method: String,
    pub auc: Option<f64>,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSeed {
    pub seed: u64,
    pub methods: Vec<MethodAuc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MatchedResult {
    Completed { queries: usize, seeds: Vec<MatchedSeed> },
    /// No query has a same-room state it was never co-present with.
    NotApplicable { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRecall {
    pub method: String,
    pub first: f64,
    pub second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSeed {
    pub seed: u64,
    pub training: TrainSummary,
    /// `first` = train-anchor queries, `second` = held-out queries.
    pub cbr: Vec<PairedRecall>,
    pub train_anchor_queries: usize,
    pub held_queries: usize,
    /// Training pairs whose anchor is a held state; zero by construction.
    pub held_anchor_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutResult {
    pub held_states: usize,
    pub fraction: f64,
    pub seed: u64,
    pub k: usize,
    pub seeds: Vec<HoldoutSeed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSeed {
    pub seed: u64,
    pub training: TrainSummary,
    /// `first` = train associations, `second` = held-out associations.
    pub recall: Vec<PairedRecall>,
    pub train_queries: usize,
    pub held_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeResult {
    pub train_edges: usize,
    pub held_edges: usize,
    pub k: usize,
    pub seeds: Vec<EdgeSeed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgingAudit {
    pub cross_trajectory_edges: usize,
    pub bridge_states: usize,
    /// Trajectory pairs that both contain a state holding the same shared object.
    pub linked_trajectory_pairs: usize,
    pub instances: usize,
    pub reached: usize,
    pub reach_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub layers: usize,
    pub hidden: usize,
    pub sampling_mode: SamplingMode,
    pub seed: u64,
    pub training: TrainSummary,
    pub recall: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub k: usize,
    pub queries: usize,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentResult {
    Main(MainResult),
    Shuffle(ShuffleResult),
    MatchedNegatives(MatchedResult),
    HoldoutAnchor(HoldoutResult),
    EdgeDisjoint(EdgeResult),
    BridgingOracle(BridgingAudit),
    ArchSweep(SweepResult),
}

// ---------------------------------------------------------------------------
// Bridging oracle

/// Objects held by two or more rooms.
fn shared_objects(world: &World) -> Vec<usize> {
    (0..world.object_rooms.len()).filter(|&o| world.object_rooms[o].len() > 1).collect()
}

/// For each state, the shared objects present in it.
pub fn bridge_objects(world: &World) -> Vec<Vec<usize>> {
    let shared = shared_objects(world);
    world
        .states
        .iter()
        .map(|s| s.objects_present.iter().copied().filter(|o| shared.contains(o)).collect())
        .collect()
}

/// Two-hop oracle over the association graph.
///
/// An instance is a pair `(A, C)` from different trajectories where A and C
/// each have an associate holding the same shared object. The oracle knows
/// every bridge state and reaches C when some bridge state is associated
/// with both A and C. Instances are drawn with `seed`, at most `max_instances`
/// of them.
pub fn bridging_oracle(
    graph: &AssociationGraph,
    objects: &[Vec<usize>],
    max_instances: usize,
    seed: u64,
) -> Result<BridgingAudit> {
    if objects.len() != graph.n_states() {
        return Err(PamError::shape("bridging_oracle", "one object list per state"));
    }
    let n = graph.n_states();
    let is_bridge: Vec<bool> = objects.iter().map(|o| !o.is_empty()).collect();
    // Shared objects reachable in one hop from each state.
    let via: Vec<Vec<usize>> = (0..n)
        .map(|s| {
            let mut o: Vec<usize> = graph
                .associates(s)
                .iter()
                .flat_map(|&b| objects[b].iter().copied())
                .collect();
            o.sort_unstable();
            o.dedup();
            o
        })
        .collect();
    let mut by_object: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (s, objs) in via.iter().enumerate() {
        for &o in objs {
            by_object.entry(o).or_default().push(s);
        }
    }
    let mut trajectories: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (s, objs) in objects.iter().enumerate() {
        for &o in objs {
            trajectories.entry(o).or_default().insert(graph.meta(s).trajectory);
        }
    }
    let mut linked = BTreeSet::new();
    for ts in trajectories.values() {
        let ts: Vec<usize> = ts.iter().copied().collect();
        for (i, &a) in ts.iter().enumerate() {
            for &b in &ts[i + 1..] {
                linked.insert((a, b));
            }
        }
    }

    let starts: Vec<usize> = (0..n).filter(|&s| !via[s].is_empty()).collect();
    let mut rng = substream(seed, Domain::Queries, 0xb41d);
    let mut instances = 0usize;
    let mut reached = 0usize;
    let mut attempts = 0usize;
    while instances < max_instances && attempts < max_instances * 20 && !starts.is_empty() {
        attempts += 1;
        let a = starts[rng.random_range(0..starts.len())];
        let o = via[a][rng.random_range(0..via[a].len())];
        let ends: Vec<usize> = by_object[&o]
            .iter()
            .copied()
            .filter(|&c| graph.meta(c).trajectory != graph.meta(a).trajectory)
            .collect();
        if ends.is_empty() {
            continue;
        }
        let c = ends[rng.random_range(0..ends.len())];
        instances += 1;
        let hit = graph
            .associates(a)
            .iter()
            .any(|&b| is_bridge[b] && graph.is_associated(b, c));
        reached += hit as usize;
    }
    Ok(BridgingAudit {
        cross_trajectory_edges: count_cross_trajectory_edges(graph),
        bridge_states: is_bridge.iter().filter(|&&b| b).count(),
        linked_trajectory_pairs: linked.len(),
        instances,
        reached,
        reach_rate: if instances == 0 { 0.0 } else { reached as f64 / instances as f64 },
    })
}

// ---------------------------------------------------------------------------
// Lab

pub struct Lab {
    spec: ExperimentSpec,
    world: World,
    graph: AssociationGraph,
    shuffled: OnceLock<AssociationGraph>,
    holdout: OnceLock<AnchorHoldout>,
    split: OnceLock<(EdgeSplit, AssociationGraph, AssociationGraph)>,
    cache: Mutex<BTreeMap<ModelKey, Arc<Trained>>>,
    log: Mutex<Vec<String>>,
}

impl Lab {
    pub fn new(spec: ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let world = gen_world(&spec.world)?;
        Self::with_world(spec, world)
    }

    /// Uses an existing world; its configuration replaces `spec.world`.
    pub fn with_world(mut spec: ExperimentSpec, world: World) -> Result<Self> {
        spec.world = world.config.clone();
        spec.validate()?;
        let graph = build_graph(&world, spec.tau)?;
        Ok(Lab {
            spec,
            world,
            graph,
            shuffled: OnceLock::new(),
            holdout: OnceLock::new(),
            split: OnceLock::new(),
            cache: Mutex::new(BTreeMap::new()),
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn spec(&self) -> &ExperimentSpec {
        &self.spec
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn graph(&self) -> &AssociationGraph {
        &self.graph
    }

    pub fn log(&self, line: impl Into<String>) {
        self.log.lock().expect("log lock").push(line.into());
    }

    pub fn log_lines(&self) -> Vec<String> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn shuffled_graph(&self) -> Result<&AssociationGraph> {
        if self.shuffled.get().is_none() {
            let g = shuffled_graph(&self.world, self.spec.tau, self.spec.shuffle_seed)?;
            let _ = self.shuffled.set(g);
        }
        Ok(self.shuffled.get().expect("set above"))
    }

    pub fn holdout(&self) -> Result<&AnchorHoldout> {
        if self.holdout.get().is_none() {
            let h = holdout_anchor_ids(self.world.n_states(), self.spec.holdout_fraction, self.spec.holdout_seed)?;
            let _ = self.holdout.set(h);
        }
        Ok(self.holdout.get().expect("set above"))
    }

    /// The edge split with its train and held-out subgraphs.
    pub fn split(&self) -> Result<&(EdgeSplit, AssociationGraph, AssociationGraph)> {
        if self.split.get().is_none() {
            let s = split_edges(&self.graph, self.spec.split_fraction, self.spec.split_seed)?;
            let train = self.graph.subgraph(&s.train_edges)?;
            let held = self.graph.subgraph(&s.test_edges)?;
            let _ = self.split.set((s, train, held));
        }
        Ok(self.split.get().expect("set above"))
    }

    fn train_config(&self, key: &ModelKey) -> Result<TrainConfig> {
        let base = match key.kind {
            ModelKind::Bilinear => self.spec.bilinear.clone().unwrap_or_else(|| self.spec.train.clone()),
            ModelKind::Predictor => self.spec.train.clone(),
            ModelKind::Sweep(i) => {
                let e = self
                    .spec
                    .sweep
                    .get(i)
                    .ok_or_else(|| PamError::config("sweep", format!("no entry {i}")))?;
                TrainConfig {
                    layers: e.layers,
                    hidden: e.hidden,
                    n_pairs: e.n_pairs,
                    sampling_mode: e.sampling_mode,
                    ..self.spec.train.clone()
                }
            }
        };
        let mut cfg = base.with_seed(key.seed);
        match key.arm {
            Arm::Holdout => cfg.anchor_holdout = Some(self.holdout()?.clone()),
            Arm::Split => cfg.edge_split = Some(self.split()?.0.clone()),
            Arm::Intact | Arm::Shuffled => {}
        }
        Ok(cfg)
    }

    fn training_graph(&self, arm: Arm) -> Result<&AssociationGraph> {
        match arm {
            Arm::Shuffled => self.shuffled_graph(),
            _ => Ok(&self.graph),
        }
    }

    /// The model for `key`, training it on first use.
    pub fn trained(&self, key: ModelKey) -> Result<Arc<Trained>> {
        if let Some(t) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(t));
        }
        let cfg = self.train_config(&key)?;
        let graph = self.training_graph(key.arm)?;
        let start = Instant::now();
        let (model, report) = match key.kind {
            ModelKind::Bilinear => {
                let (p, r) = bilinear_train(&self.world, graph, &cfg)?;
                (Model::Bilinear(p), r)
            }
            ModelKind::Predictor | ModelKind::Sweep(_) => {
                let (p, r) = train(&self.world, graph, &cfg)?;
                (Model::Predictor(p), r)
            }
        };
        self.log(format!(
            "trained {} in {:.1}s: {} epochs x {} pairs, loss {:.4} -> {:.4}",
            key.stem(&self.spec),
            start.elapsed().as_secs_f64(),
            report.epoch_losses.len(),
            report.pairs_per_epoch,
            report.epoch_losses[0],
            report.final_loss,
        ));
        let t = Arc::new(Trained { key, model, report });
        self.cache.lock().expect("cache lock").insert(key, Arc::clone(&t));
        Ok(t)
    }

    /// Trains every key concurrently; results are cached.
    fn train_all(&self, keys: &[ModelKey]) -> Result<Vec<Arc<Trained>>> {
        keys.par_iter().map(|&k| self.trained(k)).collect()
    }

    /// Every model trained so far, in key order.
    pub fn trained_models(&self) -> Vec<Arc<Trained>> {
        self.cache.lock().expect("cache lock").values().cloned().collect()
    }

    fn key(arm: Arm, kind: ModelKind, seed: u64) -> ModelKey {
        ModelKey { arm, kind, seed }
    }

    pub fn run(&self) -> Result<ExperimentResult> {
        self.run_experiment(self.spec.name)
    }

    pub fn run_experiment(&self, name: ExperimentName) -> Result<ExperimentResult> {
        let start = Instant::now();
        let out = match name {
            ExperimentName::Main => ExperimentResult::Main(self.run_main()?),
            ExperimentName::Shuffle => ExperimentResult::Shuffle(self.run_shuffle()?),
            ExperimentName::MatchedNegatives => ExperimentResult::MatchedNegatives(self.run_matched_negatives()?),
            ExperimentName::HoldoutAnchor => ExperimentResult::HoldoutAnchor(self.run_holdout_anchor()?),
            ExperimentName::EdgeDisjoint => ExperimentResult::EdgeDisjoint(self.run_edge_disjoint()?),
            ExperimentName::BridgingOracle => ExperimentResult::BridgingOracle(self.run_bridging_oracle()?),
            ExperimentName::ArchSweep => ExperimentResult::ArchSweep(self.run_arch_sweep()?),
        };
        self.log(format!("{name} finished in {:.1}s", start.elapsed().as_secs_f64()));
        Ok(out)
    }

    fn retriever<'a>(&'a self, method: Method<'a>) -> Result<Retriever<'a>> {
        Retriever::new(method, &self.world.embeddings)
    }

    pub fn run_main(&self) -> Result<MainResult> {
        let seeds = &self.spec.train_seeds;
        let keys: Vec<ModelKey> = seeds
            .iter()
            .flat_map(|&s| [Self::key(Arm::Intact, ModelKind::Predictor, s), Self::key(Arm::Intact, ModelKind::Bilinear, s)])
            .collect();
        self.train_all(&keys)?;
        let sets = QuerySets::select(&self.graph, &self.spec.eval);
        let mut out = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let pred = self.trained(Self::key(Arm::Intact, ModelKind::Predictor, seed))?;
            let bil = self.trained(Self::key(Arm::Intact, ModelKind::Bilinear, seed))?;
            let retrievers = [
                self.retriever(pred.model.method())?,
                self.retriever(Method::Cosine)?,
                self.retriever(bil.model.method())?,
            ];
            out.push(MainSeed {
                seed,
                predictor: TrainSummary::of(&pred, &self.spec),
                bilinear: TrainSummary::of(&bil, &self.spec),
                metrics: evaluate_on(&retrievers, &self.graph, &sets, &self.spec.eval)?,
            });
        }
        let summary = summarise(&out.iter().map(|s| &s.metrics).collect::<Vec<_>>());
        Ok(MainResult { seeds: out, summary })
    }

    pub fn run_shuffle(&self) -> Result<ShuffleResult> {
        let shuffled = self.shuffled_graph()?;
        let seeds = self.spec.control_seeds();
        let keys: Vec<ModelKey> = seeds
            .iter()
            .flat_map(|&s| [Self::key(Arm::Intact, ModelKind::Predictor, s), Self::key(Arm::Shuffled, ModelKind::Predictor, s)])
            .collect();
        self.train_all(&keys)?;
        let intact_sets = QuerySets::select(&self.graph, &self.spec.eval);
        let shuffled_sets = QuerySets::select(shuffled, &self.spec.eval);
        let mut out = Vec::new();
        for &seed in seeds {
            let a = self.trained(Self::key(Arm::Intact, ModelKind::Predictor, seed))?;
            let b = self.trained(Self::key(Arm::Shuffled, ModelKind::Predictor, seed))?;
            let intact = evaluate_on(
                &[self.retriever(a.model.method())?, self.retriever(Method::Cosine)?],
                &self.graph,
                &intact_sets,
                &self.spec.eval,
            )?;
            let shuf = evaluate_on(
                &[self.retriever(b.model.method())?, self.retriever(Method::Cosine)?],
                shuffled,
                &shuffled_sets,
                &self.spec.eval,
            )?;
            let mut collapse = BTreeMap::new();
            let before: BTreeMap<String, Option<f64>> = intact
                .flat_rows()
                .into_iter()
                .filter(|r| r.0 == "predictor")
                .map(|r| (r.1, r.2))
                .collect();
            for (_, metric, after) in shuf.flat_rows().into_iter().filter(|r| r.0 == "predictor") {
                if let (Some(Some(b)), Some(a)) = (before.get(&metric), after) {
                    if *b > 0.0 {
                        collapse.insert(metric, 1.0 - a / b);
                    }
                }
            }
            out.push(ShuffleSeed {
                seed,
                intact_training: TrainSummary::of(&a, &self.spec),
                shuffled_training: TrainSummary::of(&b, &self.spec),
                intact,
                shuffled: shuf,
                collapse,
            });
        }
        Ok(ShuffleResult {
            world_hash: world_hash(&self.world)?,
            intact_graph_hash: sha256_hex(&graph_to_bytes(&self.graph)?),
            shuffled_graph_hash: sha256_hex(&graph_to_bytes(shuffled)?),
            seeds: out,
        })
    }

    pub fn run_matched_negatives(&self) -> Result<MatchedResult> {
        let cfg = &self.spec.eval;
        let sets = QuerySets::select(&self.graph, cfg);
        let g = &self.graph;
        let applicable = sets.auc.ids.iter().any(|&q| {
            let room = g.meta(q).room;
            (0..g.n_states()).any(|j| j != q && g.meta(j).room == room && !g.is_associated(q, j))
        });
        if !applicable {
            return Ok(MatchedResult::NotApplicable {
                reason: "no query has a same-room state outside its temporal window".into(),
            });
        }
        let seeds = &self.spec.train_seeds;
        let keys: Vec<ModelKey> = seeds
            .iter()
            .flat_map(|&s| [Self::key(Arm::Intact, ModelKind::Predictor, s), Self::key(Arm::Intact, ModelKind::Bilinear, s)])
            .collect();
        self.train_all(&keys)?;
        let mut out = Vec::new();
        for &seed in seeds {
            let pred = self.trained(Self::key(Arm::Intact, ModelKind::Predictor, seed))?;
            let bil = self.trained(Self::key(Arm::Intact, ModelKind::Bilinear, seed))?;
            let mut methods = Vec::new();
            for method in [pred.model.method(), Method::Cosine, bil.model.method()] {
                let r = self.retriever(method)?;
                let (auc, queries) = matched_negative_auc(&r, g, &sets.auc.ids, cfg.auc_negative_cap, cfg.query_seed)?;
                methods.push(MethodAuc { method: method.name().into(), auc, queries });
            }
            out.push(MatchedSeed { seed, methods });
        }
        Ok(MatchedResult::Completed { queries: sets.auc.ids.len(), seeds: out })
    }

    pub fn run_holdout_anchor(&self) -> Result<HoldoutResult> {
        let held = self.holdout()?.clone();
        let cfg = &self.spec.eval;
        let k = *cfg.k_values.last().expect("validated");
        let crit = QueryCriterion::MinCrossAssoc(cfg.min_cross_assoc_cbr);
        let train_q = select_queries_where(&self.graph, crit, cfg.n_queries_cbr, cfg.query_seed, |s| !held.is_held(s));
        let held_q = select_queries_where(&self.graph, crit, cfg.n_queries_cbr, cfg.query_seed, |s| held.is_held(s));
        let seeds = self.spec.control_seeds();
        let keys: Vec<ModelKey> = seeds.iter().map(|&s| Self::key(Arm::Holdout, ModelKind::Predictor, s)).collect();
        self.train_all(&keys)?;
        let mut out = Vec::new();
        for &seed in seeds {
            let key = Self::key(Arm::Holdout, ModelKind::Predictor, seed);
            let t = self.trained(key)?;
            let pool = directed_pool(&self.graph, &self.train_config(&key)?);
            let mut cbr = Vec::new();
            for method in [t.model.method(), Method::Cosine] {
                let r = self.retriever(method)?;
                cbr.push(PairedRecall {
                    method: method.name().into(),
                    first: cross_room_recall(&r, &self.graph, &train_q.ids, k)?,
                    second: cross_room_recall(&r, &self.graph, &held_q.ids, k)?,
                });
            }
            out.push(HoldoutSeed {
                seed,
                training: TrainSummary::of(&t, &self.spec),
                cbr,
                train_anchor_queries: train_q.ids.len(),
                held_queries: held_q.ids.len(),
                held_anchor_pairs: pool.iter().filter(|p| held.is_held(p.0)).count(),
            });
        }
        Ok(HoldoutResult {
            held_states: held.held_states.len(),
            fraction: held.fraction,
            seed: held.seed,
            k,
            seeds: out,
        })
    }

    pub fn run_edge_disjoint(&self) -> Result<EdgeResult> {
        let (split, train_g, held_g) = self.split()?;
        let cfg = &self.spec.eval;
        let k = *cfg.k_values.last().expect("validated");
        // Held-out subgraphs are sparse; any cross-room associate qualifies.
        let crit = QueryCriterion::MinCrossAssoc(1);
        let train_q = select_queries_where(train_g, crit, cfg.n_queries_cbr, cfg.query_seed, |_| true);
        let held_q = select_queries_where(held_g, crit, cfg.n_queries_cbr, cfg.query_seed, |_| true);
        let seeds = self.spec.control_seeds();
        let keys: Vec<ModelKey> = seeds.iter().map(|&s| Self::key(Arm::Split, ModelKind::Predictor, s)).collect();
        self.train_all(&keys)?;
        let mut out = Vec::new();
        for &seed in seeds {
            let t = self.trained(Self::key(Arm::Split, ModelKind::Predictor, seed))?;
            let mut recall = Vec::new();
            for method in [t.model.method(), Method::Cosine] {
                let r = self.retriever(method)?;
                recall.push(PairedRecall {
                    method: method.name().into(),
                    first: cross_room_recall(&r, train_g, &train_q.ids, k)?,
                    second: cross_room_recall(&r, held_g, &held_q.ids, k)?,
                });
            }
            out.push(EdgeSeed {
                seed,
                training: TrainSummary::of(&t, &self.spec),
                recall,
                train_queries: train_q.ids.len(),
                held_queries: held_q.ids.len(),
            });
        }
        Ok(EdgeResult { train_edges: split.train_edges.len(), held_edges: split.test_edges.len(), k, seeds: out })
    }

    pub fn run_bridging_oracle(&self) -> Result<BridgingAudit> {
        bridging_oracle(
            &self.graph,
            &bridge_objects(&self.world),
            self.spec.bridging_instances,
            self.spec.bridging_seed,
        )
    }

    pub fn run_arch_sweep(&self) -> Result<SweepResult> {
        let (_, train_g, _) = self.split()?;
        let cfg = &self.spec.eval;
        let k = *cfg.k_values.last().expect("validated");
        let queries = select_queries_where(
            train_g,
            QueryCriterion::MinCrossAssoc(cfg.min_cross_assoc_cbr),
            cfg.n_queries_cbr,
            cfg.query_seed,
            |_| true,
        );
        let seeds = self.spec.control_seeds();
        let keys: Vec<ModelKey> = (0..self.spec.sweep.len())
            .flat_map(|i| seeds.iter().map(move |&s| Self::key(Arm::Split, ModelKind::Sweep(i), s)))
            .collect();
        self.train_all(&keys)?;
        let mut rows = Vec::new();
        for key in keys {
            let ModelKind::Sweep(i) = key.kind else { unreachable!() };
            let e = &self.spec.sweep[i];
            let t = self.trained(key)?;
            let r = self.retriever(t.model.method())?;
            rows.push(SweepRow {
                label: e.label.clone(),
                layers: e.layers,
                hidden: e.hidden,
                sampling_mode: e.sampling_mode,
                seed: key.seed,
                training: TrainSummary::of(&t, &self.spec),
                recall: cross_room_recall(&r, train_g, &queries.ids, k)?,
                mrr: mean_reciprocal_rank(&r, train_g, &queries.ids)?,
            });
        }
        Ok(SweepResult { k, queries: queries.ids.len(), rows })
    }
}

/// Files written for one experiment run.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub metrics_json: PathBuf,
    pub manifest: PathBuf,
}

/// Writes a run directory: `spec.json`, the world hash, one checkpoint per
/// trained model, `metrics.json`, `metrics.csv`, `log.txt` and
/// `manifest.json`. A non-empty `dir` is refused unless `force`.
pub fn write_run_dir(lab: &Lab, result: &ExperimentResult, dir: &Path, force: bool, command: &str) -> Result<RunFiles> {
    let occupied = dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(PamError::Exists(dir.to_path_buf()));
    }
    let mut manifest = RunManifest::new(command);
    manifest.add_config("experiment", lab.spec())?;
    manifest.add_seed("world", lab.spec().world.seed);
    for &s in &lab.spec().train_seeds {
        manifest.add_seed("train", s);
    }
    manifest.add_seed("query", lab.spec().eval.query_seed);
    manifest.add_seed("shuffle", lab.spec().shuffle_seed);
    manifest.add_seed("holdout", lab.spec().holdout_seed);
    manifest.add_seed("split", lab.spec().split_seed);
    manifest.add_seed("bridging", lab.spec().bridging_seed);

    let mut outputs = Vec::new();
    let spec_path = dir.join("spec.json");
    write_json(&spec_path, lab.spec())?;
    outputs.push(spec_path);
    let hash_path = dir.join(WORLD_HASH_FILE);
    write_bytes(&hash_path, format!("{}\n", world_hash(lab.world())?).as_bytes())?;
    outputs.push(hash_path);
    for t in lab.trained_models() {
        let stem = t.key.stem(lab.spec());
        let path = match &t.model {
            Model::Predictor(p) => {
                let path = dir.join("checkpoints").join(format!("{stem}.pamm"));
                save_predictor(p, Some(&t.report.config), &path, true)?;
                path
            }
            Model::Bilinear(p) => {
                let path = dir.join("checkpoints").join(format!("{stem}.pamb"));
                save_bilinear(p, Some(&t.report.config), &path, true)?;
                path
            }
        };
        outputs.push(path);
    }
    let metrics_json = dir.join("metrics.json");
    write_bytes(&metrics_json, &to_json_bytes(result)?)?;
    outputs.push(metrics_json.clone());
    let metrics_csv = dir.join("metrics.csv");
    write_bytes(&metrics_csv, &json_leaves_csv(&serde_json::to_value(result)?)?)?;
    outputs.push(metrics_csv);
    let log_path = dir.join("log.txt");
    let mut log = lab.log_lines().join("\n");
    log.push('\n');
    write_bytes(&log_path, log.as_bytes())?;
    outputs.push(log_path);

    for p in &outputs {
        manifest.add_output(dir, p)?;
    }
    let manifest_path = dir.join("manifest.json");
    manifest.finish(&manifest_path)?;
    Ok(RunFiles { dir: dir.to_path_buf(), metrics_json, manifest: manifest_path })
}

/// Metrics reports held in a run directory's `metrics.json`, either a single
/// evaluation or the per-seed reports of a main experiment.
pub fn run_reports(dir: &Path) -> Result<Vec<MetricsReport>> {
    let bytes = read_bytes(&dir.join("metrics.json"))?;
    if let Ok(r) = serde_json::from_slice::<MetricsReport>(&bytes) {
        return Ok(vec![r]);
    }
    // Tagged-enum buffering cannot read integer map keys, so dispatch on the
    // tag and decode the inner result from a Value.
    let bad = |detail: String| PamError::Format { kind: "metrics.json", detail };
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    let tag = value.get("experiment").and_then(|t| t.as_str()).ok_or_else(|| bad("no experiment tag".into()))?;
    let name: ExperimentName = tag.parse()?;
    match name {
        ExperimentName::Main => {
            let m: MainResult = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            Ok(m.seeds.into_iter().map(|s| s.metrics).collect())
        }
        ExperimentName::Shuffle => {
            let m: ShuffleResult = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            Ok(m.seeds.into_iter().map(|s| s.intact).collect())
        }
        other => Err(bad(format!("{other} has no per-method metrics report"))),
    }
}

/// Mean ± SD over every report in `dirs`. All runs must share one world.
pub fn consolidate(dirs: &[PathBuf]) -> Result<Vec<SummaryRow>> {
    let mut first: Option<(PathBuf, String)> = None;
    let mut reports = Vec::new();
    for dir in dirs {
        let hash_path = dir.join(WORLD_HASH_FILE);
        let hash = String::from_utf8_lossy(&read_bytes(&hash_path)?).trim().to_string();
        match &first {
            None => first = Some((dir.clone(), hash)),
            Some((d, h)) if *h != hash => {
                return Err(PamError::config(
                    "runs",
                    format!(
                        "world hash mismatch: {} has {h}, {} has {hash}; runs must share one world",
                        d.display(),
                        dir.display()
                    ),
                ));
            }
            Some(_) => {}
        }
        reports.extend(run_reports(dir)?);
    }
    Ok(summarise(&reports.iter().collect::<Vec<_>>()))
}

fn fmt_cell(row: &SummaryRow) -> String {
    match (row.mean, row.sd) {
        (Some(m), Some(sd)) => format!("{m:.3} ± {sd:.3}"),
        (Some(m), None) => format!("{m:.3}"),
        _ => "n/a".into(),
    }
}

/// Metric rows by method columns, cells `mean ± SD`.
pub fn report_markdown(rows: &[SummaryRow]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut metrics: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    let runs = rows.iter().map(|r| r.n).max().unwrap_or(0);
    let mut out = format!("Mean ± SD across {runs} run(s).\n\n| metric | {} |\n|---|", methods.join(" | "));
    out.push_str(&"---|".repeat(methods.len()));
    out.push('\n');
    for metric in metrics {
        out.push_str(&format!("| {metric} |"));
        for method in &methods {
            let cell = rows
                .iter()
                .find(|r| r.method == *method && r.metric == metric)
                .map(fmt_cell)
                .unwrap_or_default();
            out.push_str(&format!(" {cell} |"));
        }
        out.push('\n');
    }
    out
}

/// `method,metric,mean,sd,n`; SD empty for a single run.
pub fn report_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| PamError::Format { kind: "csv", detail: e.to_string() };
    w.write_record(["method", "metric", "mean", "sd", "n"]).map_err(fail)?;
    for r in rows {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        w.write_record([r.method.clone(), r.metric.clone(), f(r.mean), f(r.sd), r.n.to_string()])
            .map_err(fail)?;
    }
    w.into_inner().map_err(|e| PamError::Format { kind: "csv", detail: e.to_string() })
}
