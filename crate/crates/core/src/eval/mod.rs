//! Retrieval evaluation: macro-averaged metrics over seeded query sets.

mod metrics;
mod queries;
mod retriever;

use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assoc_graph::AssociationGraph;
use crate::error::{PamError, Result};
use crate::rng::{substream, Domain};

pub use metrics::{
    ap_at_k, cbr_at_k, discrimination_auc, mean, rank_memory, reciprocal_rank, specificity_at_k, top_k,
};
pub use queries::{select_queries, select_queries_where, QueryCriterion, QuerySelection};
pub use retriever::{Method, Retriever};

/// Queries scored per batched score computation.
const QUERY_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub k_values: Vec<usize>,
    pub n_queries_precision: usize,
    pub n_queries_cbr: usize,
    pub n_queries_auc: usize,
    pub auc_negative_cap: usize,
    pub n_queries_spec: usize,
    pub query_seed: u64,
    pub hop_depths: Vec<usize>,
    pub beam_width: usize,
    pub recency_lambdas: Vec<f64>,
    pub recency_k: usize,
    pub min_assoc_precision: usize,
    pub min_cross_assoc_cbr: usize,
    pub min_assoc_auc: usize,
    /// Cross-room associates an AUC query needs for the cross-room AUC.
    pub min_cross_assoc_auc: usize,
    pub min_cross_assoc_spec: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_values: vec![1, 5, 20],
            n_queries_precision: 500,
            n_queries_cbr: 500,
            n_queries_auc: 300,
            auc_negative_cap: 2000,
            n_queries_spec: 300,
            query_seed: 42,
            hop_depths: vec![1, 2, 3],
            beam_width: 5,
            recency_lambdas: vec![0.5, 1.0, 2.0, 4.0],
            recency_k: 20,
            min_assoc_precision: 3,
            min_cross_assoc_cbr: 3,
            min_assoc_auc: 5,
            min_cross_assoc_auc: 3,
            min_cross_assoc_spec: 3,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(PamError::config("k_values", "must be a non-empty list of positive values"));
        }
        if self.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PamError::config("k_values", "must be strictly ascending"));
        }
        for (field, v) in [
            ("n_queries_precision", self.n_queries_precision),
            ("n_queries_cbr", self.n_queries_cbr),
            ("n_queries_auc", self.n_queries_auc),
            ("auc_negative_cap", self.auc_negative_cap),
            ("n_queries_spec", self.n_queries_spec),
            ("beam_width", self.beam_width),
            ("recency_k", self.recency_k),
        ] {
            if v == 0 {
                return Err(PamError::config(field, "must be positive"));
            }
        }
        if self.hop_depths.contains(&0) {
            return Err(PamError::config("hop_depths", "depths start at 1"));
        }
        if self.recency_lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(PamError::config("recency_lambdas", "must be non-negative"));
        }
        Ok(())
    }

    fn max_k(&self) -> usize {
        *self.k_values.last().expect("validated")
    }
}

/// Sizes of the query sets behind a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCount {
    pub requested: usize,
    pub qualifying: usize,
    pub selected: usize,
}

impl From<&QuerySelection> for QueryCount {
    fn from(s: &QuerySelection) -> Self {
        QueryCount { requested: s.requested, qualifying: s.qualifying, selected: s.ids.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCounts {
    pub precision: QueryCount,
    pub cbr: QueryCount,
    pub auc: QueryCount,
    /// AUC queries with enough cross-room associates for the restricted AUC.
    pub auc_cross_room: usize,
    pub spec: QueryCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecencyPoint {
    pub lambda: f64,
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecencyReport {
    pub k: usize,
    pub uniform: f64,
    pub grid: Vec<RecencyPoint>,
    pub best_lambda: Option<f64>,
    pub best_weighted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub trained: bool,
    pub ap_at_k: BTreeMap<usize, f64>,
    pub cbr_at_k: BTreeMap<usize, f64>,
    pub auc_overall: f64,
    /// `None` when no AUC query has enough cross-room associates.
    pub auc_cross_room: Option<f64>,
    /// `None` when every query had an empty denominator.
    pub spec_at_k: BTreeMap<usize, Option<f64>>,
    /// Queries contributing to each Spec@k average.
    pub spec_defined: BTreeMap<usize, usize>,
    /// Cross-room recall at the largest k, keyed by hop depth.
    pub multi_hop_recall: BTreeMap<usize, f64>,
    pub recency: RecencyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub query_seed: u64,
    pub config: EvalConfig,
    pub queries: QueryCounts,
    pub methods: Vec<MethodMetrics>,
}

impl MetricsReport {
    pub fn method(&self, name: &str) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// One `(method, metric, value)` row per reported number; undefined
    /// values are `None`.
    pub fn flat_rows(&self) -> Vec<(String, String, Option<f64>)> {
        let mut rows = Vec::new();
        for m in &self.methods {
            let mut push = |metric: String, v: Option<f64>| rows.push((m.method.clone(), metric, v));
            for (k, v) in &m.ap_at_k {
                push(format!("ap@{k}"), Some(*v));
            }
            for (k, v) in &m.cbr_at_k {
                push(format!("cbr@{k}"), Some(*v));
            }
            push("auc_overall".into(), Some(m.auc_overall));
            push("auc_cross_room".into(), m.auc_cross_room);
            for (k, v) in &m.spec_at_k {
                push(format!("spec@{k}"), *v);
            }
            for (h, v) in &m.multi_hop_recall {
                push(format!("hop{h}_recall@{}", self.config.max_k()), Some(*v));
            }
            push(format!("recency_uniform@{}", m.recency.k), Some(m.recency.uniform));
            for p in &m.recency.grid {
                push(format!("recency_lambda_{}@{}", p.lambda, m.recency.k), Some(p.weighted));
            }
        }
        rows
    }
}

/// Applies `f(query, scores)` to every query, in query order. Score rows are
/// computed in batches; per-query work runs in parallel.
pub fn per_query<T, F>(retriever: &Retriever, queries: &[usize], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &[f64]) -> T + Sync,
{
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(QUERY_CHUNK) {
        let scores = retriever.scores(chunk)?;
        let part: Vec<T> = chunk
            .par_iter()
            .enumerate()
            .map(|(r, &q)| f(q, scores.row(r)))
            .collect();
        out.extend(part);
    }
    Ok(out)
}

/// Draws at most `cap` of `candidates` with a per-query stream.
fn cap_negatives(candidates: Vec<usize>, cap: usize, seed: u64, query: usize) -> Vec<usize> {
    if candidates.len() <= cap {
        return candidates;
    }
    let mut rng = substream(seed, Domain::Negatives, query as u64);
    let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), cap)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    picked
}

fn query_auc(scores: &[f64], pos: &[usize], neg: &[usize]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let sp: Vec<f64> = pos.iter().map(|&i| scores[i]).collect();
    let sn: Vec<f64> = neg.iter().map(|&i| scores[i]).collect();
    Some(discrimination_auc(&sp, &sn))
}

/// Non-associates of `q` (never `q` itself) passing `keep`.
fn non_associates(graph: &AssociationGraph, q: usize, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let assoc = graph.associates(q);
    (0..graph.n_states())
        .filter(|&j| j != q && assoc.binary_search(&j).is_err() && keep(j))
        .collect()
}

fn mean_defined(values: &[Option<f64>]) -> (Option<f64>, usize) {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        (None, 0)
    } else {
        (Some(mean(&defined)), defined.len())
    }
}

/// Macro-averaged cross-room recall@k against `labels`' cross-room
/// associates.
pub fn cross_room_recall(retriever: &Retriever, labels: &AssociationGraph, queries: &[usize], k: usize) -> Result<f64> {
    let per = per_query(retriever, queries, |q, s| {
        cbr_at_k(&top_k(s, &[q], k), &labels.cross_room_associates(q), k)
    })?;
    Ok(mean(&per.into_iter().filter(|v| !v.is_nan()).collect::<Vec<_>>()))
}

/// Mean reciprocal rank of the best-ranked cross-room associate.
pub fn mean_reciprocal_rank(retriever: &Retriever, labels: &AssociationGraph, queries: &[usize]) -> Result<f64> {
    let per = per_query(retriever, queries, |q, s| {
        reciprocal_rank(s, &[q], &labels.cross_room_associates(q))
    })?;
    Ok(mean(&per))
}

/// AUC of true associates against same-room non-associates, macro-averaged
/// over the queries that have any such negatives. `None` when none do.
pub fn matched_negative_auc(
    retriever: &Retriever,
    graph: &AssociationGraph,
    queries: &[usize],
    cap: usize,
    seed: u64,
) -> Result<(Option<f64>, usize)> {
    let per = per_query(retriever, queries, |q, s| {
        let room = graph.meta(q).room;
        let neg = cap_negatives(non_associates(graph, q, |j| graph.meta(j).room == room), cap, seed, q);
        query_auc(s, graph.associates(q), &neg)
    })?;
    Ok(mean_defined(&per))
}

/// Cross-room recall@k under iterated retrieval. Hop 1 ranks memory from
/// the query; each later hop scores memory from the top `beam` states of
/// the previous hop and keeps each state's best score. Targets at depth h
/// are the cross-room states within h graph hops of the query.
pub fn multi_hop_recall(
    retriever: &Retriever,
    graph: &AssociationGraph,
    queries: &[usize],
    depths: &[usize],
    k: usize,
    beam: usize,
) -> Result<BTreeMap<usize, f64>> {
    let max_depth = depths.iter().copied().max().unwrap_or(0);
    if max_depth == 0 {
        return Ok(BTreeMap::new());
    }
    let per: Vec<Result<Vec<f64>>> = per_query(retriever, queries, |q, first| {
        let room = graph.meta(q).room;
        let mut recalls = Vec::with_capacity(max_depth);
        let mut ranked = top_k(first, &[q], k);
        for depth in 1..=max_depth {
            if depth > 1 {
                let frontier: Vec<usize> = ranked.iter().copied().take(beam).collect();
                let rows = retriever.scores(&frontier)?;
                let mut best = vec![f64::NEG_INFINITY; first.len()];
                for row in rows.row_iter() {
                    for (b, &v) in best.iter_mut().zip(row) {
                        *b = b.max(v);
                    }
                }
                ranked = top_k(&best, &[q], k);
            }
            let targets: Vec<usize> = graph
                .neighbourhood(q, depth)
                .into_iter()
                .filter(|&j| graph.meta(j).room != room)
                .collect();
            recalls.push(cbr_at_k(&ranked, &targets, k));
        }
        Ok(recalls)
    })?;
    let per: Vec<Vec<f64>> = per.into_iter().collect::<Result<_>>()?;
    Ok(depths
        .iter()
        .map(|&d| {
            let vals: Vec<f64> = per.iter().map(|r| r[d - 1]).filter(|v| !v.is_nan()).collect();
            (d, mean(&vals))
        })
        .collect())
}

/// Position of each state in the concatenated experience stream.
pub fn global_timestamps(graph: &AssociationGraph) -> Vec<usize> {
    let states = graph.states();
    let n_traj = states.iter().map(|s| s.trajectory + 1).max().unwrap_or(0);
    let mut lengths = vec![0usize; n_traj];
    for s in states {
        lengths[s.trajectory] = lengths[s.trajectory].max(s.timestep + 1);
    }
    let mut offsets = vec![0usize; n_traj];
    for t in 1..n_traj {
        offsets[t] = offsets[t - 1] + lengths[t - 1];
    }
    states.iter().map(|s| offsets[s.trajectory] + s.timestep).collect()
}

/// `exp(−λ · age)` per state, with age the distance from the latest
/// timestamp as a fraction of the stream length.
pub fn recency_weights(graph: &AssociationGraph, lambda: f64) -> Vec<f64> {
    let ts = global_timestamps(graph);
    let latest = ts.iter().copied().max().unwrap_or(0);
    let total = ts.len().max(1) as f64;
    ts.iter()
        .map(|&t| (-lambda * (latest - t) as f64 / total).exp())
        .collect()
}

/// Macro AP@k with scores multiplied by recency weights, and without.
pub fn recency_weighted_precision(
    retriever: &Retriever,
    graph: &AssociationGraph,
    queries: &[usize],
    lambda: f64,
    k: usize,
) -> Result<(f64, f64)> {
    let weights = recency_weights(graph, lambda);
    let per = per_query(retriever, queries, |q, s| {
        let weighted: Vec<f64> = s.iter().zip(&weights).map(|(a, w)| a * w).collect();
        let assoc = graph.associates(q);
        (
            ap_at_k(&top_k(&weighted, &[q], k), assoc, k),
            ap_at_k(&top_k(s, &[q], k), assoc, k),
        )
    })?;
    let (w, u): (Vec<f64>, Vec<f64>) = per.into_iter().unzip();
    Ok((mean(&w), mean(&u)))
}

/// The query sets shared by every method in a report.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySets {
    pub precision: QuerySelection,
    pub cbr: QuerySelection,
    pub auc: QuerySelection,
    pub auc_cross_room: Vec<usize>,
    pub spec: QuerySelection,
}

impl QuerySets {
    pub fn select(graph: &AssociationGraph, config: &EvalConfig) -> Self {
        Self::select_where(graph, config, |_| true)
    }

    /// Query sets drawn only from states where `eligible` holds.
    pub fn select_where(graph: &AssociationGraph, config: &EvalConfig, eligible: impl Fn(usize) -> bool) -> Self {
        let seed = config.query_seed;
        let pick = |c, n| select_queries_where(graph, c, n, seed, &eligible);
        let auc = pick(QueryCriterion::MinAssoc(config.min_assoc_auc), config.n_queries_auc);
        let auc_cross_room = auc
            .ids
            .iter()
            .copied()
            .filter(|&q| graph.n_cross_room_associates(q) >= config.min_cross_assoc_auc)
            .collect();
        QuerySets {
            precision: pick(QueryCriterion::MinAssoc(config.min_assoc_precision), config.n_queries_precision),
            cbr: pick(QueryCriterion::MinCrossAssoc(config.min_cross_assoc_cbr), config.n_queries_cbr),
            auc,
            auc_cross_room,
            spec: pick(QueryCriterion::MinCrossAssoc(config.min_cross_assoc_spec), config.n_queries_spec),
        }
    }

    pub fn counts(&self) -> QueryCounts {
        QueryCounts {
            precision: (&self.precision).into(),
            cbr: (&self.cbr).into(),
            auc: (&self.auc).into(),
            auc_cross_room: self.auc_cross_room.len(),
            spec: (&self.spec).into(),
        }
    }
}

/// Every metric for one method over fixed query sets.
pub fn evaluate_method(
    retriever: &Retriever,
    graph: &AssociationGraph,
    sets: &QuerySets,
    config: &EvalConfig,
) -> Result<MethodMetrics> {
    config.validate()?;
    if retriever.n_memory() != graph.n_states() {
        return Err(PamError::shape(
            "evaluate",
            format!("{} memory states vs {} graph states", retriever.n_memory(), graph.n_states()),
        ));
    }
    let ks = &config.k_values;
    let kmax = config.max_k();
    let seed = config.query_seed;

    let ap = per_query(retriever, &sets.precision.ids, |q, s| {
        let ranked = top_k(s, &[q], kmax);
        ks.iter().map(|&k| ap_at_k(&ranked, graph.associates(q), k)).collect::<Vec<_>>()
    })?;
    let cbr = per_query(retriever, &sets.cbr.ids, |q, s| {
        let ranked = top_k(s, &[q], kmax);
        let cross = graph.cross_room_associates(q);
        ks.iter().map(|&k| cbr_at_k(&ranked, &cross, k)).collect::<Vec<_>>()
    })?;
    let auc_overall = per_query(retriever, &sets.auc.ids, |q, s| {
        let neg = cap_negatives(non_associates(graph, q, |_| true), config.auc_negative_cap, seed, q);
        query_auc(s, graph.associates(q), &neg)
    })?;
    let auc_cross = per_query(retriever, &sets.auc_cross_room, |q, s| {
        let room = graph.meta(q).room;
        let neg = cap_negatives(
            non_associates(graph, q, |j| graph.meta(j).room != room),
            config.auc_negative_cap,
            seed,
            q,
        );
        query_auc(s, &graph.cross_room_associates(q), &neg)
    })?;
    let spec = per_query(retriever, &sets.spec.ids, |q, s| {
        let ranked = top_k(s, &[q], kmax);
        let room = graph.meta(q).room;
        let cross = graph.cross_room_associates(q);
        let distractors = non_associates(graph, q, |j| graph.meta(j).room == room);
        ks.iter()
            .map(|&k| specificity_at_k(&ranked, &cross, &distractors, k))
            .collect::<Vec<_>>()
    })?;

    let column = |rows: &[Vec<f64>], i: usize| mean(&rows.iter().map(|r| r[i]).collect::<Vec<_>>());
    let mut spec_at_k = BTreeMap::new();
    let mut spec_defined = BTreeMap::new();
    for (i, &k) in ks.iter().enumerate() {
        let (v, n) = mean_defined(&spec.iter().map(|r| r[i]).collect::<Vec<_>>());
        spec_at_k.insert(k, v);
        spec_defined.insert(k, n);
    }

    let multi_hop = multi_hop_recall(retriever, graph, &sets.cbr.ids, &config.hop_depths, kmax, config.beam_width)?;

    let uniform = recency_weighted_precision(retriever, graph, &sets.precision.ids, 0.0, config.recency_k)?.1;
    let mut grid = Vec::with_capacity(config.recency_lambdas.len());
    for &lambda in &config.recency_lambdas {
        let (weighted, _) = recency_weighted_precision(retriever, graph, &sets.precision.ids, lambda, config.recency_k)?;
        grid.push(RecencyPoint { lambda, weighted });
    }
    // First maximum wins, so ties keep the smaller lambda.
    let best = grid
        .iter()
        .fold(None::<&RecencyPoint>, |acc, p| match acc {
            Some(b) if b.weighted >= p.weighted => Some(b),
            _ => Some(p),
        });

    Ok(MethodMetrics {
        method: retriever.method().name().to_string(),
        trained: retriever.method().trained(),
        ap_at_k: ks.iter().enumerate().map(|(i, &k)| (k, column(&ap, i))).collect(),
        cbr_at_k: ks
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, column(&cbr, i)))
            .collect(),
        auc_overall: mean_defined(&auc_overall).0.unwrap_or(0.0),
        auc_cross_room: mean_defined(&auc_cross).0,
        spec_at_k,
        spec_defined,
        multi_hop_recall: multi_hop,
        recency: RecencyReport {
            k: config.recency_k,
            uniform,
            grid: grid.clone(),
            best_lambda: best.map(|b| b.lambda),
            best_weighted: best.map(|b| b.weighted),
        },
    })
}

/// Evaluates several methods on identical query sets.
pub fn evaluate(retrievers: &[Retriever], graph: &AssociationGraph, config: &EvalConfig) -> Result<MetricsReport> {
    config.validate()?;
    let sets = QuerySets::select(graph, config);
    evaluate_on(retrievers, graph, &sets, config)
}

pub fn evaluate_on(
    retrievers: &[Retriever],
    graph: &AssociationGraph,
    sets: &QuerySets,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    let methods = retrievers
        .iter()
        .map(|r| evaluate_method(r, graph, sets, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        query_seed: config.query_seed,
        config: config.clone(),
        queries: sets.counts(),
        methods,
    })
}
