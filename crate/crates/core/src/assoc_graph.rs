//! Temporal co-occurrence graph.
//!
//! Two states are associated when they belong to the same trajectory and
//! their timesteps differ by at most `tau`. Edges are unordered, stored as
//! `(low, high)` pairs in ascending order.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PamError, Result};
use crate::rng::{substream, Domain};
use crate::worldgen::World;

/// Unordered edge `(low, high)` with `low < high`.
pub type Edge = (usize, usize);

/// Per-state metadata the graph needs for labelling edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateMeta {
    pub trajectory: usize,
    pub timestep: usize,
    pub room: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationGraph {
    pub tau: usize,
    states: Vec<StateMeta>,
    edges: Vec<Edge>,
    cross_room: Vec<bool>,
    adjacency: Vec<Vec<usize>>,
}

impl AssociationGraph {
    /// Builds a graph from an explicit edge list. Edges may be given in any
    /// orientation and order; duplicates and self-loops are rejected.
    pub fn from_edges(tau: usize, states: Vec<StateMeta>, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let n = states.len();
        let mut canon: Vec<Edge> = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(PamError::config("edges", format!("self-edge on state {a}")));
            }
            if a >= n || b >= n {
                return Err(PamError::UnknownState(a.max(b)));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        if canon.windows(2).any(|w| w[0] == w[1]) {
            return Err(PamError::config("edges", "duplicate edge"));
        }
        Ok(Self::from_sorted(tau, states, canon))
    }

    fn from_sorted(tau: usize, states: Vec<StateMeta>, edges: Vec<Edge>) -> Self {
        let mut adjacency = vec![Vec::new(); states.len()];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        let cross_room = edges
            .iter()
            .map(|&(a, b)| states[a].room != states[b].room)
            .collect();
        AssociationGraph {
            tau,
            states,
            edges,
            cross_room,
            adjacency,
        }
    }

    /// The same states restricted to `edges`, which must be a subset of this
    /// graph's edges.
    pub fn subgraph(&self, edges: &[Edge]) -> Result<Self> {
        for e in edges {
            if self.edges.binary_search(e).is_err() {
                return Err(PamError::config("edges", format!("{e:?} is not an edge of the graph")));
            }
        }
        let mut sorted = edges.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        Ok(Self::from_sorted(self.tau, self.states.clone(), sorted))
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[StateMeta] {
        &self.states
    }

    pub fn meta(&self, state: usize) -> StateMeta {
        self.states[state]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Whether edge `index` links states in different rooms.
    pub fn is_cross_room(&self, index: usize) -> bool {
        self.cross_room[index]
    }

    pub fn cross_room_flags(&self) -> &[bool] {
        &self.cross_room
    }

    /// Sorted associates of `state`.
    pub fn associates(&self, state: usize) -> &[usize] {
        &self.adjacency[state]
    }

    pub fn cross_room_associates(&self, state: usize) -> Vec<usize> {
        let room = self.states[state].room;
        self.adjacency[state]
            .iter()
            .copied()
            .filter(|&j| self.states[j].room != room)
            .collect()
    }

    pub fn n_cross_room_associates(&self, state: usize) -> usize {
        let room = self.states[state].room;
        self.adjacency[state]
            .iter()
            .filter(|&&j| self.states[j].room != room)
            .count()
    }

    pub fn is_associated(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    /// States within `depth` hops of `state` (excluding `state`), ascending.
    pub fn neighbourhood(&self, state: usize, depth: usize) -> Vec<usize> {
        let mut seen = vec![false; self.states.len()];
        seen[state] = true;
        let mut frontier = vec![state];
        let mut out = Vec::new();
        for _ in 0..depth {
            let mut next = Vec::new();
            for &s in &frontier {
                for &j in &self.adjacency[s] {
                    if !seen[j] {
                        seen[j] = true;
                        next.push(j);
                        out.push(j);
                    }
                }
            }
            frontier = next;
        }
        out.sort_unstable();
        out
    }
}

pub fn build_graph(world: &World, tau: usize) -> Result<AssociationGraph> {
    if tau == 0 {
        return Err(PamError::config("tau", "must be at least 1"));
    }
    let len = world.config.trajectory_len;
    let per_traj: Vec<Vec<Edge>> = (0..world.config.n_trajectories)
        .into_par_iter()
        .map(|traj| {
            let base = traj * len;
            let mut edges = Vec::with_capacity(len * tau);
            for t in 0..len {
                for d in 1..=tau.min(len - 1 - t) {
                    edges.push((base + t, base + t + d));
                }
            }
            edges
        })
        .collect();
    // Trajectory-major, then (t, d) ascending: already in canonical order.
    let edges: Vec<Edge> = per_traj.into_iter().flatten().collect();
    let states = world
        .states
        .iter()
        .map(|s| StateMeta {
            trajectory: s.trajectory_id,
            timestep: s.timestep,
            room: s.room_id,
        })
        .collect();
    Ok(AssociationGraph::from_sorted(tau, states, edges))
}

/// Permutes timesteps within every trajectory. Embeddings, rooms and objects
/// move together; state ids keep their `(trajectory, timestep)` layout.
pub fn shuffle_temporal(world: &World, seed: u64) -> World {
    let len = world.config.trajectory_len;
    let mut out = world.clone();
    for traj in 0..world.config.n_trajectories {
        let perm = shuffle_permutation(len, seed, traj);
        for (t, &src) in perm.iter().enumerate() {
            let dst_id = traj * len + t;
            let src_id = traj * len + src;
            let src_state = &world.states[src_id];
            let dst = &mut out.states[dst_id];
            dst.room_id = src_state.room_id;
            dst.objects_present = src_state.objects_present.clone();
            out.embeddings
                .row_mut(dst_id)
                .copy_from_slice(world.embeddings.row(src_id));
        }
    }
    out
}

fn shuffle_permutation(len: usize, seed: u64, traj: usize) -> Vec<usize> {
    let mut rng = substream(seed, Domain::Shuffle, traj as u64);
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng);
    perm
}

/// The co-occurrence graph of [`shuffle_temporal`]'s timeline, expressed
/// over the original state ids so that the world itself is untouched. Each
/// state's timestep becomes its shuffled position.
pub fn shuffled_graph(world: &World, tau: usize, seed: u64) -> Result<AssociationGraph> {
    if tau == 0 {
        return Err(PamError::config("tau", "must be at least 1"));
    }
    let len = world.config.trajectory_len;
    let mut states: Vec<StateMeta> = world
        .states
        .iter()
        .map(|s| StateMeta { trajectory: s.trajectory_id, timestep: s.timestep, room: s.room_id })
        .collect();
    let mut edges = Vec::with_capacity(world.n_states() * tau);
    for traj in 0..world.config.n_trajectories {
        let base = traj * len;
        let perm = shuffle_permutation(len, seed, traj);
        for (t, &src) in perm.iter().enumerate() {
            states[base + src].timestep = t;
            for &other in &perm[t + 1..(t + 1 + tau).min(len)] {
                edges.push((base + src, base + other));
            }
        }
    }
    AssociationGraph::from_edges(tau, states, edges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSplit {
    pub train_edges: Vec<Edge>,
    pub test_edges: Vec<Edge>,
    pub fraction: f64,
    pub seed: u64,
}

fn check_fraction(field: &str, fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PamError::config(field, "must lie strictly between 0 and 1"));
    }
    Ok(())
}

/// Uniform edge-disjoint split with `round(fraction·|E|)` training edges.
pub fn split_edges(graph: &AssociationGraph, fraction: f64, seed: u64) -> Result<EdgeSplit> {
    check_fraction("edge_split.fraction", fraction)?;
    let mut order: Vec<usize> = (0..graph.n_edges()).collect();
    order.shuffle(&mut substream(seed, Domain::EdgeSplit, 0));
    let n_train = (fraction * graph.n_edges() as f64).round() as usize;
    let mut train: Vec<Edge> = order[..n_train].iter().map(|&i| graph.edges[i]).collect();
    let mut test: Vec<Edge> = order[n_train..].iter().map(|&i| graph.edges[i]).collect();
    train.sort_unstable();
    test.sort_unstable();
    Ok(EdgeSplit {
        train_edges: train,
        test_edges: test,
        fraction,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorHoldout {
    /// Held-out state ids, ascending.
    pub held_states: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
}

impl AnchorHoldout {
    pub fn is_held(&self, state: usize) -> bool {
        self.held_states.binary_search(&state).is_ok()
    }
}

/// Uniform sample of `round(fraction·n_states)` states barred from the anchor
/// side of training pairs.
pub fn holdout_anchors(world: &World, fraction: f64, seed: u64) -> Result<AnchorHoldout> {
    holdout_anchor_ids(world.n_states(), fraction, seed)
}

pub fn holdout_anchor_ids(n_states: usize, fraction: f64, seed: u64) -> Result<AnchorHoldout> {
    check_fraction("anchor_holdout.fraction", fraction)?;
    let mut ids: Vec<usize> = (0..n_states).collect();
    ids.shuffle(&mut substream(seed, Domain::AnchorHoldout, 0));
    let n_held = (fraction * n_states as f64).round() as usize;
    let mut held = ids[..n_held].to_vec();
    held.sort_unstable();
    Ok(AnchorHoldout {
        held_states: held,
        fraction,
        seed,
    })
}

/// Co-occurrence edges per trajectory between the rooms of states `i` and `j`.
fn room_pair_counts(graph: &AssociationGraph, room_a: usize, room_b: usize) -> Vec<f64> {
    let n_traj = graph.states.iter().map(|s| s.trajectory + 1).max().unwrap_or(0);
    let mut counts = vec![0.0; n_traj];
    for &(a, b) in &graph.edges {
        let (ra, rb) = (graph.states[a].room, graph.states[b].room);
        if (ra == room_a && rb == room_b) || (ra == room_b && rb == room_a) {
            let (ta, tb) = (graph.states[a].trajectory, graph.states[b].trajectory);
            counts[ta.max(tb)] += 1.0;
        }
    }
    counts
}

/// Trailing trajectories averaged for the familiarity baseline.
pub const DEFAULT_FAMILIARITY_WINDOW: usize = 50;

/// Familiarity-normalised association strength between `i` and `j`.
///
/// The raw weight is the number of co-occurrence edges linking the rooms
/// (hence object sets) of `i` and `j` within the trajectory of `i`. The
/// familiarity baseline is the mean of that count over the `window`
/// trajectories preceding it, or zero when there are none.
pub fn familiarity_normalised_weight(
    graph: &AssociationGraph,
    i: usize,
    j: usize,
    window: usize,
) -> Result<f64> {
    if window == 0 {
        return Err(PamError::config("familiarity.window", "must be at least 1"));
    }
    let n = graph.n_states();
    if i >= n || j >= n {
        return Err(PamError::UnknownState(i.max(j)));
    }
    let counts = room_pair_counts(graph, graph.states[i].room, graph.states[j].room);
    let current = graph.states[i].trajectory;
    let start = current.saturating_sub(window);
    let history = &counts[start..current];
    let baseline = if history.is_empty() {
        0.0
    } else {
        history.iter().sum::<f64>() / history.len() as f64
    };
    Ok(counts[current] - baseline)
}

pub fn count_cross_trajectory_edges(graph: &AssociationGraph) -> usize {
    graph
        .edges
        .iter()
        .filter(|&&(a, b)| graph.states[a].trajectory != graph.states[b].trajectory)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{gen_world, WorldConfig};

    fn world(n_traj: usize, len: usize) -> World {
        gen_world(&WorldConfig {
            embed_dim: 16,
            n_rooms: 4,
            n_objects: 8,
            objects_per_room: 4,
            n_shared_objects: 2,
            n_trajectories: n_traj,
            trajectory_len: len,
            room_dwell_mean: 5,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn meta(rows: &[(usize, usize, usize)]) -> Vec<StateMeta> {
        rows.iter()
            .map(|&(trajectory, timestep, room)| StateMeta {
                trajectory,
                timestep,
                room,
            })
            .collect()
    }

    #[test]
    fn single_trajectory_edge_counts() {
        let g = build_graph(&world(1, 100), 5).unwrap();
        assert_eq!(g.n_edges(), 485);
        let g = build_graph(&world(1, 2), 5).unwrap();
        assert_eq!(g.n_edges(), 1);
    }

    #[test]
    fn edges_match_brute_force_window_rule() {
        let w = world(3, 20);
        let g = build_graph(&w, 4).unwrap();
        let mut brute = Vec::new();
        for a in &w.states {
            for b in &w.states {
                if a.state_id < b.state_id
                    && a.trajectory_id == b.trajectory_id
                    && b.timestep - a.timestep <= 4
                {
                    brute.push((a.state_id, b.state_id));
                }
            }
        }
        assert_eq!(g.edges(), brute.as_slice());
        for (idx, &(a, b)) in g.edges().iter().enumerate() {
            assert_eq!(g.is_cross_room(idx), w.states[a].room_id != w.states[b].room_id);
        }
    }

    #[test]
    fn adjacency_is_symmetric_without_self_loops() {
        let g = build_graph(&world(4, 30), 5).unwrap();
        for i in 0..g.n_states() {
            for &j in g.associates(i) {
                assert_ne!(i, j);
                assert!(g.associates(j).contains(&i));
            }
        }
    }

    #[test]
    fn zero_tau_is_rejected() {
        assert!(build_graph(&world(1, 10), 0).is_err());
    }

    #[test]
    fn shuffle_preserves_embedding_multiset() {
        let w = world(3, 40);
        let s = shuffle_temporal(&w, 9);
        let sorted = |w: &World| {
            let mut rows: Vec<Vec<u64>> = w
                .embeddings
                .row_iter()
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect();
            rows.sort();
            rows
        };
        assert_eq!(sorted(&w), sorted(&s));
        assert_ne!(w.embeddings, s.embeddings);
        for st in &s.states {
            assert_eq!(st.objects_present, w.room_objects()[st.room_id]);
        }
    }

    #[test]
    fn shuffled_graph_is_the_relabelled_shuffled_world_graph() {
        let w = world(5, 30);
        let shuffled = shuffle_temporal(&w, 8);
        let direct = build_graph(&shuffled, 5).unwrap();
        let g = shuffled_graph(&w, 5, 8).unwrap();
        assert_eq!(g.n_edges(), direct.n_edges());
        // Map shuffled-world ids back to original ids through the embeddings.
        let original_id = |sid: usize| {
            (0..w.n_states())
                .find(|&o| w.embeddings.row(o) == shuffled.embeddings.row(sid))
                .unwrap()
        };
        let map: Vec<usize> = (0..w.n_states()).map(original_id).collect();
        for &(a, b) in direct.edges() {
            assert!(g.is_associated(map[a], map[b]));
        }
        for sid in 0..w.n_states() {
            assert_eq!(g.meta(map[sid]).timestep, sid % 30);
            assert_eq!(g.meta(map[sid]).room, direct.meta(sid).room);
        }
        assert_eq!(count_cross_trajectory_edges(&g), 0);
    }

    #[test]
    fn shuffle_of_length_one_trajectories_is_identity() {
        let mut w = world(2, 2);
        // Truncate to length-one trajectories by hand.
        w.config.trajectory_len = 1;
        w.config.n_trajectories = 2;
        w.states.truncate(2);
        w.states[1].trajectory_id = 1;
        w.states[1].timestep = 0;
        w.embeddings = w.embeddings.select_rows(&[0, 1]);
        let s = shuffle_temporal(&w, 3);
        assert_eq!(s, w);
    }

    #[test]
    fn shuffle_overlap_matches_monte_carlo_expectation() {
        // Fraction of post-shuffle edges that were already edges before:
        // 485 window pairs out of C(100, 2) = 4950.
        let w = world(1, 100);
        let original = build_graph(&w, 5).unwrap();
        let position: std::collections::HashMap<Vec<u64>, usize> = w
            .embeddings
            .row_iter()
            .enumerate()
            .map(|(i, r)| (r.iter().map(|v| v.to_bits()).collect(), i))
            .collect();
        let trials = 200;
        let mut overlap = 0.0;
        for seed in 0..trials {
            let s = shuffle_temporal(&w, seed);
            let g = build_graph(&s, 5).unwrap();
            let origin: Vec<usize> = s
                .embeddings
                .row_iter()
                .map(|r| position[&r.iter().map(|v| v.to_bits()).collect::<Vec<_>>()])
                .collect();
            let kept = g
                .edges()
                .iter()
                .filter(|&&(a, b)| original.is_associated(origin[a], origin[b]))
                .count();
            overlap += kept as f64 / g.n_edges() as f64;
        }
        let mean = overlap / trials as f64;
        assert!((mean - 485.0 / 4950.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let states = meta(&(0..5).map(|t| (0, t, 0)).collect::<Vec<_>>());
        let edges: Vec<Edge> = (0..5)
            .flat_map(|a| (a + 1..5).map(move |b| (a, b)))
            .collect();
        let g = AssociationGraph::from_edges(4, states, edges).unwrap();
        assert_eq!(g.n_edges(), 10);
        let split = split_edges(&g, 0.7, 1).unwrap();
        assert_eq!(split.train_edges.len(), 7);
        assert_eq!(split.test_edges.len(), 3);
        let mut all = split.train_edges.clone();
        all.extend(&split.test_edges);
        all.sort_unstable();
        assert_eq!(all, g.edges());
        assert_eq!(split, split_edges(&g, 0.7, 1).unwrap());
        assert!(split_edges(&g, 1.0, 1).is_err());
    }

    #[test]
    fn anchor_holdout_sizes() {
        let h = holdout_anchor_ids(50_000, 0.2, 42).unwrap();
        assert_eq!(h.held_states.len(), 10_000);
        let h = holdout_anchor_ids(2, 0.5, 42).unwrap();
        assert_eq!(h.held_states.len(), 1);
        let retained: Vec<usize> = (0..2).filter(|&s| !h.is_held(s)).collect();
        assert_eq!(retained.len(), 1);
        assert!(!h.held_states.contains(&retained[0]));
    }

    #[test]
    fn cross_trajectory_edges() {
        assert_eq!(count_cross_trajectory_edges(&build_graph(&world(5, 30), 5).unwrap()), 0);
        let empty = AssociationGraph::from_edges(5, meta(&[(0, 0, 0), (1, 0, 0)]), []).unwrap();
        assert_eq!(count_cross_trajectory_edges(&empty), 0);
        let injected =
            AssociationGraph::from_edges(5, meta(&[(0, 0, 0), (0, 1, 0), (1, 0, 1)]), [(0, 1), (1, 2)]).unwrap();
        assert_eq!(count_cross_trajectory_edges(&injected), 1);
    }

    #[test]
    fn familiarity_weight_oracles() {
        // Trajectories 0 and 1 contain no room-0/room-1 co-occurrence;
        // trajectory 2 contains exactly one.
        let states = meta(&[
            (0, 0, 0),
            (0, 1, 0),
            (1, 0, 0),
            (1, 1, 0),
            (2, 0, 0),
            (2, 1, 1),
        ]);
        let g = AssociationGraph::from_edges(1, states, [(0, 1), (2, 3), (4, 5)]).unwrap();
        assert_eq!(familiarity_normalised_weight(&g, 4, 5, 2).unwrap(), 1.0);
        // Never co-occurring pair: raw 0, baseline 0.
        assert_eq!(familiarity_normalised_weight(&g, 0, 5, 2).unwrap(), 0.0);
        assert!(familiarity_normalised_weight(&g, 0, 1, 0).is_err());
    }

    #[test]
    fn familiarity_weight_vanishes_for_constant_rate() {
        // Ten trajectories, each with one room-0/room-1 edge.
        let mut rows = Vec::new();
        let mut edges = Vec::new();
        for t in 0..10 {
            rows.push((t, 0, 0));
            rows.push((t, 1, 1));
            edges.push((2 * t, 2 * t + 1));
        }
        let g = AssociationGraph::from_edges(1, meta(&rows), edges).unwrap();
        for window in [1, 3, 9] {
            assert_eq!(familiarity_normalised_weight(&g, 18, 19, window).unwrap(), 0.0);
        }
    }

    #[test]
    fn neighbourhood_depths() {
        let states = meta(&(0..6).map(|t| (0, t, 0)).collect::<Vec<_>>());
        let g = AssociationGraph::from_edges(1, states, (0..5).map(|t| (t, t + 1))).unwrap();
        assert_eq!(g.neighbourhood(0, 1), vec![1]);
        assert_eq!(g.neighbourhood(2, 2), vec![0, 1, 3, 4]);
    }
}
