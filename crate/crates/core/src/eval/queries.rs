//! Seeded query selection.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::assoc_graph::AssociationGraph;
use crate::rng::{substream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "min")]
pub enum QueryCriterion {
    /// At least `m` associates.
    MinAssoc(usize),
    /// At least `m` cross-room associates.
    MinCrossAssoc(usize),
}

impl QueryCriterion {
    pub fn accepts(&self, graph: &AssociationGraph, state: usize) -> bool {
        match *self {
            QueryCriterion::MinAssoc(m) => graph.associates(state).len() >= m,
            QueryCriterion::MinCrossAssoc(m) => graph.n_cross_room_associates(state) >= m,
        }
    }

    fn stream(&self) -> u64 {
        match *self {
            QueryCriterion::MinAssoc(m) => m as u64,
            QueryCriterion::MinCrossAssoc(m) => (1 << 32) | m as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySelection {
    /// Selected state ids, ascending.
    pub ids: Vec<usize>,
    pub requested: usize,
    /// How many states met the criterion.
    pub qualifying: usize,
}

impl QuerySelection {
    /// How many requested queries could not be filled.
    pub fn shortfall(&self) -> usize {
        self.requested.saturating_sub(self.ids.len())
    }
}

/// Uniform sample without replacement of up to `n` states meeting
/// `criterion`. When fewer qualify, all of them are returned.
pub fn select_queries(graph: &AssociationGraph, criterion: QueryCriterion, n: usize, seed: u64) -> QuerySelection {
    select_queries_where(graph, criterion, n, seed, |_| true)
}

/// As [`select_queries`], restricted to states for which `eligible` holds.
pub fn select_queries_where(
    graph: &AssociationGraph,
    criterion: QueryCriterion,
    n: usize,
    seed: u64,
    eligible: impl Fn(usize) -> bool,
) -> QuerySelection {
    let pool: Vec<usize> = (0..graph.n_states())
        .filter(|&s| eligible(s) && criterion.accepts(graph, s))
        .collect();
    let ids = if pool.len() <= n {
        pool.clone()
    } else {
        let mut rng = substream(seed, Domain::Queries, criterion.stream());
        let mut ids: Vec<usize> = index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
        ids.sort_unstable();
        ids
    };
    QuerySelection { ids, requested: n, qualifying: pool.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assoc_graph::build_graph;
    use crate::worldgen::{gen_world, WorldConfig};

    fn graph() -> AssociationGraph {
        let w = gen_world(&WorldConfig {
            embed_dim: 8,
            n_rooms: 4,
            n_objects: 8,
            objects_per_room: 3,
            n_shared_objects: 2,
            n_trajectories: 6,
            trajectory_len: 40,
            room_dwell_mean: 4,
            ..WorldConfig::default()
        })
        .unwrap();
        build_graph(&w, 5).unwrap()
    }

    #[test]
    fn membership_matches_brute_force_filter() {
        let g = graph();
        for crit in [QueryCriterion::MinAssoc(3), QueryCriterion::MinAssoc(10), QueryCriterion::MinCrossAssoc(3)] {
            let all = select_queries(&g, crit, usize::MAX, 1);
            let brute: Vec<usize> = (0..g.n_states())
                .filter(|&s| match crit {
                    QueryCriterion::MinAssoc(m) => g.edges().iter().filter(|e| e.0 == s || e.1 == s).count() >= m,
                    QueryCriterion::MinCrossAssoc(m) => {
                        g.edges()
                            .iter()
                            .filter(|e| (e.0 == s || e.1 == s) && g.meta(e.0).room != g.meta(e.1).room)
                            .count()
                            >= m
                    }
                })
                .collect();
            assert_eq!(all.ids, brute);
            assert_eq!(all.qualifying, brute.len());
            let some = select_queries(&g, crit, 20, 1);
            assert!(some.ids.iter().all(|id| brute.contains(id)));
            assert_eq!(some.ids.len(), 20.min(brute.len()));
        }
    }

    #[test]
    fn excludes_states_below_threshold() {
        let g = graph();
        // Each trajectory's first state has exactly tau associates.
        let sel = select_queries(&g, QueryCriterion::MinAssoc(6), usize::MAX, 0);
        assert!(!sel.ids.contains(&0));
        assert!(sel.ids.contains(&10));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let g = graph();
        let a = select_queries(&g, QueryCriterion::MinAssoc(3), 50, 9);
        let b = select_queries(&g, QueryCriterion::MinAssoc(3), 50, 9);
        let c = select_queries(&g, QueryCriterion::MinAssoc(3), 50, 10);
        assert_eq!(a, b);
        assert_ne!(a.ids, c.ids);
    }

    #[test]
    fn shortfall_is_recorded() {
        let g = graph();
        let sel = select_queries(&g, QueryCriterion::MinAssoc(3), 100_000, 9);
        assert_eq!(sel.ids.len(), g.n_states());
        assert_eq!(sel.shortfall(), 100_000 - g.n_states());
    }
}
