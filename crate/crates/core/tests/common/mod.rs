#![allow(dead_code)]

use pam_core::assoc_graph::{AssociationGraph, StateMeta};
use pam_core::eval::EvalConfig;
use pam_core::numerics::Matrix;
use serde::Deserialize;

#[derive(Deserialize)]
pub struct FixtureState {
    pub trajectory: usize,
    pub timestep: usize,
    pub room: usize,
}

#[derive(Deserialize)]
pub struct PerQuery {
    pub ranking: Vec<usize>,
    pub ap: Vec<f64>,
    pub cbr: Vec<f64>,
    pub auc: f64,
    pub auc_cross_room: f64,
    pub spec: Vec<Option<f64>>,
    pub rr: f64,
}

#[derive(Deserialize)]
pub struct Macro {
    pub ap: Vec<f64>,
    pub cbr: Vec<f64>,
    pub auc: f64,
    pub auc_cross_room: f64,
    pub spec: Vec<f64>,
    pub spec_defined: Vec<usize>,
    pub mrr: f64,
}

#[derive(Deserialize)]
pub struct TwoHop {
    pub query: usize,
    pub k: usize,
    pub beam: usize,
    pub recall: Vec<f64>,
}

#[derive(Deserialize)]
pub struct SixState {
    pub tau: usize,
    pub states: Vec<FixtureState>,
    pub edges: Vec<(usize, usize)>,
    pub scores: Vec<Vec<f64>>,
    pub per_query: Vec<PerQuery>,
    pub k_values: Vec<usize>,
    #[serde(rename = "macro")]
    pub macro_: Macro,
    pub two_hop: TwoHop,
}

impl SixState {
    pub fn load() -> Self {
        serde_json::from_str(include_str!("../fixtures/six_state.json")).expect("fixture parses")
    }

    pub fn graph(&self) -> AssociationGraph {
        let metas = self
            .states
            .iter()
            .map(|s| StateMeta { trajectory: s.trajectory, timestep: s.timestep, room: s.room })
            .collect();
        AssociationGraph::from_edges(self.tau, metas, self.edges.iter().copied()).unwrap()
    }

    pub fn table(&self) -> Matrix {
        Matrix::from_rows(&self.scores).unwrap()
    }

    /// Every state is a query; no negative subsampling.
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            k_values: self.k_values.clone(),
            n_queries_precision: 6,
            n_queries_cbr: 6,
            n_queries_auc: 6,
            auc_negative_cap: 100,
            n_queries_spec: 6,
            query_seed: 0,
            hop_depths: vec![1, 2],
            beam_width: self.two_hop.beam,
            recency_lambdas: vec![0.0],
            recency_k: 1,
            min_assoc_precision: 1,
            min_cross_assoc_cbr: 1,
            min_assoc_auc: 1,
            min_cross_assoc_auc: 1,
            min_cross_assoc_spec: 1,
        }
    }
}

pub const FIXTURE_TOL: f64 = 1e-12;

/// Recomputes every fixture value through the library and returns a line
/// per mismatch.
pub fn fixture_mismatches() -> Vec<String> {
    use pam_core::eval::*;

    let fx = SixState::load();
    let graph = fx.graph();
    let table = fx.table();
    let memory = Matrix::zeros(fx.states.len(), 1);
    let retriever = Retriever::new(Method::Table(&table), &memory).unwrap();
    let mut bad = Vec::new();
    fn check(bad: &mut Vec<String>, what: String, got: f64, want: f64) {
        if !((got - want).abs() <= FIXTURE_TOL) {
            bad.push(format!("{what}: got {got}, want {want}"));
        }
    }

    for (q, want) in fx.per_query.iter().enumerate() {
        let s = &fx.scores[q];
        let ranked = rank_memory(s, &[q]);
        if ranked != want.ranking {
            bad.push(format!("q{q} ranking: got {ranked:?}, want {:?}", want.ranking));
        }
        let cross = graph.cross_room_associates(q);
        let room = graph.meta(q).room;
        let non: Vec<usize> = (0..6).filter(|&j| j != q && !graph.is_associated(q, j)).collect();
        let distractors: Vec<usize> = non.iter().copied().filter(|&j| graph.meta(j).room == room).collect();
        let cross_neg: Vec<usize> = non.iter().copied().filter(|&j| graph.meta(j).room != room).collect();
        let pick = |ids: &[usize]| ids.iter().map(|&i| s[i]).collect::<Vec<_>>();
        for (i, &k) in fx.k_values.iter().enumerate() {
            check(&mut bad, format!("q{q} AP@{k}"), ap_at_k(&ranked, graph.associates(q), k), want.ap[i]);
            check(&mut bad, format!("q{q} CBR@{k}"), cbr_at_k(&ranked, &cross, k), want.cbr[i]);
            let spec = specificity_at_k(&ranked, &cross, &distractors, k);
            if spec != want.spec[i] {
                bad.push(format!("q{q} Spec@{k}: got {spec:?}, want {:?}", want.spec[i]));
            }
        }
        check(&mut bad, format!("q{q} AUC"), discrimination_auc(&pick(graph.associates(q)), &pick(&non)), want.auc);
        check(&mut bad, 
            format!("q{q} cross-room AUC"),
            discrimination_auc(&pick(&cross), &pick(&cross_neg)),
            want.auc_cross_room,
        );
        check(&mut bad, format!("q{q} RR"), reciprocal_rank(s, &[q], &cross), want.rr);
    }

    let config = fx.eval_config();
    let report = evaluate(&[retriever], &graph, &config).unwrap();
    let m = &report.methods[0];
    for (i, k) in fx.k_values.iter().enumerate() {
        check(&mut bad, format!("macro AP@{k}"), m.ap_at_k[k], fx.macro_.ap[i]);
        check(&mut bad, format!("macro CBR@{k}"), m.cbr_at_k[k], fx.macro_.cbr[i]);
        check(&mut bad, format!("macro Spec@{k}"), m.spec_at_k[k].unwrap_or(f64::NAN), fx.macro_.spec[i]);
        if m.spec_defined[k] != fx.macro_.spec_defined[i] {
            bad.push(format!("Spec@{k} defined count {} vs {}", m.spec_defined[k], fx.macro_.spec_defined[i]));
        }
    }
    check(&mut bad, "macro AUC".into(), m.auc_overall, fx.macro_.auc);
    check(&mut bad, "macro cross-room AUC".into(), m.auc_cross_room.unwrap_or(f64::NAN), fx.macro_.auc_cross_room);

    let retriever = Retriever::new(Method::Table(&table), &memory).unwrap();
    let all: Vec<usize> = (0..6).collect();
    check(&mut bad, "MRR".into(), mean_reciprocal_rank(&retriever, &graph, &all).unwrap(), fx.macro_.mrr);
    let hop = &fx.two_hop;
    let recall = multi_hop_recall(&retriever, &graph, &[hop.query], &[1, 2], hop.k, hop.beam).unwrap();
    check(&mut bad, "two-hop depth 1".into(), recall[&1], hop.recall[0]);
    check(&mut bad, "two-hop depth 2".into(), recall[&2], hop.recall[1]);
    bad
}
