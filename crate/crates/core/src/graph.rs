//! Object-relation graph with neural message passing.
//!
//! Nodes are object embeddings. Each real object is linked to its `k` most
//! cosine-similar real neighbours. A step computes one message per directed
//! edge `(i, j)` as `f([v_i, v_j - v_i])` and sums each node's outgoing
//! messages into its next feature. After the last step the original features
//! are added back (skip connection), and one more message layer over the
//! enhanced nodes yields the per-edge relation features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, Module};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Edges per node, clamped to the number of other real objects.
    pub k: usize,
    /// Message-passing steps.
    pub steps: usize,
    pub hidden_dim: usize,
    pub d_vis: usize,
}

impl GraphConfig {
    pub fn new(d_vis: usize) -> Self {
        Self {
            k: 5,
            steps: 2,
            hidden_dim: d_vis,
            d_vis,
        }
    }

    pub fn validate(&self, n_obj: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Input("graph needs at least one message-passing step".into()));
        }
        if self.k == 0 || (n_obj > 1 && self.k > n_obj - 1) {
            return Err(Error::Input(format!(
                "edges per node must lie in [1, {}], got {}",
                n_obj.saturating_sub(1).max(1),
                self.k
            )));
        }
        Ok(())
    }
}

/// One MLP per message-passing step plus the relation-feature MLP.
#[derive(Clone, Debug)]
pub struct GraphParams {
    pub steps: Vec<Mlp>,
    pub edge: Mlp,
}

impl GraphParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: &GraphConfig, rng: &mut R) -> Self {
        let d = config.d_vis;
        let steps = (0..config.steps)
            .map(|s| Mlp::new(store, &format!("{prefix}.step{s}"), 2 * d, config.hidden_dim, d, rng))
            .collect();
        let edge = Mlp::new(store, &format!("{prefix}.edge"), 2 * d, config.hidden_dim, d, rng);
        Self { steps, edge }
    }

    pub fn step_params(&self) -> Vec<ParamId> {
        self.steps.iter().flat_map(Mlp::params).collect()
    }

    pub fn edge_params(&self) -> Vec<ParamId> {
        self.edge.params()
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let mut p = self.step_params();
        p.extend(self.edge_params());
        p
    }
}

/// Directed edge `(source, neighbour)`.
pub type Edge = (usize, usize);

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Links every real node to its `min(k, real - 1)` most similar real nodes.
/// Edges are grouped by source in ascending order; within a group they run
/// from most to least similar, equal similarities going to the lower index.
pub fn build_edges(object_feats: &Tensor, object_mask: &[bool], k: usize) -> Vec<Edge> {
    let real: Vec<usize> = (0..object_mask.len()).filter(|&i| object_mask[i]).collect();
    let per_node = k.min(real.len().saturating_sub(1));
    let mut edges = Vec::with_capacity(real.len() * per_node);
    for &i in &real {
        let mut candidates: Vec<(f64, usize)> = real
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| (cosine(object_feats.row(i), object_feats.row(j)), j))
            .collect();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        edges.extend(candidates.iter().take(per_node).map(|&(_, j)| (i, j)));
    }
    edges
}

/// Per-edge messages `f([v_i, v_j - v_i])`, one row per edge.
pub fn message_step<F: Module>(
    tape: &mut Tape,
    nodes: Var,
    edges: &[Edge],
    f: &F,
) -> Result<Var> {
    let sources: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let targets: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let v_i = tape.gather_rows(nodes, &sources)?;
    let v_j = tape.gather_rows(nodes, &targets)?;
    let diff = tape.sub(v_j, v_i)?;
    let input = tape.concat(&[v_i, diff], 1)?;
    f.forward(tape, input)
}

/// Sums each node's outgoing messages; nodes without edges get zeros.
pub fn aggregate(tape: &mut Tape, messages: Var, edges: &[Edge], n_nodes: usize) -> Result<Var> {
    let sources: Vec<usize> = edges.iter().map(|e| e.0).collect();
    tape.scatter_add_rows(messages, &sources, n_nodes)
}

/// Tape handles produced by [`run_graph`].
#[derive(Clone, Debug)]
pub struct GraphVars {
    /// `n_obj × d_vis`.
    pub enhanced_nodes: Var,
    /// `edges.len() × d_vis`.
    pub edge_features: Var,
    pub edge_index: Vec<Edge>,
}

/// Full graph pass over one image's object slots (`n_obj × d_vis`), with
/// edges built from `config.k`.
pub fn run_graph(
    tape: &mut Tape,
    object_feats: Var,
    object_mask: &[bool],
    config: &GraphConfig,
    params: &GraphParams,
) -> Result<GraphVars> {
    let n = object_mask.len();
    if tape.shape(object_feats).first() != Some(&n) {
        return Err(Error::dim(format!(
            "{n} mask flags for object block {:?}",
            tape.shape(object_feats)
        )));
    }
    let edges = build_edges(tape.value(object_feats), object_mask, config.k);
    run_graph_with_edges(tape, object_feats, object_mask, edges, params)
}

/// Graph pass over a given edge list.
pub fn run_graph_with_edges(
    tape: &mut Tape,
    object_feats: Var,
    object_mask: &[bool],
    edges: Vec<Edge>,
    params: &GraphParams,
) -> Result<GraphVars> {
    let n = object_mask.len();
    let original = tape.mask_rows(object_feats, object_mask)?;
    let mut nodes = original;
    for f in &params.steps {
        let messages = message_step(tape, nodes, &edges, f)?;
        nodes = aggregate(tape, messages, &edges, n)?;
    }
    let enhanced = tape.add(nodes, original)?;
    let edge_features = message_step(tape, enhanced, &edges, &params.edge)?;
    Ok(GraphVars {
        enhanced_nodes: enhanced,
        edge_features,
        edge_index: edges,
    })
}

/// Materialized graph result.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphOutput {
    pub enhanced_nodes: Tensor,
    pub edge_features: Tensor,
    pub edge_index: Vec<Edge>,
}

/// Runs the graph outside any training tape.
pub fn evaluate_graph(
    store: &ParamStore,
    object_feats: &Tensor,
    object_mask: &[bool],
    config: &GraphConfig,
    params: &GraphParams,
) -> Result<GraphOutput> {
    let mut tape = Tape::with_params(store);
    let x = tape.constant(object_feats.clone());
    let out = run_graph(&mut tape, x, object_mask, config, params)?;
    Ok(GraphOutput {
        enhanced_nodes: tape.value(out.enhanced_nodes).clone(),
        edge_features: tape.value(out.edge_features).clone(),
        edge_index: out.edge_index,
    })
}
