//! Heterogeneous graph attention over spatial and temporal edges.
//!
//! Each edge kind runs its own stack of multi-head attention layers starting
//! from the shared projection `h = W_v v`. Intermediate layers concatenate
//! heads, the last layer averages them. The two per-kind node embeddings are
//! mixed with learned kind weights β that sum to one.

use std::rc::Rc;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::numcore::{l2_norm, Tape, Tensor, Var};
use crate::params::{ParamId, ParamStore};
use crate::stgraph::{DirectedEdges, EdgeKind, SpatioTemporalGraph};

pub const KINDS: [EdgeKind; 2] = [EdgeKind::Spatial, EdgeKind::Temporal];

pub fn kind_name(kind: EdgeKind) -> &'static str {
    match kind {
        EdgeKind::Spatial => "spat",
        EdgeKind::Temporal => "temp",
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub w: ParamId,
    pub w_e: ParamId,
    pub attn: ParamId,
}

#[derive(Clone, Debug)]
pub struct HetGatLayout {
    pub w_v: ParamId,
    /// `heads[layer][head][kind]`
    pub heads: Vec<Vec<[HeadParams; 2]>>,
    pub w_b: ParamId,
    pub b: ParamId,
    pub q: ParamId,
}

impl HetGatLayout {
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let w_v = store.add_uniform("input.W_v", &[d, 3], 3, rng);
        let mut heads = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let din = if l == 0 { d } else { d * cfg.heads };
            let mut layer = Vec::with_capacity(cfg.heads);
            for k in 0..cfg.heads {
                let per_kind = KINDS.map(|kind| {
                    let prefix = format!("layer{l}.head{k}.{}", kind_name(kind));
                    HeadParams {
                        w: store.add_uniform(format!("{prefix}.W"), &[d, din], din, rng),
                        w_e: store.add_uniform(format!("{prefix}.W_e"), &[d], 1, rng),
                        attn: store.add_uniform(format!("{prefix}.a"), &[3 * d], 3 * d, rng),
                    }
                });
                layer.push(per_kind);
            }
            heads.push(layer);
        }
        let db = cfg.beta_dim;
        Self {
            w_v,
            heads,
            w_b: store.add_uniform("beta.W_b", &[db, d], d, rng),
            b: store.add_uniform("beta.b", &[db], d, rng),
            q: store.add_uniform("beta.q", &[db], db, rng),
        }
    }
}

/// Per-node embeddings and kind weights, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddings {
    pub m: Tensor,
    pub h_spat: Tensor,
    pub h_temp: Tensor,
    /// `[β_spat, β_temp]`
    pub beta: [f64; 2],
    /// Nodes whose mixed embedding had zero norm before normalization.
    pub degenerate: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct EmbedVars<'t> {
    pub m: Var<'t>,
    pub h_spat: Var<'t>,
    pub h_temp: Var<'t>,
    pub beta: Var<'t>,
}

impl EmbedVars<'_> {
    pub fn detach(&self) -> NodeEmbeddings {
        let m = self.m.value();
        let beta = self.beta.value();
        let mixed_zero = degenerate_rows(&m);
        NodeEmbeddings {
            m,
            h_spat: self.h_spat.value(),
            h_temp: self.h_temp.value(),
            beta: [beta.data()[0], beta.data()[1]],
            degenerate: mixed_zero,
        }
    }
}

pub(crate) fn degenerate_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows()).filter(|&r| l2_norm(t.row(r)) == 0.0).collect()
}

/// `h_i = W_v v_i` for every node attribute row of `attrs` (`[n × 3]`).
pub fn project<'t>(p: &[Var<'t>], layout: &HetGatLayout, attrs: Var<'t>) -> Result<Var<'t>> {
    attrs.linear_rows(p[layout.w_v.0])
}

/// Attention of every directed edge of one kind, for one head.
///
/// Returns `(α, W h)`: `α[e]` weighs the message `src[e] -> dst[e]`, and the
/// α of each destination's neighborhood sum to one.
pub fn attention<'t>(
    p: &[Var<'t>],
    head: &HeadParams,
    h: Var<'t>,
    edges: &DirectedEdges,
) -> Result<(Var<'t>, Var<'t>)> {
    let tape = h.tape();
    let proj = h.linear_rows(p[head.w.0])?;
    if edges.is_empty() {
        return Ok((tape.constant(Tensor::vector(vec![])), proj));
    }
    let d = proj.shape()[1];
    let a = p[head.attn.0].reshape(vec![3, d])?;
    // columns: [a_self · Wh, a_neigh · Wh]
    let node_terms = proj.linear_rows(a.gather(Rc::from([0usize, 1]))?)?;
    let n = edges.n_nodes;
    let flat = node_terms.reshape(vec![2 * n])?;
    let self_idx: Rc<[usize]> = edges.dst.iter().map(|&i| 2 * i).collect();
    let neigh_idx: Rc<[usize]> = edges.src.iter().map(|&j| 2 * j + 1).collect();
    let a_edge = a.gather(Rc::from([2usize]))?.reshape(vec![d])?;
    let edge_gain = a_edge.dot(p[head.w_e.0])?.reshape(vec![1])?;
    let weights = tape.constant(Tensor::vector(edges.weight.clone()));
    let edge_term = weights.outer(edge_gain)?.reshape(vec![edges.len()])?;
    let scores = flat
        .gather(self_idx)?
        .add(flat.gather(neigh_idx)?)?
        .add(edge_term)?
        .relu();
    let alpha = scores.segment_softmax(edges.dst.clone(), n)?;
    Ok((alpha, proj))
}

/// One attention layer of one head: `ReLU(W h_i + Σ_j α_ij (W h_j + W_e e_ij))`.
pub fn propagate_head<'t>(
    p: &[Var<'t>],
    head: &HeadParams,
    h: Var<'t>,
    edges: &DirectedEdges,
) -> Result<Var<'t>> {
    let (alpha, proj) = attention(p, head, h, edges)?;
    if edges.is_empty() {
        return Ok(proj.relu());
    }
    let tape = h.tape();
    let weights = tape.constant(Tensor::vector(edges.weight.clone()));
    let node_msgs = proj.gather(edges.src.clone())?.scale_rows(alpha)?;
    let edge_msgs = alpha.mul(weights)?.outer(p[head.w_e.0])?;
    let agg = node_msgs
        .add(edge_msgs)?
        .scatter_add(edges.dst.clone(), edges.n_nodes)?;
    Ok(proj.add(agg)?.relu())
}

/// Runs the full layer stack for one edge kind.
pub fn propagate<'t>(
    p: &[Var<'t>],
    layout: &HetGatLayout,
    h: Var<'t>,
    edges: &DirectedEdges,
    kind: EdgeKind,
) -> Result<Var<'t>> {
    let ki = match kind {
        EdgeKind::Spatial => 0,
        EdgeKind::Temporal => 1,
    };
    let mut current = h;
    let last = layout.heads.len() - 1;
    for (l, layer) in layout.heads.iter().enumerate() {
        let outs = layer
            .iter()
            .map(|heads| propagate_head(p, &heads[ki], current, edges))
            .collect::<Result<Vec<_>>>()?;
        current = if l < last {
            Var::concat_cols(&outs)?
        } else {
            let mut acc = outs[0];
            for o in &outs[1..] {
                acc = acc.add(*o)?;
            }
            acc.scale(1.0 / outs.len() as f64)
        };
    }
    Ok(current)
}

fn raw_type_score<'t>(
    p: &[Var<'t>],
    layout: &HetGatLayout,
    h: Var<'t>,
    covered: &[usize],
) -> Result<Var<'t>> {
    let q = p[layout.q.0];
    let db = q.shape()[0];
    h.gather(covered.into())?
        .linear_rows(p[layout.w_b.0])?
        .add_row(p[layout.b.0])?
        .tanh()
        .linear_rows(q.reshape(vec![1, db])?)?
        .mean_rows()
}

/// Kind weights `[β_spat, β_temp]`: a two-way softmax over the mean attention
/// score of each kind's covered nodes. A kind without edges gets weight 0.
pub fn type_weights<'t>(
    p: &[Var<'t>],
    layout: &HetGatLayout,
    h_spat: Var<'t>,
    h_temp: Var<'t>,
    spat: &DirectedEdges,
    temp: &DirectedEdges,
) -> Result<Var<'t>> {
    let tape = h_spat.tape();
    let (cs, ct) = (spat.covered(), temp.covered());
    match (cs.is_empty(), ct.is_empty()) {
        (true, true) => Err(CoreError::NoEdges),
        (false, true) => Ok(tape.constant(Tensor::vector(vec![1.0, 0.0]))),
        (true, false) => Ok(tape.constant(Tensor::vector(vec![0.0, 1.0]))),
        (false, false) => {
            let rs = raw_type_score(p, layout, h_spat, &cs)?;
            let rt = raw_type_score(p, layout, h_temp, &ct)?;
            Var::concat(&[rs, rt])?.softmax()
        }
    }
}

/// Broadcasts entry `k` of the vector `v` into an `n`-vector.
pub(crate) fn broadcast_entry<'t>(v: Var<'t>, k: usize, n: usize) -> Result<Var<'t>> {
    v.gather(vec![k; n].into())
}

/// Final node embeddings `m_i = β_spat h_i^spat + β_temp h_i^temp`,
/// optionally scaled to unit length.
pub fn embed<'t>(
    p: &[Var<'t>],
    layout: &HetGatLayout,
    graph: &SpatioTemporalGraph,
    normalize: bool,
) -> Result<EmbedVars<'t>> {
    let tape = p[0].tape();
    let spat = graph.directed(EdgeKind::Spatial);
    let temp = graph.directed(EdgeKind::Temporal);
    embed_with_edges(tape, p, layout, graph.attributes(), &spat, &temp, normalize)
}

pub(crate) fn embed_with_edges<'t>(
    tape: &'t Tape,
    p: &[Var<'t>],
    layout: &HetGatLayout,
    attrs: Tensor,
    spat: &DirectedEdges,
    temp: &DirectedEdges,
    normalize: bool,
) -> Result<EmbedVars<'t>> {
    let n = attrs.rows();
    let h = project(p, layout, tape.constant(attrs))?;
    let h_spat = propagate(p, layout, h, spat, EdgeKind::Spatial)?;
    let h_temp = propagate(p, layout, h, temp, EdgeKind::Temporal)?;
    let beta = type_weights(p, layout, h_spat, h_temp, spat, temp)?;
    let mixed = h_spat
        .scale_rows(broadcast_entry(beta, 0, n)?)?
        .add(h_temp.scale_rows(broadcast_entry(beta, 1, n)?)?)?;
    let m = if normalize { mixed.normalize_rows() } else { mixed };
    Ok(EmbedVars {
        m,
        h_spat,
        h_temp,
        beta,
    })
}
