//! Structure-aware pooling of each edge kind's subgraph into one vector.
//!
//! Single pooling stage per kind: every node forms a cluster over its 1-hop
//! ego network with attention weights, clusters are scored by a fitness
//! function, the top `⌈ratio·N⌉` clusters are kept and their fitness-scaled
//! embeddings are averaged.

use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::hetgat::{kind_name, KINDS};
use crate::model::ModelConfig;
use crate::numcore::{l2_norm, Tensor, Var};
use crate::params::{ParamId, ParamStore};
use crate::stgraph::{DirectedEdges, EdgeKind, SpatioTemporalGraph};

#[derive(Clone, Copy, Debug)]
pub struct PoolKindParams {
    pub w_p: ParamId,
    pub q_p: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub w_f: ParamId,
    pub w_m: ParamId,
}

#[derive(Clone, Debug)]
pub struct PoolLayout {
    /// indexed by kind: spatial, temporal
    pub kinds: [PoolKindParams; 2],
}

impl PoolLayout {
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, db) = (cfg.dim, cfg.beta_dim);
        let kinds = KINDS.map(|kind| {
            let prefix = format!("pool.{}", kind_name(kind));
            PoolKindParams {
                w_p: store.add_uniform(format!("{prefix}.W_p"), &[db, 2 * d], 2 * d, rng),
                q_p: store.add_uniform(format!("{prefix}.q_p"), &[db], db, rng),
                w1: store.add_uniform(format!("{prefix}.W1"), &[d, d], d, rng),
                w2: store.add_uniform(format!("{prefix}.W2"), &[d, d], d, rng),
                w3: store.add_uniform(format!("{prefix}.W3"), &[d, d], d, rng),
                w_f: store.add_uniform(format!("{prefix}.w_f"), &[d], d, rng),
                w_m: store.add_uniform(format!("{prefix}.W_m"), &[d, d], d, rng),
            }
        });
        Self { kinds }
    }

    pub fn kind(&self, kind: EdgeKind) -> &PoolKindParams {
        match kind {
            EdgeKind::Spatial => &self.kinds[0],
            EdgeKind::Temporal => &self.kinds[1],
        }
    }
}

#[derive(Clone, Debug)]
pub struct PooledVars<'t> {
    pub z: Var<'t>,
    /// kept cluster centers, best fitness first
    pub selected: Vec<usize>,
    pub fitness: Vec<f64>,
}

/// Number of clusters kept for `n` nodes.
pub fn kept_clusters(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).ceil() as usize).clamp(1, n.max(1))
}

/// Indices of the `k` largest values, largest first, ties to the lower index.
pub(crate) fn rank_desc(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Pools the node embeddings `m` (`[n × d]`) over one kind's edges into `z^Ψ`.
pub fn pool_subgraph<'t>(
    p: &[Var<'t>],
    params: &PoolKindParams,
    m: Var<'t>,
    edges: &DirectedEdges,
    ratio: f64,
) -> Result<PooledVars<'t>> {
    let tape = m.tape();
    let n = edges.n_nodes;
    let db = p[params.q_p.0].shape()[0];
    let d = p[params.w_f.0].shape()[0];

    // cluster attention over each ego network (neighbors plus self)
    let ego = edges.with_self_loops();
    let pair = Var::concat_cols(&[m.gather(ego.dst.clone())?, m.gather(ego.src.clone())?])?;
    let scores = pair
        .linear_rows(p[params.w_p.0])?
        .tanh()
        .linear_rows(p[params.q_p.0].reshape(vec![1, db])?)?
        .reshape(vec![ego.len()])?;
    let weights = scores.segment_softmax(ego.dst.clone(), n)?;
    let clusters = m
        .linear_rows(p[params.w_m.0])?
        .gather(ego.src.clone())?
        .scale_rows(weights)?
        .scatter_add(ego.dst.clone(), n)?;

    // fitness: tanh(w_f · (W1 m_i + Σ_j (W2 m_i − W3 m_j)))
    let degree = tape.constant(Tensor::vector(
        edges.degrees().into_iter().map(|k| k as f64).collect(),
    ));
    let own = m
        .linear_rows(p[params.w1.0])?
        .add(m.linear_rows(p[params.w2.0])?.scale_rows(degree)?)?;
    let neigh = m
        .linear_rows(p[params.w3.0])?
        .gather(edges.src.clone())?
        .scatter_add(edges.dst.clone(), n)?;
    let fitness = own
        .sub(neigh)?
        .linear_rows(p[params.w_f.0].reshape(vec![1, d])?)?
        .reshape(vec![n])?
        .tanh();

    let fit_values = fitness.value().into_data();
    let selected = rank_desc(&fit_values, kept_clusters(n, ratio));
    let sel: Rc<[usize]> = selected.clone().into();
    let z = clusters.scale_rows(fitness)?.gather(sel)?.mean_rows()?;
    Ok(PooledVars {
        z,
        selected,
        fitness: fit_values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEmbedding {
    pub z: Tensor,
    pub z_spat: Tensor,
    pub z_temp: Tensor,
    pub selected_spat: Vec<usize>,
    pub selected_temp: Vec<usize>,
    /// z had zero norm before normalization
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct GraphEmbeddingVars<'t> {
    pub z: Var<'t>,
    pub spat: PooledVars<'t>,
    pub temp: PooledVars<'t>,
}

impl GraphEmbeddingVars<'_> {
    pub fn detach(&self) -> GraphEmbedding {
        let z = self.z.value();
        GraphEmbedding {
            degenerate: l2_norm(z.data()) == 0.0,
            z,
            z_spat: self.spat.z.value(),
            z_temp: self.temp.z.value(),
            selected_spat: self.spat.selected.clone(),
            selected_temp: self.temp.selected.clone(),
        }
    }
}

/// `z = β_spat z^spat + β_temp z^temp`, optionally scaled to unit length.
pub fn graph_embedding<'t>(
    p: &[Var<'t>],
    layout: &PoolLayout,
    m: Var<'t>,
    graph: &SpatioTemporalGraph,
    beta: Var<'t>,
    ratio: f64,
    normalize: bool,
) -> Result<GraphEmbeddingVars<'t>> {
    let spat = graph.directed(EdgeKind::Spatial);
    let temp = graph.directed(EdgeKind::Temporal);
    graph_embedding_with_edges(p, layout, m, &spat, &temp, beta, ratio, normalize)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn graph_embedding_with_edges<'t>(
    p: &[Var<'t>],
    layout: &PoolLayout,
    m: Var<'t>,
    spat: &DirectedEdges,
    temp: &DirectedEdges,
    beta: Var<'t>,
    ratio: f64,
    normalize: bool,
) -> Result<GraphEmbeddingVars<'t>> {
    let ps = pool_subgraph(p, layout.kind(EdgeKind::Spatial), m, spat, ratio)?;
    let pt = pool_subgraph(p, layout.kind(EdgeKind::Temporal), m, temp, ratio)?;
    let d = ps.z.shape()[0];
    let as_row = |v: Var<'t>| v.reshape(vec![1, d]);
    let mixed = as_row(ps.z)?
        .scale_rows(beta.gather(Rc::from([0usize]))?)?
        .add(as_row(pt.z)?.scale_rows(beta.gather(Rc::from([1usize]))?)?)?;
    let mixed = if normalize { mixed.normalize_rows() } else { mixed };
    Ok(GraphEmbeddingVars {
        z: mixed.reshape(vec![d])?,
        spat: ps,
        temp: pt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tape;
    use crate::stgraph::{Edge, ObjectObservation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            dim: 4,
            beta_dim: 3,
            ..ModelConfig::default()
        }
    }

    fn obs(t: usize, track: u32) -> ObjectObservation {
        ObjectObservation {
            t,
            track_id: track,
            gt_id: track,
            pos: [track as f64, t as f64, 0.0],
        }
    }

    #[test]
    fn zero_parameters_single_node() {
        let mut store = ParamStore::new();
        let layout = PoolLayout::register(&mut store, &cfg(), &mut ChaCha8Rng::seed_from_u64(1));
        store.zero_all();
        let g = SpatioTemporalGraph::from_parts(vec![obs(0, 0)], vec![], vec![]).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let m = tape.constant(Tensor::matrix(1, 4, vec![0.5, -0.5, 0.5, 0.5]).unwrap());
        let out = pool_subgraph(&p, &layout.kinds[0], m, &g.directed(EdgeKind::Spatial), 0.5).unwrap();
        assert_eq!(out.fitness, vec![0.0]);
        assert!(out.z.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn half_of_four_nodes_kept() {
        assert_eq!(kept_clusters(4, 0.5), 2);
        assert_eq!(kept_clusters(5, 0.5), 3);
        assert_eq!(kept_clusters(1, 0.5), 1);

        let mut store = ParamStore::new();
        let layout = PoolLayout::register(&mut store, &cfg(), &mut ChaCha8Rng::seed_from_u64(2));
        let nodes = (0..4).map(|i| obs(0, i)).collect();
        let spatial = vec![
            Edge { p: 0, q: 1, weight: 1.0 },
            Edge { p: 1, q: 2, weight: 1.0 },
            Edge { p: 2, q: 3, weight: 1.0 },
        ];
        let g = SpatioTemporalGraph::from_parts(nodes, spatial, vec![]).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let m = tape.constant(
            Tensor::matrix(4, 4, (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        );
        let out = pool_subgraph(&p, &layout.kinds[0], m, &g.directed(EdgeKind::Spatial), 0.5).unwrap();
        assert_eq!(out.selected.len(), 2);
    }

    #[test]
    fn rank_desc_ties_go_to_lower_index() {
        assert_eq!(rank_desc(&[0.5, 0.9, 0.5, 0.9], 3), vec![1, 3, 0]);
    }
}
