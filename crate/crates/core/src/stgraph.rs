//! Spatiotemporal graphs built from one agent's observation sequence.
//!
//! Nodes are per-timestep detections ordered by `(t, track_id)`. Spatial edges
//! join detections of the same timestep (weight = distance in meters);
//! temporal edges join detections of the same track (weight = time gap).
//! Absent relations are absent edges, never zero-weight edges.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numcore::{l2_distance, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectObservation {
    pub t: usize,
    pub track_id: u32,
    /// Ground-truth identity; used for evaluation only.
    pub gt_id: u32,
    pub pos: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Spatial,
    Temporal,
}

/// Undirected weighted edge with `p < q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub p: usize,
    pub q: usize,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalLinking {
    /// Link each observation to the next observation of the same track.
    #[default]
    Consecutive,
    /// Link every pair of observations of the same track.
    AllPairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub spatial_radius: f64,
    pub temporal_linking: TemporalLinking,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            spatial_radius: 50.0,
            temporal_linking: TemporalLinking::Consecutive,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalGraph {
    nodes: Vec<ObjectObservation>,
    spatial: Vec<Edge>,
    temporal: Vec<Edge>,
}

/// Directed edge lists of one edge kind, in the layout the attention and
/// pooling layers consume: message flows `src -> dst`.
#[derive(Clone, Debug)]
pub struct DirectedEdges {
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub weight: Vec<f64>,
    pub n_nodes: usize,
}

impl DirectedEdges {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Nodes with at least one incident edge.
    pub fn covered(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n_nodes];
        for &d in self.dst.iter() {
            seen[d] = true;
        }
        (0..self.n_nodes).filter(|&i| seen[i]).collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes];
        for &d in self.dst.iter() {
            deg[d] += 1;
        }
        deg
    }

    /// Same edges with a self loop appended for every node.
    pub fn with_self_loops(&self) -> DirectedEdges {
        let mut src = self.src.to_vec();
        let mut dst = self.dst.to_vec();
        let mut weight = self.weight.clone();
        for i in 0..self.n_nodes {
            src.push(i);
            dst.push(i);
            weight.push(0.0);
        }
        DirectedEdges {
            src: src.into(),
            dst: dst.into(),
            weight,
            n_nodes: self.n_nodes,
        }
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> DirectedEdges {
        DirectedEdges {
            src: self.src.iter().map(|&i| perm[i]).collect(),
            dst: self.dst.iter().map(|&i| perm[i]).collect(),
            weight: self.weight.clone(),
            n_nodes: self.n_nodes,
        }
    }
}

/// Groups a flat observation list into per-timestep lists of length `t_len`.
pub fn group_by_timestep(obs: &[ObjectObservation], t_len: usize) -> Vec<Vec<ObjectObservation>> {
    let mut seq = vec![Vec::new(); t_len];
    for o in obs {
        if o.t < t_len {
            seq[o.t].push(o.clone());
        }
    }
    seq
}

/// Builds the graph of an observation sequence; `seq[t]` holds the
/// detections at timestep `t`.
pub fn build_graph(seq: &[Vec<ObjectObservation>], cfg: &GraphConfig) -> Result<SpatioTemporalGraph> {
    if seq.is_empty() {
        return Err(CoreError::InvalidGraph("empty observation sequence".into()));
    }
    let t_len = seq.len();
    let mut keyed: BTreeMap<(usize, u32), ObjectObservation> = BTreeMap::new();
    for (t, frame) in seq.iter().enumerate() {
        for o in frame {
            if o.t != t || o.t >= t_len {
                return Err(CoreError::InvalidGraph(format!(
                    "observation of track {} at t={} listed under timestep {t} of {t_len}",
                    o.track_id, o.t
                )));
            }
            if o.pos.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::InvalidGraph(format!(
                    "non-finite position for track {} at t={}",
                    o.track_id, o.t
                )));
            }
            if keyed.insert((o.t, o.track_id), o.clone()).is_some() {
                return Err(CoreError::InvalidGraph(format!(
                    "duplicate observation of track {} at t={}",
                    o.track_id, o.t
                )));
            }
        }
    }
    let nodes: Vec<ObjectObservation> = keyed.into_values().collect();

    let mut spatial = Vec::new();
    let mut start = 0;
    while start < nodes.len() {
        let t = nodes[start].t;
        let end = start + nodes[start..].iter().take_while(|o| o.t == t).count();
        for p in start..end {
            for q in p + 1..end {
                let d = l2_distance(&nodes[p].pos, &nodes[q].pos);
                if d > 0.0 && d <= cfg.spatial_radius {
                    spatial.push(Edge { p, q, weight: d });
                }
            }
        }
        start = end;
    }

    let mut tracks: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, o) in nodes.iter().enumerate() {
        tracks.entry(o.track_id).or_default().push(i);
    }
    let mut temporal = Vec::new();
    for members in tracks.values() {
        match cfg.temporal_linking {
            TemporalLinking::Consecutive => {
                for w in members.windows(2) {
                    let gap = (nodes[w[1]].t - nodes[w[0]].t) as f64;
                    temporal.push(Edge {
                        p: w[0],
                        q: w[1],
                        weight: gap,
                    });
                }
            }
            TemporalLinking::AllPairs => {
                for (a, &p) in members.iter().enumerate() {
                    for &q in &members[a + 1..] {
                        let gap = (nodes[q].t - nodes[p].t) as f64;
                        temporal.push(Edge { p, q, weight: gap });
                    }
                }
            }
        }
    }
    temporal.sort_by_key(|e| (e.p, e.q));

    Ok(SpatioTemporalGraph {
        nodes,
        spatial,
        temporal,
    })
}

impl SpatioTemporalGraph {
    pub fn nodes(&self) -> &[ObjectObservation] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spatial_edges(&self) -> &[Edge] {
        &self.spatial
    }

    pub fn temporal_edges(&self) -> &[Edge] {
        &self.temporal
    }

    pub fn edges(&self, kind: EdgeKind) -> &[Edge] {
        match kind {
            EdgeKind::Spatial => &self.spatial,
            EdgeKind::Temporal => &self.temporal,
        }
    }

    /// Node attribute matrix `[n × 3]`.
    pub fn attributes(&self) -> Tensor {
        let data = self.nodes.iter().flat_map(|o| o.pos).collect();
        Tensor::matrix(self.nodes.len(), 3, data).expect("n×3 attributes")
    }

    /// Both directions of every edge of `kind`, sorted by destination.
    pub fn directed(&self, kind: EdgeKind) -> DirectedEdges {
        let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
        for e in self.edges(kind) {
            pairs.push((e.q, e.p, e.weight));
            pairs.push((e.p, e.q, e.weight));
        }
        pairs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        DirectedEdges {
            dst: pairs.iter().map(|p| p.0).collect(),
            src: pairs.iter().map(|p| p.1).collect(),
            weight: pairs.iter().map(|p| p.2).collect(),
            n_nodes: self.nodes.len(),
        }
    }

    /// Splits into a spatial-only and a temporal-only graph over the same nodes.
    pub fn decompose(&self) -> (SpatioTemporalGraph, SpatioTemporalGraph) {
        (
            SpatioTemporalGraph {
                nodes: self.nodes.clone(),
                spatial: self.spatial.clone(),
                temporal: Vec::new(),
            },
            SpatioTemporalGraph {
                nodes: self.nodes.clone(),
                spatial: Vec::new(),
                temporal: self.temporal.clone(),
            },
        )
    }

    /// Edge union of two graphs over identical node lists.
    pub fn union(&self, other: &SpatioTemporalGraph) -> Result<SpatioTemporalGraph> {
        if self.nodes != other.nodes {
            return Err(CoreError::InvalidGraph(
                "union of graphs with different node lists".into(),
            ));
        }
        let merge = |a: &[Edge], b: &[Edge]| {
            let mut all: Vec<Edge> = a.iter().chain(b).copied().collect();
            all.sort_by(|x, y| (x.p, x.q).cmp(&(y.p, y.q)));
            all.dedup_by(|x, y| x.p == y.p && x.q == y.q);
            all
        };
        Ok(SpatioTemporalGraph {
            nodes: self.nodes.clone(),
            spatial: merge(&self.spatial, &other.spatial),
            temporal: merge(&self.temporal, &other.temporal),
        })
    }

    /// Graph with node `i` moved to position `perm[i]`; edge sets follow.
    /// The result deliberately ignores the canonical `(t, track_id)` order.
    pub fn permuted(&self, perm: &[usize]) -> SpatioTemporalGraph {
        let mut nodes = self.nodes.clone();
        for (i, o) in self.nodes.iter().enumerate() {
            nodes[perm[i]] = o.clone();
        }
        let relabel = |edges: &[Edge]| {
            edges
                .iter()
                .map(|e| {
                    let (a, b) = (perm[e.p], perm[e.q]);
                    Edge {
                        p: a.min(b),
                        q: a.max(b),
                        weight: e.weight,
                    }
                })
                .collect()
        };
        SpatioTemporalGraph {
            nodes,
            spatial: relabel(&self.spatial),
            temporal: relabel(&self.temporal),
        }
    }

    /// Assembles a graph from explicit parts, checking edge invariants.
    pub fn from_parts(
        nodes: Vec<ObjectObservation>,
        spatial: Vec<Edge>,
        temporal: Vec<Edge>,
    ) -> Result<SpatioTemporalGraph> {
        let n = nodes.len();
        for e in spatial.iter().chain(&temporal) {
            if e.p >= n || e.q >= n || e.p == e.q {
                return Err(CoreError::InvalidGraph(format!(
                    "edge ({}, {}) invalid for {n} nodes",
                    e.p, e.q
                )));
            }
            if !(e.weight.is_finite() && e.weight > 0.0) {
                return Err(CoreError::InvalidGraph(format!(
                    "edge ({}, {}) has weight {}",
                    e.p, e.q, e.weight
                )));
            }
        }
        let order = |mut edges: Vec<Edge>| {
            for e in &mut edges {
                if e.p > e.q {
                    std::mem::swap(&mut e.p, &mut e.q);
                }
            }
            edges
        };
        Ok(SpatioTemporalGraph {
            nodes,
            spatial: order(spatial),
            temporal: order(temporal),
        })
    }
}
