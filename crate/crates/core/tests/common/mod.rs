#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stcoid::model::ModelConfig;
use stcoid::stgraph::{build_graph, GraphConfig, ObjectObservation, SpatioTemporalGraph};
use stcoid::CoidModel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tracks over `t_len` steps, each detection kept with probability 0.8.
pub fn random_observations(rng: &mut impl Rng, tracks: usize, t_len: usize) -> Vec<ObjectObservation> {
    let mut obs = Vec::new();
    for track in 0..tracks {
        let mut pos = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(0.0..2.0)];
        let vel = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        for t in 0..t_len {
            if rng.random::<f64>() < 0.8 {
                obs.push(ObjectObservation {
                    t,
                    track_id: track as u32,
                    gt_id: track as u32,
                    pos,
                });
            }
            pos[0] += vel[0];
            pos[1] += vel[1];
        }
    }
    obs.sort_by_key(|o| (o.t, o.track_id));
    obs
}

pub fn graph_of(obs: &[ObjectObservation], t_len: usize, radius: f64) -> stcoid::Result<SpatioTemporalGraph> {
    build_graph(
        &stcoid::stgraph::group_by_timestep(obs, t_len),
        &GraphConfig {
            spatial_radius: radius,
            ..GraphConfig::default()
        },
    )
}

/// A random graph with at least one edge.
pub fn random_graph(rng: &mut impl Rng, max_tracks: usize, max_t: usize) -> SpatioTemporalGraph {
    loop {
        let tracks = rng.random_range(1..=max_tracks);
        let t_len = rng.random_range(1..=max_t);
        let radius = rng.random_range(4.0..30.0);
        let obs = random_observations(rng, tracks, t_len);
        if obs.is_empty() {
            continue;
        }
        let g = graph_of(&obs, t_len, radius).unwrap();
        if !(g.spatial_edges().is_empty() && g.temporal_edges().is_empty()) {
            return g;
        }
    }
}

pub fn random_permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

pub fn small_model(seed: u64) -> CoidModel {
    CoidModel::new(ModelConfig {
        layers: 2,
        heads: 2,
        dim: 6,
        beta_dim: 5,
        init_seed: seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

/// Two agents observing three objects over two steps from offset frames;
/// object 2 is only seen by the ego, so each graph has at most six nodes.
pub fn tiny_pair() -> ((SpatioTemporalGraph, SpatioTemporalGraph), Vec<(usize, usize)>) {
    let o = |t, track_id, gt_id, pos| ObjectObservation {
        t,
        track_id,
        gt_id,
        pos,
    };
    let ego = vec![
        o(0, 0, 0, [1.0, 2.0, 0.5]),
        o(0, 1, 1, [4.0, -1.0, 1.2]),
        o(0, 2, 2, [-3.0, 0.5, 0.8]),
        o(1, 0, 0, [1.8, 2.9, 0.5]),
        o(1, 1, 1, [3.1, -1.6, 1.2]),
        o(1, 2, 2, [-2.2, 1.1, 0.8]),
    ];
    let collab = vec![
        o(0, 0, 1, [1.1, -0.9, 1.1]),
        o(0, 1, 0, [-1.9, 2.2, 0.4]),
        o(1, 0, 1, [0.2, -1.5, 1.3]),
        o(1, 1, 0, [-1.3, 3.0, 0.6]),
    ];
    let g0 = graph_of(&ego, 2, 50.0).unwrap();
    let g1 = graph_of(&collab, 2, 50.0).unwrap();
    // node order is (t, track_id)
    let gt = vec![(0, 1), (1, 0), (3, 3), (4, 2)];
    ((g0, g1), gt)
}
