//! Synthetic two-agent street scenes with ground-truth correspondences.
//!
//! Objects start uniformly inside a square arena and move at constant speed
//! with small heading jitter. Each agent detects the objects within its field
//! of view, drops detections at random, adds Gaussian position noise, and
//! reports positions relative to its own location.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::stgraph::{build_graph, group_by_timestep, GraphConfig, ObjectObservation, SpatioTemporalGraph};

pub const DATASET_VERSION: u32 = 1;
const MAX_ATTEMPTS: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Normal,
    Crowded,
}

impl std::str::FromStr for Preset {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Preset::Normal),
            "crowded" => Ok(Preset::Crowded),
            other => Err(CoreError::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_objects: usize,
    /// half-width of the square arena, meters
    pub arena: f64,
    /// sequence length T in timesteps
    pub seq_len: usize,
    /// sensing radius of each agent, meters
    pub fov_radius: [f64; 2],
    pub agent_positions: [[f64; 3]; 2],
    pub noise_sigma: f64,
    pub p_miss: f64,
    /// meters per timestep
    pub speed_range: [f64; 2],
    /// standard deviation of the per-step heading change, radians
    pub heading_jitter: f64,
    /// object center heights, meters
    pub height_range: [f64; 2],
    pub id_switch_prob: f64,
    /// regenerate scenes in which an agent sees nothing the other misses
    pub require_outliers: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::preset(Preset::Normal)
    }
}

impl SceneConfig {
    pub fn preset(preset: Preset) -> Self {
        let n_objects = match preset {
            Preset::Normal => 10,
            Preset::Crowded => 24,
        };
        Self {
            n_objects,
            arena: 20.0,
            seq_len: 5,
            fov_radius: [25.0, 25.0],
            agent_positions: [[-2.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            noise_sigma: 0.3,
            p_miss: 0.1,
            speed_range: [3.0, 10.0],
            heading_jitter: 0.1,
            height_range: [0.5, 2.0],
            id_switch_prob: 0.0,
            require_outliers: true,
            seed: 0,
        }
    }

    pub fn fov_radius_of(&self, agent: usize) -> f64 {
        self.fov_radius[agent]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidConfig(m.to_string()));
        if self.seq_len < 1 {
            return bad("seq_len must be at least 1");
        }
        if !self.fov_radius.iter().all(|&r| r > 0.0) {
            return bad("fov_radius must be positive");
        }
        if !(0.0..1.0).contains(&self.p_miss) {
            return bad("p_miss must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.id_switch_prob) {
            return bad("id_switch_prob must lie in [0, 1]");
        }
        if self.n_objects == 0 || !(self.arena > 0.0) {
            return bad("scene needs objects and a positive arena");
        }
        if !(self.noise_sigma >= 0.0 && self.heading_jitter >= 0.0) {
            return bad("noise_sigma and heading_jitter must be non-negative");
        }
        if self.speed_range[0] > self.speed_range[1] || self.speed_range[0] < 0.0 {
            return bad("speed_range must be an ordered non-negative interval");
        }
        if self.height_range[0] > self.height_range[1] {
            return bad("height_range must be ordered");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentView {
    pub agent_id: usize,
    pub pose: [f64; 3],
    /// sorted by `(t, track_id)`; index = graph node index
    pub observations: Vec<ObjectObservation>,
}

impl AgentView {
    pub fn seq_len(&self) -> usize {
        self.observations.iter().map(|o| o.t + 1).max().unwrap_or(1)
    }

    pub fn graph(&self, cfg: &GraphConfig) -> Result<SpatioTemporalGraph> {
        build_graph(&group_by_timestep(&self.observations, self.seq_len()), cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenePair {
    pub scene_id: u64,
    /// `[ego, collaborator]`
    pub agents: Vec<AgentView>,
    /// `(ego node, collaborator node)` observing the same object at the same t
    pub gt_pairs: Vec<(usize, usize)>,
}

impl ScenePair {
    pub fn ego(&self) -> &AgentView {
        &self.agents[0]
    }

    pub fn collaborator(&self) -> &AgentView {
        &self.agents[1]
    }

    pub fn graphs(&self, cfg: &GraphConfig) -> Result<(SpatioTemporalGraph, SpatioTemporalGraph)> {
        Ok((self.ego().graph(cfg)?, self.collaborator().graph(cfg)?))
    }

    /// Same scene with the agent roles exchanged.
    pub fn swapped(&self) -> ScenePair {
        let mut gt: Vec<(usize, usize)> = self.gt_pairs.iter().map(|&(a, b)| (b, a)).collect();
        gt.sort_unstable();
        ScenePair {
            scene_id: self.scene_id,
            agents: vec![self.agents[1].clone(), self.agents[0].clone()],
            gt_pairs: gt,
        }
    }

    /// Checks node ordering and that every ground-truth pair joins two
    /// existing nodes of the same object at the same timestep.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.agents.len() != 2 {
            return Err(format!("expected 2 agents, found {}", self.agents.len()));
        }
        for (a, view) in self.agents.iter().enumerate() {
            for (i, w) in view.observations.windows(2).enumerate() {
                if (w[0].t, w[0].track_id) >= (w[1].t, w[1].track_id) {
                    return Err(format!(
                        "agents[{a}].observations[{}]: not strictly ordered by (t, track_id)",
                        i + 1
                    ));
                }
            }
            if let Some(i) = view
                .observations
                .iter()
                .position(|o| o.pos.iter().any(|x| !x.is_finite()))
            {
                return Err(format!("agents[{a}].observations[{i}].pos: non-finite"));
            }
        }
        let (ego, col) = (&self.agents[0].observations, &self.agents[1].observations);
        for (k, &(i, j)) in self.gt_pairs.iter().enumerate() {
            let (Some(a), Some(b)) = (ego.get(i), col.get(j)) else {
                return Err(format!(
                    "gt_pairs[{k}]: ({i}, {j}) references a missing node ({} ego, {} collaborator nodes)",
                    ego.len(),
                    col.len()
                ));
            };
            if a.gt_id != b.gt_id || a.t != b.t {
                return Err(format!(
                    "gt_pairs[{k}]: nodes observe different objects or timesteps"
                ));
            }
        }
        Ok(())
    }
}

/// A generated scene together with the noise-free object trajectories.
#[derive(Clone, Debug)]
pub struct GeneratedScene {
    pub pair: ScenePair,
    /// `trajectories[object][t]`, world frame
    pub trajectories: Vec<Vec<[f64; 3]>>,
}

fn horizontal_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn simulate(cfg: &SceneConfig, scene_id: u64, rng: &mut ChaCha8Rng) -> GeneratedScene {
    let jitter = Normal::new(0.0, cfg.heading_jitter.max(0.0)).expect("jitter");
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("noise");
    let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };

    let mut trajectories = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        let mut pos = [
            draw(rng, -cfg.arena, cfg.arena),
            draw(rng, -cfg.arena, cfg.arena),
            draw(rng, cfg.height_range[0], cfg.height_range[1]),
        ];
        let mut heading = draw(rng, 0.0, std::f64::consts::TAU);
        let speed = draw(rng, cfg.speed_range[0], cfg.speed_range[1]);
        let mut track = Vec::with_capacity(cfg.seq_len);
        for _ in 0..cfg.seq_len {
            track.push(pos);
            heading += jitter.sample(rng);
            pos[0] += speed * heading.cos();
            pos[1] += speed * heading.sin();
        }
        trajectories.push(track);
    }

    let mut agents = Vec::with_capacity(2);
    for (agent_id, origin) in cfg.agent_positions.iter().enumerate() {
        let mut track_of: BTreeMap<u32, u32> = BTreeMap::new();
        let mut next_track = 0u32;
        let mut observations = Vec::new();
        for t in 0..cfg.seq_len {
            for (gt_id, traj) in trajectories.iter().enumerate() {
                let truth = traj[t];
                if horizontal_distance(&truth, origin) > cfg.fov_radius[agent_id] {
                    continue;
                }
                if rng.random::<f64>() < cfg.p_miss {
                    continue;
                }
                let mut local = [0.0; 3];
                for k in 0..3 {
                    local[k] = truth[k] + noise.sample(rng) - origin[k];
                }
                let gt_id = gt_id as u32;
                let switched = cfg.id_switch_prob > 0.0
                    && track_of.contains_key(&gt_id)
                    && rng.random::<f64>() < cfg.id_switch_prob;
                if switched || !track_of.contains_key(&gt_id) {
                    track_of.insert(gt_id, next_track);
                    next_track += 1;
                }
                observations.push(ObjectObservation {
                    t,
                    track_id: track_of[&gt_id],
                    gt_id,
                    pos: local,
                });
            }
        }
        observations.sort_by_key(|o| (o.t, o.track_id));
        agents.push(AgentView {
            agent_id,
            pose: *origin,
            observations,
        });
    }

    let gt_pairs = ground_truth_pairs(&agents[0].observations, &agents[1].observations);
    GeneratedScene {
        pair: ScenePair {
            scene_id,
            agents,
            gt_pairs,
        },
        trajectories,
    }
}

/// All `(ego, collaborator)` node pairs observing the same object at the same t.
pub fn ground_truth_pairs(
    ego: &[ObjectObservation],
    collab: &[ObjectObservation],
) -> Vec<(usize, usize)> {
    let index: BTreeMap<(usize, u32), usize> = collab
        .iter()
        .enumerate()
        .map(|(j, o)| ((o.t, o.gt_id), j))
        .collect();
    ego.iter()
        .enumerate()
        .filter_map(|(i, o)| index.get(&(o.t, o.gt_id)).map(|&j| (i, j)))
        .collect()
}

fn usable(scene: &ScenePair, cfg: &SceneConfig, graph: &GraphConfig) -> bool {
    !scene.gt_pairs.is_empty()
        && scene.agents.iter().all(|a| {
            (!cfg.require_outliers || a.observations.len() > scene.gt_pairs.len())
                && a.graph(graph)
                    .is_ok_and(|g| !(g.spatial_edges().is_empty() && g.temporal_edges().is_empty()))
        })
}

/// Generates one scene, retrying with a new sub-seed while it has no
/// covisible objects, an agent lacks outliers while `require_outliers` is set,
/// or an agent's graph (built with `graph`) has no edges.
pub fn generate_scene_detailed(
    cfg: &SceneConfig,
    graph: &GraphConfig,
    scene_id: u64,
) -> Result<GeneratedScene> {
    cfg.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(attempt);
        let scene = simulate(cfg, scene_id, &mut rng);
        if usable(&scene.pair, cfg, graph) {
            return Ok(scene);
        }
    }
    Err(CoreError::Generation(format!(
        "no usable scene after {MAX_ATTEMPTS} attempts (seed {})",
        cfg.seed
    )))
}

pub fn generate_scene(cfg: &SceneConfig, graph: &GraphConfig, scene_id: u64) -> Result<ScenePair> {
    generate_scene_detailed(cfg, graph, scene_id).map(|g| g.pair)
}

/// splitmix64 finalizer, used to derive per-scene seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` scenes with ids `first_id..`, each seeded from `cfg.seed` and its id.
pub fn generate_dataset(
    cfg: &SceneConfig,
    graph: &GraphConfig,
    first_id: u64,
    count: usize,
) -> Result<Vec<ScenePair>> {
    (0..count as u64)
        .map(|k| {
            let id = first_id + k;
            let scene_cfg = SceneConfig {
                seed: mix_seed(cfg.seed, id),
                ..cfg.clone()
            };
            generate_scene(&scene_cfg, graph, id)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    version: u32,
    config: SceneConfig,
    scenes: Vec<ScenePair>,
}

pub fn dataset_to_json(cfg: &SceneConfig, scenes: &[ScenePair]) -> Result<String> {
    Ok(serde_json::to_string(&DatasetFile {
        version: DATASET_VERSION,
        config: cfg.clone(),
        scenes: scenes.to_vec(),
    })?)
}

pub fn dataset_from_json(text: &str) -> Result<(SceneConfig, Vec<ScenePair>)> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| {
        CoreError::Dataset(format!("line {}, column {}: {e}", e.line(), e.column()))
    })?;
    if file.version != DATASET_VERSION {
        return Err(CoreError::Dataset(format!(
            "version: unsupported dataset version {}",
            file.version
        )));
    }
    for (s, scene) in file.scenes.iter().enumerate() {
        scene
            .validate()
            .map_err(|msg| CoreError::Dataset(format!("scenes[{s}] (id {}): {msg}", scene.scene_id)))?;
    }
    Ok((file.config, file.scenes))
}

pub fn save_dataset(path: &Path, cfg: &SceneConfig, scenes: &[ScenePair]) -> Result<()> {
    std::fs::write(path, dataset_to_json(cfg, scenes)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(SceneConfig, Vec<ScenePair>)> {
    dataset_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig {
            seed: 42,
            ..SceneConfig::default()
        };
        let a = serde_json::to_string(&generate_scene(&cfg, &GraphConfig::default(), 0).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_scene(&cfg, &GraphConfig::default(), 0).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn colocated_noise_free_agents_see_the_same_thing() {
        let cfg = SceneConfig {
            noise_sigma: 0.0,
            p_miss: 0.0,
            agent_positions: [[3.0, -2.0, 0.0]; 2],
            fov_radius: [20.0, 20.0],
            require_outliers: false,
            seed: 5,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg, &GraphConfig::default(), 0).unwrap();
        assert_eq!(s.agents[0].observations, s.agents[1].observations);
        assert_eq!(s.gt_pairs.len(), s.agents[0].observations.len());
        assert!(s.gt_pairs.iter().all(|&(i, j)| i == j));
    }

    #[test]
    fn frames_differ_by_relative_pose() {
        let cfg = SceneConfig {
            noise_sigma: 0.0,
            seed: 11,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg, &GraphConfig::default(), 0).unwrap();
        for &(i, j) in &s.gt_pairs {
            let (a, b) = (&s.ego().observations[i], &s.collaborator().observations[j]);
            for k in 0..3 {
                let world_a = a.pos[k] + cfg.agent_positions[0][k];
                let world_b = b.pos[k] + cfg.agent_positions[1][k];
                assert!((world_a - world_b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn crowded_preset_shows_over_twenty_objects() {
        let cfg = SceneConfig {
            seed: 7,
            ..SceneConfig::preset(Preset::Crowded)
        };
        for k in 0..10 {
            let s = generate_scene(&SceneConfig { seed: mix_seed(cfg.seed, k), ..cfg.clone() }, &GraphConfig::default(), k).unwrap();
            let seen: std::collections::BTreeSet<u32> = s
                .agents
                .iter()
                .flat_map(|a| a.observations.iter().map(|o| o.gt_id))
                .collect();
            assert!(seen.len() >= 20, "scene {k}: {} objects", seen.len());
        }
    }

    #[test]
    fn p_miss_zero_pairs_every_covisible_instance() {
        let cfg = SceneConfig {
            p_miss: 0.0,
            seed: 19,
            ..SceneConfig::default()
        };
        let g = generate_scene_detailed(&cfg, &GraphConfig::default(), 0).unwrap();
        let mut expected = 0;
        for traj in &g.trajectories {
            for p in traj {
                if cfg
                    .agent_positions
                    .iter()
                    .zip(cfg.fov_radius)
                    .all(|(a, r)| horizontal_distance(p, a) <= r)
                {
                    expected += 1;
                }
            }
        }
        assert_eq!(g.pair.gt_pairs.len(), expected);
    }

    #[test]
    fn default_scenes_contain_outliers_and_one_to_one_pairs() {
        let scenes = generate_dataset(&SceneConfig::default(), &GraphConfig::default(), 0, 20).unwrap();
        for s in &scenes {
            assert!(s.ego().observations.len() > s.gt_pairs.len());
            assert!(s.collaborator().observations.len() > s.gt_pairs.len());
            let mut ego: Vec<usize> = s.gt_pairs.iter().map(|p| p.0).collect();
            let mut col: Vec<usize> = s.gt_pairs.iter().map(|p| p.1).collect();
            ego.dedup();
            col.sort_unstable();
            col.dedup();
            assert_eq!(ego.len(), s.gt_pairs.len());
            assert_eq!(col.len(), s.gt_pairs.len());
            // symmetric under role swap
            let back = s.swapped().swapped();
            assert_eq!(&back, s);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SceneConfig {
            p_miss: 1.0,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, &GraphConfig::default(), 0), Err(CoreError::InvalidConfig(_))));
        let cfg = SceneConfig {
            seq_len: 0,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&cfg, &GraphConfig::default(), 0).is_err());
    }

    #[test]
    fn impossible_covisibility_rejected() {
        let cfg = SceneConfig {
            agent_positions: [[-500.0, 0.0, 0.0], [500.0, 0.0, 0.0]],
            fov_radius: [10.0, 10.0],
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, &GraphConfig::default(), 0), Err(CoreError::Generation(_))));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let text = dataset_to_json(&SceneConfig::default(), &[]).unwrap();
        let (_, scenes) = dataset_from_json(&text).unwrap();
        assert!(scenes.is_empty());
    }

    #[test]
    fn dangling_gt_pair_rejected() {
        let mut s = generate_scene(&SceneConfig::default(), &GraphConfig::default(), 0).unwrap();
        let n = s.ego().observations.len();
        s.gt_pairs.push((n + 3, 0));
        let text = dataset_to_json(&SceneConfig::default(), &[s]).unwrap();
        let err = dataset_from_json(&text).unwrap_err().to_string();
        assert!(err.contains("gt_pairs"), "{err}");
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = dataset_from_json("{\"version\": 1,\n \"scenes\": [}").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
