//! Browser bindings: generate a scene, train a small model in the page, and
//! replay the bandwidth-limited exchange between the two agents.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use stcoid::config::ExperimentConfig;
use stcoid::exchange::{
    compute_metrics, match_transcript, run_exchange, BandwidthSchedule, Correspondence, MetricsReport,
};
use stcoid::experiment::{train_model, training_scenes};
use stcoid::scenegen::{generate_dataset, mix_seed, Preset, ScenePair};
use stcoid::CoidModel;

#[derive(Serialize)]
struct NodeView {
    t: usize,
    track_id: u32,
    /// world frame
    pos: [f64; 3],
}

#[derive(Serialize)]
struct AgentSummary {
    pose: [f64; 3],
    fov_radius: f64,
    nodes: Vec<NodeView>,
}

#[derive(Serialize)]
struct SceneView {
    scene_id: u64,
    seq_len: usize,
    agents: Vec<AgentSummary>,
    gt_pairs: Vec<(usize, usize)>,
}

#[derive(Serialize)]
struct RoundView {
    round: usize,
    sender: usize,
    nodes: Vec<usize>,
}

#[derive(Serialize)]
struct ExchangeView {
    messages: Vec<RoundView>,
    matches: Vec<Correspondence>,
    metrics: MetricsReport,
}

#[wasm_bindgen]
pub struct Demo {
    cfg: ExperimentConfig,
    model: CoidModel,
    scene: ScenePair,
    epochs_trained: usize,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn make_scene(cfg: &ExperimentConfig, id: u64) -> Result<ScenePair, String> {
    let mut scenes = generate_dataset(&cfg.scene, &cfg.model.graph, id, 1).map_err(err)?;
    Ok(scenes.remove(0))
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, crowded: bool) -> Result<Demo, String> {
        let mut cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        cfg.apply_preset(if crowded { Preset::Crowded } else { Preset::Normal });
        let cfg = cfg.resolved();
        let model = CoidModel::new(cfg.model.clone()).map_err(err)?;
        let scene = make_scene(&cfg, 0)?;
        Ok(Demo {
            cfg,
            model,
            scene,
            epochs_trained: 0,
        })
    }

    /// Replaces the displayed scene; returns it as JSON.
    pub fn new_scene(&mut self, scene_id: u64) -> Result<String, String> {
        self.scene = make_scene(&self.cfg, scene_id)?;
        self.scene_json()
    }

    pub fn scene_json(&self) -> Result<String, String> {
        let agents = self
            .scene
            .agents
            .iter()
            .map(|a| AgentSummary {
                pose: a.pose,
                fov_radius: self.cfg.scene.fov_radius_of(a.agent_id),
                nodes: a
                    .observations
                    .iter()
                    .map(|o| NodeView {
                        t: o.t,
                        track_id: o.track_id,
                        pos: [o.pos[0] + a.pose[0], o.pos[1] + a.pose[1], o.pos[2] + a.pose[2]],
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_string(&SceneView {
            scene_id: self.scene.scene_id,
            seq_len: self.cfg.scene.seq_len,
            agents,
            gt_pairs: self.scene.gt_pairs.clone(),
        })
        .map_err(err)
    }

    pub fn epochs_trained(&self) -> usize {
        self.epochs_trained
    }

    /// Trains a fresh model on `scenes` generated scenes; returns the loss
    /// curve as JSON.
    pub fn train(&mut self, scenes: usize, epochs: usize) -> Result<String, String> {
        let mut cfg = self.cfg.clone();
        cfg.train_scenes = scenes.max(2);
        cfg.loss.epochs = epochs;
        let train = training_scenes(&cfg).map_err(err)?;
        let (model, report) = train_model(&cfg, &train, |_| {}).map_err(err)?;
        self.model = model;
        self.epochs_trained = epochs;
        serde_json::to_string(&report.curve).map_err(err)
    }

    /// Runs the exchange on the current scene. `baseline` is one of
    /// `full`, `ne`, `random`.
    pub fn exchange(
        &self,
        k: usize,
        rounds: usize,
        lambda: f64,
        tau: f64,
        baseline: &str,
    ) -> Result<String, String> {
        let mut x = self.cfg.exchange.clone();
        x.lambda = lambda;
        x.tau = tau;
        x.baseline = baseline.parse().map_err(err)?;
        let schedule = BandwidthSchedule::constant(k, rounds).map_err(err)?;
        let (g0, g1) = self.scene.graphs(&self.model.config.graph).map_err(err)?;
        let ego = self.model.encode(&g0).map_err(err)?;
        let collab = self.model.encode(&g1).map_err(err)?;
        let transcript =
            run_exchange(&ego, &collab, &schedule, &x, mix_seed(self.cfg.seed, self.scene.scene_id)).map_err(err)?;
        let matches = match_transcript(&ego, &transcript, &x);
        let metrics = compute_metrics(
            &matches,
            &transcript,
            &schedule,
            &self.scene.gt_pairs,
            self.scene.collaborator().observations.len(),
        );
        let messages = transcript
            .messages
            .iter()
            .map(|m| RoundView {
                round: m.round,
                sender: m.sender,
                nodes: m.nodes.clone(),
            })
            .collect();
        serde_json::to_string(&ExchangeView {
            messages,
            matches,
            metrics,
        })
        .map_err(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_json() {
        let mut demo = Demo::new(3, false).unwrap();
        let scene: serde_json::Value = serde_json::from_str(&demo.new_scene(5).unwrap()).unwrap();
        assert_eq!(scene["agents"].as_array().unwrap().len(), 2);
        let curve: serde_json::Value = serde_json::from_str(&demo.train(4, 1).unwrap()).unwrap();
        assert_eq!(curve.as_array().unwrap().len(), 2);
        let out: serde_json::Value = serde_json::from_str(&demo.exchange(3, 2, 0.5, 0.5, "full").unwrap()).unwrap();
        assert!(out["metrics"]["recall"].as_f64().unwrap() <= 1.0);
        assert!(demo.exchange(3, 2, 0.5, 0.5, "bogus").is_err());
        assert!(demo.exchange(0, 2, 0.5, 0.5, "full").is_err());
    }
}
