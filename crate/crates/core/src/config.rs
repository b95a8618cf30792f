//! One configuration document for every experiment command.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::exchange::{BandwidthSchedule, ExchangeConfig};
use crate::model::ModelConfig;
use crate::scenegen::{Preset, SceneConfig};
use crate::trainer::LossConfig;

/// Per-round bandwidth: an explicit list, or a fraction of the
/// collaborator's node count (rounded up) repeated every round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthSpec {
    PerRound(Vec<usize>),
    QueryFraction { query_fraction: f64 },
}

impl Default for BandwidthSpec {
    fn default() -> Self {
        BandwidthSpec::QueryFraction {
            query_fraction: 0.25,
        }
    }
}

impl BandwidthSpec {
    /// Parses `"K1,K2,..."`.
    pub fn parse_list(text: &str) -> Result<Self> {
        let ks = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CoreError::InvalidConfig(format!("bad bandwidth entry {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        BandwidthSchedule::new(ks.clone())?;
        Ok(BandwidthSpec::PerRound(ks))
    }

    pub fn schedule(&self, n_query: usize, rounds: usize) -> Result<BandwidthSchedule> {
        match self {
            BandwidthSpec::PerRound(ks) if ks.len() == 1 => BandwidthSchedule::constant(ks[0], rounds),
            BandwidthSpec::PerRound(ks) if ks.len() == rounds => BandwidthSchedule::new(ks.clone()),
            BandwidthSpec::PerRound(ks) => Err(CoreError::InvalidConfig(format!(
                "{} bandwidth entries for {rounds} rounds",
                ks.len()
            ))),
            BandwidthSpec::QueryFraction { query_fraction } => {
                if !(*query_fraction > 0.0) {
                    return Err(CoreError::InvalidConfig("query_fraction must be positive".into()));
                }
                let k = (query_fraction * n_query as f64).ceil().max(1.0) as usize;
                BandwidthSchedule::constant(k, rounds)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub data: Option<String>,
    pub model: Option<String>,
    pub out: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// drives scene generation, initialization, training order and the
    /// random baselines
    pub seed: u64,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub exchange: ExchangeConfig,
    pub bandwidth: BandwidthSpec,
    pub rounds: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub sweep_bandwidths: Vec<usize>,
    pub sweep_rounds: Vec<usize>,
    pub seqlen_values: Vec<usize>,
    pub paths: OutputPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            exchange: ExchangeConfig::default(),
            bandwidth: BandwidthSpec::default(),
            rounds: 2,
            train_scenes: 200,
            eval_scenes: 50,
            sweep_bandwidths: vec![2, 4, 8, 16],
            sweep_rounds: vec![1, 2, 3],
            seqlen_values: (1..=10).collect(),
            paths: OutputPaths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            CoreError::InvalidConfig(format!("line {}, column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        self.scene.n_objects = SceneConfig::preset(preset).n_objects;
    }

    /// Copy with the master seed pushed into every sub-configuration.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.scene.seed = self.seed;
        c.model.init_seed = self.seed;
        c.loss.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.exchange.validate()?;
        if self.rounds == 0 {
            return Err(CoreError::InvalidConfig("rounds must be at least 1".into()));
        }
        self.bandwidth.schedule(1, self.rounds)?;
        if self.sweep_bandwidths.contains(&0) || self.sweep_rounds.contains(&0) {
            return Err(CoreError::InvalidConfig("sweep values must be positive".into()));
        }
        if self.seqlen_values.contains(&0) {
            return Err(CoreError::InvalidConfig("sequence lengths must be positive".into()));
        }
        Ok(())
    }

    /// Short digest of everything that influences results (paths excluded).
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.paths = OutputPaths::default();
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"lamda": 0.3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"exchange": {"lamda": 0.3}}"#).is_err());
    }

    #[test]
    fn bandwidth_forms() {
        let c = ExperimentConfig::from_json(r#"{"bandwidth": [3, 5], "rounds": 2}"#).unwrap();
        assert_eq!(c.bandwidth.schedule(40, 2).unwrap().per_round(), &[3, 5]);
        assert!(c.bandwidth.schedule(40, 3).is_err());
        let q = BandwidthSpec::default().schedule(18, 2).unwrap();
        assert_eq!(q.per_round(), &[5, 5]);
        assert_eq!(BandwidthSpec::parse_list("4").unwrap().schedule(9, 3).unwrap().per_round(), &[4, 4, 4]);
        assert!(BandwidthSpec::parse_list("4,x").is_err());
        assert!(BandwidthSpec::parse_list("0").is_err());
    }

    #[test]
    fn hash_tracks_content_not_paths() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.paths.out = Some("elsewhere.csv".into());
        assert_eq!(a.hash(), b.hash());
        b.exchange.lambda = 0.25;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
