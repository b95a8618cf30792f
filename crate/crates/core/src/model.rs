use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::hetgat::{self, EmbedVars, HetGatLayout, NodeEmbeddings};
use crate::hetpool::{self, GraphEmbedding, GraphEmbeddingVars, PoolLayout};
use crate::numcore::{Tape, Tensor, Var};
use crate::params::ParamStore;
use crate::stgraph::{EdgeKind, GraphConfig, SpatioTemporalGraph};

const MODEL_FORMAT: &str = "stcoid-model";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub beta_dim: usize,
    pub pool_ratio: f64,
    pub normalize_nodes: bool,
    pub normalize_graph: bool,
    pub init_seed: u64,
    pub graph: GraphConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 32,
            beta_dim: 32,
            pool_ratio: 0.5,
            normalize_nodes: true,
            normalize_graph: true,
            init_seed: 0,
            graph: GraphConfig {
                spatial_radius: 8.0,
                ..GraphConfig::default()
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.beta_dim == 0 {
            return bad("layers, heads, dim and beta_dim must be positive");
        }
        if !(self.pool_ratio > 0.0 && self.pool_ratio <= 1.0) {
            return bad("pool_ratio must lie in (0, 1]");
        }
        if !(self.graph.spatial_radius > 0.0) {
            return bad("spatial_radius must be positive");
        }
        Ok(())
    }
}

/// Attention network plus pooling: every learnable tensor of the method.
#[derive(Clone, Debug)]
pub struct CoidModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    gat: HetGatLayout,
    pool: PoolLayout,
}

/// Node and graph embeddings of one agent's graph, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentEncoding {
    pub nodes: NodeEmbeddings,
    pub graph: GraphEmbedding,
}

#[derive(Clone, Debug)]
pub struct EncodingVars<'t> {
    pub nodes: EmbedVars<'t>,
    pub graph: GraphEmbeddingVars<'t>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    layers: usize,
    heads: usize,
    dim: usize,
    beta_dim: usize,
    config_hash: String,
    config: ModelConfig,
    params: BTreeMap<String, ParamEntry>,
}

impl CoidModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let gat = HetGatLayout::register(&mut params, &config, &mut rng);
        let pool = PoolLayout::register(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            params,
            gat,
            pool,
        })
    }

    pub fn gat_layout(&self) -> &HetGatLayout {
        &self.gat
    }

    pub fn pool_layout(&self) -> &PoolLayout {
        &self.pool
    }

    /// Records the full encoder on `tape` using the bound parameters `p`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        graph: &SpatioTemporalGraph,
    ) -> Result<EncodingVars<'t>> {
        let spat = graph.directed(EdgeKind::Spatial);
        let temp = graph.directed(EdgeKind::Temporal);
        let nodes = hetgat::embed_with_edges(
            tape,
            p,
            &self.gat,
            graph.attributes(),
            &spat,
            &temp,
            self.config.normalize_nodes,
        )?;
        let pooled = hetpool::graph_embedding_with_edges(
            p,
            &self.pool,
            nodes.m,
            &spat,
            &temp,
            nodes.beta,
            self.config.pool_ratio,
            self.config.normalize_graph,
        )?;
        Ok(EncodingVars {
            nodes,
            graph: pooled,
        })
    }

    /// Inference-only encoding of one graph.
    pub fn encode(&self, graph: &SpatioTemporalGraph) -> Result<AgentEncoding> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let vars = self.forward(&tape, &p, graph)?;
        Ok(AgentEncoding {
            nodes: vars.nodes.detach(),
            graph: vars.graph.detach(),
        })
    }

    pub fn to_json(&self, config_hash: &str) -> Result<String> {
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    ParamEntry {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            layers: self.config.layers,
            heads: self.config.heads,
            dim: self.config.dim,
            beta_dim: self.config.beta_dim,
            config_hash: config_hash.into(),
            config: self.config.clone(),
            params,
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parses a model document; returns the model and its recorded config hash.
    pub fn from_json(text: &str) -> Result<(Self, String)> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(CoreError::Model(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        let c = &file.config;
        if (c.layers, c.heads, c.dim, c.beta_dim)
            != (file.layers, file.heads, file.dim, file.beta_dim)
        {
            return Err(CoreError::Model("header dimensions disagree with config".into()));
        }
        let mut model = Self::new(file.config)?;
        if file.params.len() != model.params.len() {
            return Err(CoreError::Model(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                file.params.len()
            )));
        }
        let names = model.params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let entry = file
                .params
                .get(name)
                .ok_or_else(|| CoreError::Model(format!("missing parameter {name}")))?;
            let expected = model.params.values()[i].shape().to_vec();
            if entry.shape != expected {
                return Err(CoreError::Model(format!(
                    "parameter {name}: shape {:?}, expected {expected:?}",
                    entry.shape
                )));
            }
            let t = Tensor::new(entry.shape.clone(), entry.values.clone())
                .map_err(|e| CoreError::Model(format!("parameter {name}: {e}")))?;
            if !t.all_finite() {
                return Err(CoreError::Model(format!("parameter {name} has non-finite values")));
            }
            model.params.values_mut()[i] = t;
        }
        Ok((model, file.config_hash))
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        std::fs::write(path, self.to_json(config_hash)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_names_follow_layout() {
        let model = CoidModel::new(ModelConfig::default()).unwrap();
        for name in [
            "input.W_v",
            "layer0.head2.spat.W",
            "layer1.head3.temp.W_e",
            "layer0.head0.spat.a",
            "beta.W_b",
            "beta.q",
            "pool.spat.W_p",
            "pool.temp.w_f",
        ] {
            assert!(model.params.find(name).is_some(), "{name}");
        }
        let w1 = model.params.find("layer1.head0.spat.W").unwrap();
        assert_eq!(model.params.get(w1).shape(), &[32, 128]);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let cfg = ModelConfig {
            dim: 5,
            beta_dim: 4,
            heads: 2,
            init_seed: 9,
            ..ModelConfig::default()
        };
        let model = CoidModel::new(cfg).unwrap();
        let text = model.to_json("abc123").unwrap();
        let (back, hash) = CoidModel::from_json(&text).unwrap();
        assert_eq!(hash, "abc123");
        assert_eq!(back.params, model.params);
    }

    #[test]
    fn tampered_shape_rejected() {
        let model = CoidModel::new(ModelConfig {
            dim: 3,
            beta_dim: 2,
            heads: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&model.to_json("h").unwrap()).unwrap();
        v["params"]["beta.q"]["shape"] = serde_json::json!([3]);
        v["params"]["beta.q"]["values"] = serde_json::json!([0.0, 0.0, 0.0]);
        assert!(matches!(
            CoidModel::from_json(&v.to_string()),
            Err(CoreError::Model(_))
        ));
    }

    #[test]
    fn same_seed_same_init() {
        let a = CoidModel::new(ModelConfig::default()).unwrap();
        let b = CoidModel::new(ModelConfig::default()).unwrap();
        assert_eq!(a.params, b.params);
        let c = CoidModel::new(ModelConfig {
            init_seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(a.params, c.params);
    }
}
