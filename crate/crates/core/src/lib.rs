//! Bandwidth-adaptive spatiotemporal correspondence identification (CoID)
//! between two agents.
//!
//! Each agent turns its multi-frame object observations into a
//! [`stgraph::SpatioTemporalGraph`], encodes it with a heterogeneous graph
//! attention network ([`hetgat`]) and a pooled graph embedding ([`hetpool`]),
//! then the two agents trade a bandwidth-limited set of node embeddings
//! ([`exchange`]) to identify covisible objects. [`trainer`] fits the encoder
//! with a circle loss on scenes from [`scenegen`].

pub mod config;
pub mod error;
pub mod exchange;
pub mod experiment;
pub mod hetgat;
pub mod hetpool;
pub mod model;
pub mod numcore;
pub mod params;
pub mod scenegen;
pub mod stgraph;
pub mod trainer;

pub use error::{CoreError, Result};
pub use model::{AgentEncoding, CoidModel, ModelConfig};
