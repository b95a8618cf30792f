//! Bandwidth-limited interactive sharing between two agents, correspondence
//! matching on the received embeddings, and the evaluation metrics.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::hetpool::rank_desc;
use crate::model::AgentEncoding;
use crate::numcore::{dot, l2_distance, softmax_slice, Tensor};

const F64_BYTES: usize = 8;

/// Per-round limits on how many node embeddings one agent may send.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandwidthSchedule {
    k: Vec<usize>,
}

impl BandwidthSchedule {
    pub fn new(k: Vec<usize>) -> Result<Self> {
        if k.is_empty() || k.contains(&0) {
            return Err(CoreError::InvalidConfig(
                "bandwidth schedule needs at least one round and K >= 1".into(),
            ));
        }
        Ok(Self { k })
    }

    /// The same `k` in each of `rounds` rounds.
    pub fn constant(k: usize, rounds: usize) -> Result<Self> {
        Self::new(vec![k; rounds])
    }

    pub fn rounds(&self) -> usize {
        self.k.len()
    }

    /// Bandwidth of round `r` (1-based).
    pub fn k(&self, r: usize) -> usize {
        self.k[r - 1]
    }

    pub fn per_round(&self) -> &[usize] {
        &self.k
    }

    pub fn mean_k(&self) -> f64 {
        self.k.iter().sum::<usize>() as f64 / self.k.len() as f64
    }
}

/// How each agent picks the nodes it sends.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// graph-embedding bootstrap, then combined node/graph scoring
    #[default]
    Full,
    /// node scoring only: no graph embeddings, random first round
    Ne,
    /// uniformly random nodes every round
    Random,
}

impl std::str::FromStr for Baseline {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Baseline::Full),
            "ne" => Ok(Baseline::Ne),
            "random" => Ok(Baseline::Random),
            other => Err(CoreError::InvalidConfig(format!("unknown baseline {other:?}"))),
        }
    }
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Baseline::Full => "full",
            Baseline::Ne => "ne",
            Baseline::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExchangeConfig {
    /// weight of the graph-level score in candidate scoring
    pub lambda: f64,
    /// minimum matching confidence
    pub tau: f64,
    /// multiplies the affinities before the row softmax
    pub match_scale: f64,
    pub baseline: Baseline,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tau: 0.5,
            match_scale: 80.0,
            baseline: Baseline::Full,
        }
    }
}

impl ExchangeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CoreError::InvalidConfig(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(CoreError::InvalidConfig(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.match_scale > 0.0 && self.match_scale.is_finite()) {
            return Err(CoreError::InvalidConfig("match_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Node-level (`N × K`) and graph-level (`N`) similarities of the local
/// embeddings `m` against what was received.
pub fn similarities(m: &Tensor, received: &[&[f64]], z_recv: Option<&[f64]>) -> (Tensor, Vec<f64>) {
    let n = m.rows();
    let mut s_node = Vec::with_capacity(n * received.len());
    for i in 0..n {
        for r in received {
            s_node.push((-l2_distance(m.row(i), r)).exp());
        }
    }
    let s_graph = match z_recv {
        Some(z) => (0..n).map(|i| (-l2_distance(m.row(i), z)).exp()).collect(),
        None => vec![0.0; n],
    };
    let s_node = Tensor::new(vec![n, received.len()], s_node).expect("similarity shape");
    (s_node, s_graph)
}

/// `s_i = λ·s^graph_i + (1−λ)·max_j S^node_ij`; the node term is dropped
/// while nothing has been received.
pub fn matching_score(s_node: &Tensor, s_graph: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::InvalidConfig(format!("lambda {lambda} outside [0, 1]")));
    }
    if s_node.rows() != s_graph.len() {
        return Err(crate::error::mismatch(
            "matching_score",
            format!("{} rows vs {} graph scores", s_node.rows(), s_graph.len()),
        ));
    }
    let k = s_node.shape()[1];
    Ok((0..s_graph.len())
        .map(|i| {
            let node = if k == 0 {
                0.0
            } else {
                s_node.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            lambda * s_graph[i] + (1.0 - lambda) * node
        })
        .collect())
}

/// The `k` best-scoring indices outside `excluded`, best first, ties to the
/// lower index.
pub fn select_topk(s: &[f64], k: usize, excluded: &BTreeSet<usize>) -> Vec<usize> {
    let mut ranked = rank_desc(s, s.len());
    ranked.retain(|i| !excluded.contains(i));
    ranked.truncate(k);
    ranked
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    /// 0 is the graph-embedding bootstrap
    pub round: usize,
    /// 0 = ego, 1 = collaborator
    pub sender: usize,
    pub nodes: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
    pub graph_embedding: Option<Vec<f64>>,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExchangeTranscript {
    pub messages: Vec<Message>,
    /// nodes each agent shared, in sending order
    pub shared: [Vec<usize>; 2],
    /// rounds in which at least one node embedding was sent
    pub rounds_used: usize,
    pub total_bytes: usize,
}

impl ExchangeTranscript {
    pub fn shared_by(&self, agent: usize) -> &[usize] {
        &self.shared[agent]
    }

    /// Checks the per-round limit and that no node is sent twice.
    pub fn respects(&self, schedule: &BandwidthSchedule) -> bool {
        let mut seen = [BTreeSet::new(), BTreeSet::new()];
        self.messages.iter().all(|msg| {
            let within = msg.round == 0 && msg.nodes.is_empty()
                || msg.round >= 1
                    && msg.round <= schedule.rounds()
                    && msg.nodes.len() <= schedule.k(msg.round);
            within && msg.nodes.iter().all(|&i| seen[msg.sender].insert(i))
        })
    }
}

struct AgentState<'a> {
    enc: &'a AgentEncoding,
    shared: BTreeSet<usize>,
    received_nodes: Vec<Vec<f64>>,
    received_z: Option<Vec<f64>>,
}

impl AgentState<'_> {
    fn choose(
        &self,
        k: usize,
        round: usize,
        cfg: &ExchangeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        let m = &self.enc.nodes.m;
        let random_pick = match cfg.baseline {
            Baseline::Random => true,
            Baseline::Ne => round == 1,
            Baseline::Full => false,
        };
        if random_pick {
            let mut pool: Vec<usize> = (0..m.rows()).filter(|i| !self.shared.contains(i)).collect();
            pool.shuffle(rng);
            pool.truncate(k);
            return Ok(pool);
        }
        let received: Vec<&[f64]> = self.received_nodes.iter().map(Vec::as_slice).collect();
        let (s_node, s_graph) = similarities(m, &received, self.received_z.as_deref());
        let lambda = match cfg.baseline {
            Baseline::Ne => 0.0,
            _ if received.is_empty() => 1.0,
            _ => cfg.lambda,
        };
        let s = matching_score(&s_node, &s_graph, lambda)?;
        Ok(select_topk(&s, k, &self.shared))
    }
}

/// Runs the sharing protocol. `seed` drives the random choices of the
/// baselines and is ignored by the full method.
pub fn run_exchange(
    ego: &AgentEncoding,
    collab: &AgentEncoding,
    schedule: &BandwidthSchedule,
    cfg: &ExchangeConfig,
    seed: u64,
) -> Result<ExchangeTranscript> {
    cfg.validate()?;
    let d = ego.nodes.m.cols();
    if collab.nodes.m.cols() != d {
        return Err(crate::error::mismatch(
            "run_exchange",
            format!("embedding widths {d} and {}", collab.nodes.m.cols()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agents = [ego, collab].map(|enc| AgentState {
        enc,
        shared: BTreeSet::new(),
        received_nodes: Vec::new(),
        received_z: None,
    });
    let mut messages = Vec::new();

    if cfg.baseline == Baseline::Full {
        for sender in 0..2 {
            let z = agents[sender].enc.graph.z.data().to_vec();
            agents[1 - sender].received_z = Some(z.clone());
            messages.push(Message {
                round: 0,
                sender,
                nodes: Vec::new(),
                embeddings: Vec::new(),
                graph_embedding: Some(z),
                bytes: d * F64_BYTES,
            });
        }
    }

    let mut rounds_used = 0;
    for round in 1..=schedule.rounds() {
        let mut any = false;
        for sender in 0..2 {
            let picks = agents[sender].choose(schedule.k(round), round, cfg, &mut rng)?;
            let embeddings: Vec<Vec<f64>> = picks
                .iter()
                .map(|&i| agents[sender].enc.nodes.m.row(i).to_vec())
                .collect();
            agents[sender].shared.extend(picks.iter().copied());
            agents[1 - sender].received_nodes.extend(embeddings.iter().cloned());
            any |= !picks.is_empty();
            messages.push(Message {
                round,
                sender,
                bytes: picks.len() * d * F64_BYTES,
                nodes: picks,
                embeddings,
                graph_embedding: None,
            });
        }
        if any {
            rounds_used = round;
        }
    }

    let mut shared = [Vec::new(), Vec::new()];
    for msg in &messages {
        shared[msg.sender].extend(msg.nodes.iter().copied());
    }
    Ok(ExchangeTranscript {
        total_bytes: messages.iter().map(|m| m.bytes).sum(),
        messages,
        shared,
        rounds_used,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub ego: usize,
    pub collab: usize,
    pub confidence: f64,
}

/// Soft assignment `Y`: row `i` is the softmax over `scale·m_iᵀm'_j` of the
/// received embeddings `m'_j`.
pub fn match_probabilities(m: &Tensor, received: &[&[f64]], scale: f64) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|i| {
            let logits: Vec<f64> = received.iter().map(|e| scale * dot(m.row(i), e)).collect();
            softmax_slice(&logits)
        })
        .collect()
}

/// Keeps the row argmax of [`match_probabilities`] when its probability
/// reaches `tau`. `received` holds `(collaborator node index, embedding)`.
pub fn match_nodes(
    m: &Tensor,
    received: &[(usize, &[f64])],
    tau: f64,
    scale: f64,
) -> Vec<Correspondence> {
    if received.is_empty() {
        return Vec::new();
    }
    let embeddings: Vec<&[f64]> = received.iter().map(|(_, e)| *e).collect();
    match_probabilities(m, &embeddings, scale)
        .into_iter()
        .enumerate()
        .filter_map(|(i, y)| {
            let best = rank_desc(&y, 1)[0];
            (y[best] >= tau).then(|| Correspondence {
                ego: i,
                collab: received[best].0,
                confidence: y[best],
            })
        })
        .collect()
}

/// Matches the ego's nodes against the collaborator nodes in `transcript`.
pub fn match_transcript(
    ego: &AgentEncoding,
    transcript: &ExchangeTranscript,
    cfg: &ExchangeConfig,
) -> Vec<Correspondence> {
    let received: Vec<(usize, &[f64])> = transcript
        .messages
        .iter()
        .filter(|msg| msg.sender == 1)
        .flat_map(|msg| msg.nodes.iter().copied().zip(msg.embeddings.iter().map(Vec::as_slice)))
        .collect();
    match_nodes(&ego.nodes.m, &received, cfg.tau, cfg.match_scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bis: f64,
    pub sharing_recall: f64,
    pub predicted: usize,
    pub correct: usize,
    pub gt_pairs: usize,
    pub n_query: usize,
    pub rounds_used: usize,
    pub mean_k: f64,
    pub bytes: usize,
}

/// Precision/recall/F1 of `pred` against `gt`, plus the sharing efficiency
/// of the transcript. `n_query` is the collaborator's node count.
pub fn compute_metrics(
    pred: &[Correspondence],
    transcript: &ExchangeTranscript,
    schedule: &BandwidthSchedule,
    gt: &[(usize, usize)],
    n_query: usize,
) -> MetricsReport {
    let gt_set: BTreeSet<(usize, usize)> = gt.iter().copied().collect();
    let correct = pred
        .iter()
        .filter(|c| gt_set.contains(&(c.ego, c.collab)))
        .count();
    let precision = if pred.is_empty() {
        0.0
    } else {
        correct as f64 / pred.len() as f64
    };
    let recall = match (gt_set.len(), pred.len()) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (g, _) => correct as f64 / g as f64,
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let mean_k = schedule.mean_k();
    let bis = if transcript.rounds_used == 0 {
        0.0
    } else {
        recall * n_query as f64 / (transcript.rounds_used as f64 * mean_k)
    };
    let covisible: BTreeSet<usize> = gt_set.iter().map(|&(_, j)| j).collect();
    let sent: BTreeSet<usize> = transcript.shared_by(1).iter().copied().collect();
    let sharing_recall = if covisible.is_empty() {
        1.0
    } else {
        covisible.intersection(&sent).count() as f64 / covisible.len() as f64
    };
    MetricsReport {
        precision,
        recall,
        f1,
        bis,
        sharing_recall,
        predicted: pred.len(),
        correct,
        gt_pairs: gt_set.len(),
        n_query,
        rounds_used: transcript.rounds_used,
        mean_k,
        bytes: transcript.total_bytes,
    }
}
