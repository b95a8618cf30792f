//! Circle-loss training of the encoder on scene pairs with known
//! correspondences.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{CoidModel, EncodingVars};
use crate::numcore::{Tape, Tensor, Var};
use crate::scenegen::ScenePair;
use crate::stgraph::SpatioTemporalGraph;

/// Which anchors and positives the node-level terms use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeAnchoring {
    /// each node is pulled toward its own correspondent(s) and pushed from
    /// every other node of the other graph
    #[default]
    Correspondence,
    /// each node of one graph is an anchor, the other graph's covisible
    /// nodes are positives and its remaining nodes negatives
    Printed,
}

/// How distances on the wrong side of a margin are penalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginForm {
    /// only positives beyond δ_p and negatives inside δ_n are penalized
    #[default]
    OneSided,
    /// squared offset from the margin on either side
    TwoSided,
}

/// Which graph embedding a graph's nodes are compared with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphAnchor {
    /// the other agent's z, which is what the node receives when scoring
    #[default]
    Other,
    Own,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub delta_p: f64,
    pub delta_n: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// scenes per update
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub margin_form: MarginForm,
    pub node_anchoring: NodeAnchoring,
    pub graph_anchor: GraphAnchor,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 8.0,
            delta_p: 0.2,
            delta_n: 1.2,
            learning_rate: 3e-3,
            epochs: 80,
            batch_size: 8,
            seed: 0,
            val_fraction: 0.2,
            margin_form: MarginForm::OneSided,
            node_anchoring: NodeAnchoring::Correspondence,
            graph_anchor: GraphAnchor::Other,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(0.0 <= self.delta_p && self.delta_p < self.delta_n) {
            return bad("margins need 0 <= delta_p < delta_n");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Nodes with and without a correspondent, for both graphs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PosNegPartition {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
    pub pos_other: Vec<usize>,
    pub neg_other: Vec<usize>,
}

pub fn partition(gt: &[(usize, usize)], n: usize, n_other: usize) -> PosNegPartition {
    let mut has = vec![false; n];
    let mut has_other = vec![false; n_other];
    for &(i, j) in gt {
        has[i] = true;
        has_other[j] = true;
    }
    let split = |flags: &[bool]| -> (Vec<usize>, Vec<usize>) { (0..flags.len()).partition(|&i| flags[i]) };
    let (pos, neg) = split(&has);
    let (pos_other, neg_other) = split(&has_other);
    PosNegPartition {
        pos,
        neg,
        pos_other,
        neg_other,
    }
}

/// `Σ_rows log(1 + Σ_pos exp[γ(D − δ_p)²] + Σ_neg exp[γ(δ_n − D)²])` over the
/// rows (anchors) of the distance matrix `d`; the masks pick each row's
/// positive and negative columns. With [`MarginForm::OneSided`] the offsets
/// are clamped at zero, so satisfied margins contribute `exp(0)`.
pub fn circle_loss<'t>(d: Var<'t>, pos: &Tensor, neg: &Tensor, cfg: &LossConfig) -> Result<Var<'t>> {
    let tape = d.tape();
    if d.value().is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let clamp = |v: Var<'t>| match cfg.margin_form {
        MarginForm::OneSided => v.relu(),
        MarginForm::TwoSided => v,
    };
    let pos_terms = clamp(d.add_const(-cfg.delta_p))
        .square()
        .scale(cfg.gamma)
        .exp()
        .mul(tape.constant(pos.clone()))?;
    let neg_terms = clamp(d.scale(-1.0).add_const(cfg.delta_n))
        .square()
        .scale(cfg.gamma)
        .exp()
        .mul(tape.constant(neg.clone()))?;
    Ok(pos_terms.add(neg_terms)?.row_sums().add_const(1.0).ln().sum())
}

/// 0/1 mask of shape `[rows × cols]` set where `f(row, col)`.
fn mask(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Tensor {
    let data = (0..rows * cols)
        .map(|k| if f(k / cols, k % cols) { 1.0 } else { 0.0 })
        .collect();
    Tensor::matrix(rows, cols, data).expect("mask shape")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub node_forward: f64,
    pub node_backward: f64,
    pub graph_forward: f64,
    pub graph_backward: f64,
    pub total: f64,
}

/// Node-level term with `a` as the anchoring side.
fn node_term<'t>(
    a: &EncodingVars<'t>,
    b: &EncodingVars<'t>,
    gt: &[(usize, usize)],
    part: &PosNegPartition,
    cfg: &LossConfig,
) -> Result<Var<'t>> {
    let (n, n_other) = (a.nodes.m.shape()[0], b.nodes.m.shape()[0]);
    match cfg.node_anchoring {
        NodeAnchoring::Correspondence => {
            let mut pos = Tensor::zeros(&[n, n_other]);
            for &(i, j) in gt {
                pos.data_mut()[i * n_other + j] = 1.0;
            }
            let neg = pos.map(|x| 1.0 - x);
            circle_loss(a.nodes.m.pairwise_dist(b.nodes.m)?, &pos, &neg, cfg)
        }
        NodeAnchoring::Printed => {
            let pos_set = flags(n_other, &part.pos_other);
            let pos = mask(n, n_other, |_, j| pos_set[j]);
            let neg = mask(n, n_other, |_, j| !pos_set[j]);
            circle_loss(a.nodes.m.pairwise_dist(b.nodes.m)?, &pos, &neg, cfg)
        }
    }
}

/// Graph-level term over the nodes of `a`.
fn graph_term<'t>(
    a: &EncodingVars<'t>,
    b: &EncodingVars<'t>,
    pos_nodes: &[usize],
    cfg: &LossConfig,
) -> Result<Var<'t>> {
    let z = match cfg.graph_anchor {
        GraphAnchor::Other => b.graph.z,
        GraphAnchor::Own => a.graph.z,
    };
    let d = z.shape()[0];
    let n = a.nodes.m.shape()[0];
    let dist = z.reshape(vec![1, d])?.pairwise_dist(a.nodes.m)?;
    let is_pos = flags(n, pos_nodes);
    let pos = mask(1, n, |_, j| is_pos[j]);
    let neg = mask(1, n, |_, j| !is_pos[j]);
    circle_loss(dist, &pos, &neg, cfg)
}

fn flags(n: usize, set: &[usize]) -> Vec<bool> {
    let mut f = vec![false; n];
    for &i in set {
        f[i] = true;
    }
    f
}

/// Records the four-term loss of one scene pair on `tape`.
pub fn total_loss<'t>(
    model: &CoidModel,
    tape: &'t Tape,
    p: &[Var<'t>],
    graphs: &(SpatioTemporalGraph, SpatioTemporalGraph),
    gt: &[(usize, usize)],
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossTerms)> {
    let a = model.forward(tape, p, &graphs.0)?;
    let b = model.forward(tape, p, &graphs.1)?;
    let part = partition(gt, graphs.0.len(), graphs.1.len());
    let gt_rev: Vec<(usize, usize)> = gt.iter().map(|&(i, j)| (j, i)).collect();
    let part_rev = PosNegPartition {
        pos: part.pos_other.clone(),
        neg: part.neg_other.clone(),
        pos_other: part.pos.clone(),
        neg_other: part.neg.clone(),
    };
    let terms = [
        node_term(&a, &b, gt, &part, cfg)?,
        node_term(&b, &a, &gt_rev, &part_rev, cfg)?,
        graph_term(&a, &b, &part.pos, cfg)?,
        graph_term(&b, &a, &part.pos_other, cfg)?,
    ];
    let total = terms[0].add(terms[1])?.add(terms[2])?.add(terms[3])?.scale(0.25);
    let values = LossTerms {
        node_forward: terms[0].item(),
        node_backward: terms[1].item(),
        graph_forward: terms[2].item(),
        graph_backward: terms[3].item(),
        total: total.item(),
    };
    Ok((total, values))
}

/// A scene prepared for training: both graphs plus ground truth.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub scene_id: u64,
    pub graphs: (SpatioTemporalGraph, SpatioTemporalGraph),
    pub gt: Vec<(usize, usize)>,
}

impl TrainingExample {
    pub fn from_scene(scene: &ScenePair, model: &CoidModel) -> Result<Self> {
        Ok(Self {
            scene_id: scene.scene_id,
            graphs: scene.graphs(&model.config.graph)?,
            gt: scene.gt_pairs.clone(),
        })
    }
}

/// Loss and parameter gradients of one example.
pub fn loss_and_grad(
    model: &CoidModel,
    ex: &TrainingExample,
    cfg: &LossConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, true);
    let (loss, terms) = total_loss(model, &tape, &p, &ex.graphs, &ex.gt, cfg)?;
    if !terms.total.is_finite() {
        return Err(CoreError::NonFiniteLoss {
            scene_id: ex.scene_id,
        });
    }
    let grads = tape.gradients(loss)?;
    Ok((terms.total, p.iter().map(|&v| grads.get(v)).collect()))
}

pub fn loss_only(model: &CoidModel, ex: &TrainingExample, cfg: &LossConfig) -> Result<f64> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let (_, terms) = total_loss(model, &tape, &p, &ex.graphs, &ex.gt, cfg)?;
    if !terms.total.is_finite() {
        return Err(CoreError::NonFiniteLoss {
            scene_id: ex.scene_id,
        });
    }
    Ok(terms.total)
}

/// Adam with the usual decay rates.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (x, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// epoch 0 holds the losses of the initial parameters
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub train_scenes: Vec<u64>,
    pub val_scenes: Vec<u64>,
}

fn mean_loss(model: &CoidModel, set: &[&TrainingExample], cfg: &LossConfig) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for ex in set {
        total += loss_only(model, ex, cfg)?;
    }
    Ok(total / set.len() as f64)
}

/// Fits `model` in place and leaves it at the epoch with the lowest
/// validation loss (training loss when there is no validation split).
pub fn train(model: &mut CoidModel, scenes: &[ScenePair], cfg: &LossConfig) -> Result<TrainReport> {
    train_with_progress(model, scenes, cfg, |_| {})
}

pub fn train_with_progress(
    model: &mut CoidModel,
    scenes: &[ScenePair],
    cfg: &LossConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(CoreError::EmptyInput("training set"));
    }
    let examples = scenes
        .iter()
        .map(|s| TrainingExample::from_scene(s, model))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((examples.len() as f64 * cfg.val_fraction).round() as usize).min(examples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<&TrainingExample> = val_idx.iter().map(|&i| &examples[i]).collect();
    let mut train_set: Vec<&TrainingExample> = train_idx.iter().map(|&i| &examples[i]).collect();

    let selection = |row: &EpochLoss| if val.is_empty() { row.train_loss } else { row.val_loss };
    let initial = EpochLoss {
        epoch: 0,
        train_loss: mean_loss(model, &train_set, cfg)?,
        val_loss: mean_loss(model, &val, cfg)?,
    };
    on_epoch(&initial);
    let mut best = (selection(&initial), 0, model.params.clone());
    let mut curve = vec![initial];
    let mut adam = Adam::new(cfg.learning_rate, model.params.values());

    for epoch in 1..=cfg.epochs {
        train_set.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_set.chunks(cfg.batch_size) {
            let mut sum: Vec<Tensor> = model
                .params
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for ex in batch {
                let (loss, grads) = loss_and_grad(model, ex, cfg)?;
                epoch_loss += loss;
                for (acc, g) in sum.iter_mut().zip(&grads) {
                    acc.add_assign(g);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut sum {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            adam.update(model.params.values_mut(), &sum);
        }
        let row = EpochLoss {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss: mean_loss(model, &val, cfg)?,
        };
        on_epoch(&row);
        if selection(&row) < best.0 {
            best = (selection(&row), epoch, model.params.clone());
        }
        curve.push(row);
    }

    model.params = best.2;
    Ok(TrainReport {
        curve,
        best_epoch: best.1,
        train_scenes: train_set.iter().map(|e| e.scene_id).collect(),
        val_scenes: val.iter().map(|e| e.scene_id).collect(),
    })
}
