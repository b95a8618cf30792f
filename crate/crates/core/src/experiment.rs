//! Evaluation over scene sets, parameter sweeps and the CSV tables they emit.

use serde::{Deserialize, Serialize};

use crate::config::{BandwidthSpec, ExperimentConfig};
use crate::error::{CoreError, Result};
use crate::exchange::{
    compute_metrics, match_transcript, run_exchange, BandwidthSchedule, ExchangeConfig, MetricsReport,
};
use crate::model::{AgentEncoding, CoidModel};
use crate::scenegen::{generate_dataset, mix_seed, ScenePair};
use crate::trainer::{train_with_progress, EpochLoss, TrainReport};

/// Evaluation scenes take ids from here so they never collide with training ids.
pub const EVAL_SCENE_OFFSET: u64 = 1_000_000;

pub fn training_scenes(cfg: &ExperimentConfig) -> Result<Vec<ScenePair>> {
    let cfg = cfg.resolved();
    generate_dataset(&cfg.scene, &cfg.model.graph, 0, cfg.train_scenes)
}

pub fn evaluation_scenes(cfg: &ExperimentConfig) -> Result<Vec<ScenePair>> {
    let cfg = cfg.resolved();
    generate_dataset(&cfg.scene, &cfg.model.graph, EVAL_SCENE_OFFSET, cfg.eval_scenes)
}

/// Builds and trains a fresh model as described by `cfg`.
pub fn train_model(
    cfg: &ExperimentConfig,
    scenes: &[ScenePair],
    on_epoch: impl FnMut(&EpochLoss),
) -> Result<(CoidModel, TrainReport)> {
    let cfg = cfg.resolved();
    let mut model = CoidModel::new(cfg.model.clone())?;
    let report = train_with_progress(&mut model, scenes, &cfg.loss, on_epoch)?;
    Ok((model, report))
}

#[derive(Clone, Debug)]
pub struct EncodedScene<'a> {
    pub scene: &'a ScenePair,
    pub ego: AgentEncoding,
    pub collab: AgentEncoding,
}

pub fn encode_scenes<'a>(model: &CoidModel, scenes: &'a [ScenePair]) -> Result<Vec<EncodedScene<'a>>> {
    scenes
        .iter()
        .map(|scene| {
            let (g0, g1) = scene.graphs(&model.config.graph)?;
            Ok(EncodedScene {
                scene,
                ego: model.encode(&g0)?,
                collab: model.encode(&g1)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene_id: u64,
    pub lambda: f64,
    pub tau: f64,
    pub schedule: BandwidthSchedule,
    pub metrics: MetricsReport,
}

pub fn evaluate_encoded(
    enc: &EncodedScene<'_>,
    schedule: &BandwidthSchedule,
    xcfg: &ExchangeConfig,
    seed: u64,
) -> Result<SceneResult> {
    let scene = enc.scene;
    let transcript = run_exchange(&enc.ego, &enc.collab, schedule, xcfg, mix_seed(seed, scene.scene_id))?;
    let pred = match_transcript(&enc.ego, &transcript, xcfg);
    let n_query = scene.collaborator().observations.len();
    Ok(SceneResult {
        scene_id: scene.scene_id,
        lambda: xcfg.lambda,
        tau: xcfg.tau,
        schedule: schedule.clone(),
        metrics: compute_metrics(&pred, &transcript, schedule, &scene.gt_pairs, n_query),
    })
}

pub fn evaluate_all(
    encoded: &[EncodedScene<'_>],
    bandwidth: &BandwidthSpec,
    rounds: usize,
    xcfg: &ExchangeConfig,
    seed: u64,
) -> Result<Vec<SceneResult>> {
    encoded
        .iter()
        .map(|enc| {
            let n_query = enc.scene.collaborator().observations.len();
            evaluate_encoded(enc, &bandwidth.schedule(n_query, rounds)?, xcfg, seed)
        })
        .collect()
}

pub fn evaluate(
    model: &CoidModel,
    scenes: &[ScenePair],
    bandwidth: &BandwidthSpec,
    rounds: usize,
    xcfg: &ExchangeConfig,
    seed: u64,
) -> Result<Vec<SceneResult>> {
    evaluate_all(&encode_scenes(model, scenes)?, bandwidth, rounds, xcfg, seed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Stat {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Stat::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenes: usize,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
    pub bis: Stat,
    pub sharing_recall: Stat,
    pub bytes: Stat,
}

pub fn summarize(results: &[SceneResult]) -> Summary {
    let col = |f: fn(&MetricsReport) -> f64| Stat::of(results.iter().map(|r| f(&r.metrics)));
    Summary {
        scenes: results.len(),
        precision: col(|m| m.precision),
        recall: col(|m| m.recall),
        f1: col(|m| m.f1),
        bis: col(|m| m.bis),
        sharing_recall: col(|m| m.sharing_recall),
        bytes: col(|m| m.bytes as f64),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: usize,
    pub rounds: usize,
    pub summary: Summary,
}

/// Every `(K, R)` combination with a constant per-round bandwidth.
pub fn sweep(
    encoded: &[EncodedScene<'_>],
    ks: &[usize],
    rounds: &[usize],
    xcfg: &ExchangeConfig,
    seed: u64,
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::with_capacity(ks.len() * rounds.len());
    for &k in ks {
        for &r in rounds {
            let results = evaluate_all(encoded, &BandwidthSpec::PerRound(vec![k]), r, xcfg, seed)?;
            cells.push(SweepCell {
                k,
                rounds: r,
                summary: summarize(&results),
            });
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqLenRow {
    pub seq_len: usize,
    pub best_epoch: usize,
    pub summary: Summary,
}

/// Trains and evaluates one model per sequence length.
pub fn ablate_seqlen(
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(usize, &EpochLoss),
) -> Result<Vec<SeqLenRow>> {
    let mut rows = Vec::new();
    for &t in &cfg.seqlen_values {
        let mut c = cfg.clone();
        c.scene.seq_len = t;
        let train = training_scenes(&c)?;
        let eval = evaluation_scenes(&c)?;
        let (model, report) = train_model(&c, &train, |e| progress(t, e))?;
        let results = evaluate(&model, &eval, &c.bandwidth, c.rounds, &c.exchange, c.seed)?;
        rows.push(SeqLenRow {
            seq_len: t,
            best_epoch: report.best_epoch,
            summary: summarize(&results),
        });
    }
    Ok(rows)
}

fn f(x: f64) -> String {
    format!("{x:.6}")
}

fn table(config_hash: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let body = w.into_inner().map_err(|e| CoreError::Io(e.into_error()))?;
    Ok(format!("# config_hash={config_hash}\n{}", String::from_utf8_lossy(&body)))
}

pub fn eval_csv(config_hash: &str, results: &[SceneResult]) -> Result<String> {
    let rows = results
        .iter()
        .map(|r| {
            let m = &r.metrics;
            vec![
                r.scene_id.to_string(),
                f(r.lambda),
                f(r.tau),
                f(r.schedule.mean_k()),
                r.schedule.rounds().to_string(),
                f(m.precision),
                f(m.recall),
                f(m.f1),
                f(m.bis),
                f(m.sharing_recall),
                m.bytes.to_string(),
            ]
        })
        .collect();
    table(
        config_hash,
        &[
            "scene_id",
            "lambda",
            "tau",
            "k",
            "rounds",
            "precision",
            "recall",
            "f1",
            "bis",
            "sharing_recall",
            "bytes",
        ],
        rows,
    )
}

const SUMMARY_COLUMNS: [&str; 12] = [
    "precision_mean",
    "precision_std",
    "recall_mean",
    "recall_std",
    "f1_mean",
    "f1_std",
    "bis_mean",
    "bis_std",
    "sharing_recall_mean",
    "sharing_recall_std",
    "bytes_mean",
    "bytes_std",
];

fn summary_cells(s: &Summary) -> Vec<String> {
    [s.precision, s.recall, s.f1, s.bis, s.sharing_recall, s.bytes]
        .iter()
        .flat_map(|st| [f(st.mean), f(st.std)])
        .collect()
}

pub fn sweep_csv(config_hash: &str, cells: &[SweepCell]) -> Result<String> {
    let mut header = vec!["k", "rounds", "scenes"];
    header.extend(SUMMARY_COLUMNS);
    let rows = cells
        .iter()
        .map(|c| {
            let mut row = vec![c.k.to_string(), c.rounds.to_string(), c.summary.scenes.to_string()];
            row.extend(summary_cells(&c.summary));
            row
        })
        .collect();
    table(config_hash, &header, rows)
}

pub fn seqlen_csv(config_hash: &str, rows: &[SeqLenRow]) -> Result<String> {
    let mut header = vec!["seq_len", "best_epoch", "scenes"];
    header.extend(SUMMARY_COLUMNS);
    let body = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.seq_len.to_string(),
                r.best_epoch.to_string(),
                r.summary.scenes.to_string(),
            ];
            row.extend(summary_cells(&r.summary));
            row
        })
        .collect();
    table(config_hash, &header, body)
}

pub fn loss_curve_csv(config_hash: &str, curve: &[EpochLoss]) -> Result<String> {
    let rows = curve
        .iter()
        .map(|e| vec![e.epoch.to_string(), f(e.train_loss), f(e.val_loss)])
        .collect();
    table(config_hash, &["epoch", "train_loss", "val_loss"], rows)
}

/// CSV text without its leading comment lines.
pub fn csv_body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_of_constant_has_zero_spread() {
        let s = Stat::of([2.0, 2.0, 2.0]);
        assert_eq!((s.mean, s.std), (2.0, 0.0));
        assert_eq!(Stat::of([]).mean, 0.0);
    }

    #[test]
    fn loss_csv_layout() {
        let text = loss_curve_csv(
            "abcd",
            &[EpochLoss {
                epoch: 0,
                train_loss: 1.5,
                val_loss: 2.0,
            }],
        )
        .unwrap();
        assert_eq!(text, "# config_hash=abcd\nepoch,train_loss,val_loss\n0,1.500000,2.000000\n");
        assert_eq!(csv_body(&text), "epoch,train_loss,val_loss\n0,1.500000,2.000000\n");
    }
}
