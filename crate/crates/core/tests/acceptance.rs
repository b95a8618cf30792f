//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p stcoid --test acceptance`. Set `ACCEPTANCE_STRICT=1`
//! to turn any failing criterion into a nonzero exit status.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use stcoid::config::{BandwidthSpec, ExperimentConfig};
use stcoid::exchange::{
    compute_metrics, match_probabilities, run_exchange, select_topk, BandwidthSchedule, Baseline,
    Correspondence, ExchangeConfig,
};
use stcoid::experiment::{
    csv_body, encode_scenes, eval_csv, evaluate_all, evaluation_scenes, loss_curve_csv, summarize,
    sweep, sweep_csv, train_model, training_scenes, EncodedScene, Summary,
};
use stcoid::hetgat::{attention, propagate_head};
use stcoid::numcore::{grad_check, Tape, Tensor, Var};
use stcoid::scenegen::{dataset_to_json, generate_dataset, Preset, ScenePair};
use stcoid::stgraph::{EdgeKind, SpatioTemporalGraph};
use stcoid::trainer::{total_loss, LossConfig};
use stcoid::CoidModel;

use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let model = common::small_model(5);
    let (graphs, gt) = common::tiny_pair();
    let theta: Vec<Tensor> = model.params.values().to_vec();
    let cfg = LossConfig::default();
    let report = grad_check(
        |tape, p| Ok(total_loss(&model, tape, p, &graphs, &gt, &cfg)?.0),
        &theta,
        1e-6,
    )
    .unwrap();
    // report per parameter group: the worst coordinate is what matters
    let worst = report
        .worst
        .map(|(p, _)| model.params.names()[p].clone())
        .unwrap_or_default();
    let secs = started.elapsed().as_secs_f64();
    outcome(
        report.passes(1e-4) && report.checked == model.params.scalar_count() && secs < 60.0,
        format!(
            "{} coordinates in {} tensors, max rel error {:.2e} ({worst})",
            report.checked,
            model.params.len(),
            report.max_rel_error
        ),
    )
}

/// Largest deviation from 1 of any attention neighborhood, any layer, head or kind.
fn attention_row_error(model: &CoidModel, g: &SpatioTemporalGraph) -> f64 {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let layout = model.gat_layout();
    let h0 = tape
        .constant(g.attributes())
        .linear_rows(p[layout.w_v.0])
        .unwrap();
    let mut worst: f64 = 0.0;
    for (k, kind) in [EdgeKind::Spatial, EdgeKind::Temporal].into_iter().enumerate() {
        let edges = g.directed(kind);
        let mut h = h0;
        for layer in &layout.heads {
            let mut outs = Vec::new();
            for head in layer {
                let (alpha, _) = attention(&p, &head[k], h, &edges).unwrap();
                let mut sums = vec![0.0; g.len()];
                for (e, &dst) in edges.dst.iter().enumerate() {
                    sums[dst] += alpha.value().data()[e];
                }
                for i in edges.covered() {
                    worst = worst.max((sums[i] - 1.0).abs());
                }
                outs.push(propagate_head(&p, &head[k], h, &edges).unwrap());
            }
            h = Var::concat_cols(&outs).unwrap();
        }
    }
    worst
}

fn normalization_invariants() -> Outcome {
    let mut rng = common::rng(2024);
    let (mut att, mut beta, mut rows) = (0.0f64, 0.0f64, 0.0f64);
    let mut checked_rows = 0;
    for i in 0..1000 {
        let g = common::random_graph(&mut rng, 6, 5);
        let model = common::small_model(i);
        att = att.max(attention_row_error(&model, &g));
        let enc = model.encode(&g).unwrap();
        beta = beta.max((enc.nodes.beta[0] + enc.nodes.beta[1] - 1.0).abs());
        let other = model.encode(&common::random_graph(&mut rng, 6, 5)).unwrap();
        let recv: Vec<&[f64]> = (0..other.nodes.m.rows()).map(|j| other.nodes.m.row(j)).collect();
        for y in match_probabilities(&enc.nodes.m, &recv, rng.random_range(1.0..100.0)) {
            rows = rows.max((y.iter().sum::<f64>() - 1.0).abs());
            checked_rows += 1;
        }
    }
    outcome(
        att < 1e-12 && beta < 1e-12 && rows < 1e-12,
        format!(
            "1000 graphs: attention {att:.1e}, beta {beta:.1e}, {checked_rows} softmax rows {rows:.1e}"
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut rng = common::rng(77);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..50);
        // coarse values force ties
        let s: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 4.0).collect();
        let k = rng.random_range(0..60);
        let excluded: BTreeSet<usize> = (0..rng.random_range(0..10)).map(|_| rng.random_range(0..50)).collect();
        let mut brute: Vec<usize> = (0..n).filter(|i| !excluded.contains(i)).collect();
        brute.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        brute.truncate(k);
        if select_topk(&s, k, &excluded) != brute {
            mismatches += 1;
        }
    }
    let mut violations = 0;
    let transcripts = 200;
    for i in 0..transcripts {
        let model = common::small_model(i);
        let ego = model.encode(&common::random_graph(&mut rng, 6, 4)).unwrap();
        let col = model.encode(&common::random_graph(&mut rng, 6, 4)).unwrap();
        let rounds = rng.random_range(1..5);
        let ks: Vec<usize> = (0..rounds).map(|_| rng.random_range(1..5)).collect();
        let schedule = BandwidthSchedule::new(ks).unwrap();
        let baseline = [Baseline::Full, Baseline::Ne, Baseline::Random][i as usize % 3];
        let cfg = ExchangeConfig {
            baseline,
            ..ExchangeConfig::default()
        };
        let t = run_exchange(&ego, &col, &schedule, &cfg, i).unwrap();
        let over = t
            .messages
            .iter()
            .any(|m| m.round > 0 && m.nodes.len() > schedule.k(m.round));
        let repeat = t
            .shared
            .iter()
            .any(|s| s.iter().collect::<BTreeSet<_>>().len() != s.len());
        if over || repeat || !t.respects(&schedule) {
            violations += 1;
        }
    }
    outcome(
        mismatches == 0 && violations == 0,
        format!("top-k mismatches {mismatches}/1000, transcript violations {violations}/{transcripts}"),
    )
}

fn pooling_invariance() -> Outcome {
    let mut rng = common::rng(4);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let g = common::random_graph(&mut rng, 6, 5);
        let model = common::small_model(100 + i);
        let z = model.encode(&g).unwrap().graph.z;
        for _ in 0..100 {
            let perm = common::random_permutation(&mut rng, g.len());
            let zp = model.encode(&g.permuted(&perm)).unwrap().graph.z;
            for (a, b) in z.data().iter().zip(zp.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst < 1e-12, format!("50 graphs x 100 permutations, max |dz| {worst:.1e}"))
}

fn bis_arithmetic() -> Outcome {
    let cfg = ExperimentConfig::default();
    let model = CoidModel::new(cfg.model.clone()).unwrap();
    let perfect = |gt: &[(usize, usize)]| -> Vec<Correspondence> {
        gt.iter()
            .map(|&(ego, collab)| Correspondence {
                ego,
                collab,
                confidence: 1.0,
            })
            .collect()
    };
    // full sharing in one round at perfect recall
    let scene = &training_scenes(&cfg).unwrap()[0];
    let (g0, g1) = scene.graphs(&model.config.graph).unwrap();
    let (ego, col) = (model.encode(&g0).unwrap(), model.encode(&g1).unwrap());
    let n_query = g1.len();
    let full = BandwidthSchedule::constant(n_query, 1).unwrap();
    let t = run_exchange(&ego, &col, &full, &ExchangeConfig::default(), 0).unwrap();
    let full_bis = compute_metrics(&perfect(&scene.gt_pairs), &t, &full, &scene.gt_pairs, n_query).bis;

    // 20 query nodes, two rounds of five
    let scenes = generate_dataset(&cfg.scene, &cfg.model.graph, 0, 400).unwrap();
    let scene = scenes
        .iter()
        .find(|s| s.collaborator().observations.len() == 20)
        .expect("a scene with 20 collaborator nodes");
    let (g0, g1) = scene.graphs(&model.config.graph).unwrap();
    let (ego, col) = (model.encode(&g0).unwrap(), model.encode(&g1).unwrap());
    let sched = BandwidthSchedule::constant(5, 2).unwrap();
    let t = run_exchange(&ego, &col, &sched, &ExchangeConfig::default(), 0).unwrap();
    let m = compute_metrics(&perfect(&scene.gt_pairs), &t, &sched, &scene.gt_pairs, 20);
    outcome(
        full_bis == 1.0 && m.bis == 2.0 && m.recall == 1.0 && m.rounds_used == 2,
        format!("full share {full_bis:.3}, (1, 20, 2, 5) -> {:.3}", m.bis),
    )
}

struct SeedRun {
    seed: u64,
    secs: f64,
    full: Summary,
    ne: Summary,
    random: Summary,
    recall_by_k: Vec<f64>,
    crowded_full: Summary,
    crowded_random: Summary,
}

fn with_baseline(x: &ExchangeConfig, b: Baseline) -> ExchangeConfig {
    ExchangeConfig {
        baseline: b,
        ..x.clone()
    }
}

fn evaluate(enc: &[EncodedScene<'_>], cfg: &ExperimentConfig, b: Baseline) -> Summary {
    summarize(&evaluate_all(enc, &cfg.bandwidth, cfg.rounds, &with_baseline(&cfg.exchange, b), cfg.seed).unwrap())
}

fn run_seed(seed: u64) -> SeedRun {
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let train = training_scenes(&cfg).unwrap();
    let started = Instant::now();
    let (model, _) = train_model(&cfg, &train, |_| {}).unwrap();
    let secs = started.elapsed().as_secs_f64();

    let eval = evaluation_scenes(&cfg).unwrap();
    let enc = encode_scenes(&model, &eval).unwrap();
    let recall_by_k = sweep(&enc, &[2, 4, 8, 16], &[2], &cfg.exchange, seed)
        .unwrap()
        .iter()
        .map(|c| c.summary.recall.mean)
        .collect();

    let mut crowded = cfg.clone();
    crowded.apply_preset(Preset::Crowded);
    let crowded_scenes: Vec<ScenePair> = evaluation_scenes(&crowded).unwrap();
    let crowded_enc = encode_scenes(&model, &crowded_scenes).unwrap();

    SeedRun {
        seed,
        secs,
        full: evaluate(&enc, &cfg, Baseline::Full),
        ne: evaluate(&enc, &cfg, Baseline::Ne),
        random: evaluate(&enc, &cfg, Baseline::Random),
        recall_by_k,
        crowded_full: evaluate(&crowded_enc, &crowded, Baseline::Full),
        crowded_random: evaluate(&crowded_enc, &crowded, Baseline::Random),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn learning_efficacy(runs: &[SeedRun]) -> Outcome {
    let full = mean(runs.iter().map(|r| r.full.recall.mean));
    let random = mean(runs.iter().map(|r| r.random.recall.mean));
    let bis = mean(runs.iter().map(|r| r.full.bis.mean));
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: {:.3}/{:.3}/{:.3}",
                r.seed, r.full.recall.mean, r.random.recall.mean, r.full.bis.mean
            )
        })
        .collect();
    outcome(
        full >= random + 0.15 && bis > 1.0 && slowest <= 600.0,
        format!(
            "recall {full:.3} vs random {random:.3} (need +0.15), BIS {bis:.3}; slowest training {slowest:.0}s; [recall/random/BIS] {}",
            per_seed.join(", ")
        ),
    )
}

fn ablation_ordering(runs: &[SeedRun]) -> Outcome {
    let full = mean(runs.iter().map(|r| r.full.bis.mean));
    let ne = mean(runs.iter().map(|r| r.ne.bis.mean));
    let wins = runs.iter().filter(|r| r.full.bis.mean > r.ne.bis.mean).count();
    outcome(
        full >= ne - 0.02 && wins >= 2,
        format!("BIS full {full:.3} vs no graph embedding {ne:.3}; full ahead on {wins}/3 seeds"),
    )
}

fn bandwidth_monotonicity(runs: &[SeedRun]) -> Outcome {
    let by_k: Vec<f64> = (0..4).map(|i| mean(runs.iter().map(|r| r.recall_by_k[i]))).collect();
    let ok = by_k.windows(2).all(|w| w[1] >= w[0] - 0.02);
    outcome(
        ok,
        format!(
            "recall at K = 2, 4, 8, 16: {}",
            by_k.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn crowded_robustness(runs: &[SeedRun]) -> Outcome {
    let full = mean(runs.iter().map(|r| r.crowded_full.recall.mean));
    let random = mean(runs.iter().map(|r| r.crowded_random.recall.mean));
    let scenes = runs[0].crowded_full.scenes;
    outcome(
        full >= random + 0.10,
        format!("{scenes} crowded scenes: recall {full:.3} vs random {random:.3} (need +0.10)"),
    )
}

fn pipeline_bodies(cfg: &ExperimentConfig) -> Vec<String> {
    let train = training_scenes(cfg).unwrap();
    let eval = evaluation_scenes(cfg).unwrap();
    let (model, report) = train_model(cfg, &train, |_| {}).unwrap();
    let enc = encode_scenes(&model, &eval).unwrap();
    let results = evaluate_all(&enc, &cfg.bandwidth, cfg.rounds, &cfg.exchange, cfg.seed).unwrap();
    let cells = sweep(&enc, &cfg.sweep_bandwidths, &cfg.sweep_rounds, &cfg.exchange, cfg.seed).unwrap();
    let hash = cfg.hash();
    vec![
        dataset_to_json(&cfg.scene, &train).unwrap(),
        csv_body(&loss_curve_csv(&hash, &report.curve).unwrap()),
        model.to_json(&hash).unwrap(),
        csv_body(&eval_csv(&hash, &results).unwrap()),
        csv_body(&sweep_csv(&hash, &cells).unwrap()),
    ]
}

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig {
        seed: 9,
        train_scenes: 20,
        eval_scenes: 10,
        ..ExperimentConfig::default()
    };
    cfg.loss.epochs = 3;
    cfg.exchange.baseline = Baseline::Random;
    cfg.bandwidth = BandwidthSpec::PerRound(vec![3]);
    let a = pipeline_bodies(&cfg);
    let b = pipeline_bodies(&cfg);
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    outcome(
        same == a.len(),
        format!("gen/train/eval/sweep outputs identical: {same}/{}", a.len()),
    )
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut lines: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "[{}] {n:>2}. {name} ({secs:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        lines.push((n, name, o, secs));
    };

    run(1, "gradient correctness", &mut gradient_correctness);
    run(2, "normalization invariants", &mut normalization_invariants);
    run(3, "oracle equivalence", &mut oracle_equivalence);
    run(4, "pooling invariance", &mut pooling_invariance);
    run(5, "BIS arithmetic", &mut bis_arithmetic);

    let t = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    println!("     trained and evaluated {} seeds in {:.0}s", runs.len(), t.elapsed().as_secs_f64());
    run(6, "learning efficacy", &mut || learning_efficacy(&runs));
    run(7, "ablation ordering", &mut || ablation_ordering(&runs));
    run(8, "bandwidth monotonicity", &mut || bandwidth_monotonicity(&runs));
    run(9, "crowded robustness", &mut || crowded_robustness(&runs));
    run(10, "determinism", &mut determinism);

    let passed = lines.iter().filter(|l| l.2.pass).count();
    println!("acceptance: {passed}/{} criteria passed", lines.len());
    if strict && passed != lines.len() {
        std::process::exit(1);
    }
}
