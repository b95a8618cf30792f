mod common;

use stcoid::numcore::{grad_check, Tensor};
use stcoid::trainer::{circle_loss, total_loss, GraphAnchor, LossConfig, MarginForm, NodeAnchoring};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn check_full_loss(cfg: &LossConfig, seed: u64) {
    let model = common::small_model(seed);
    let (graphs, gt) = common::tiny_pair();
    let theta: Vec<Tensor> = model.params.values().to_vec();
    let report = grad_check(
        |tape, p| Ok(total_loss(&model, tape, p, &graphs, &gt, cfg)?.0),
        &theta,
        STEP,
    )
    .unwrap();
    assert!(report.passes(TOL), "{cfg:?}: {report:?}");
    assert_eq!(report.checked, model.params.scalar_count());
}

#[test]
fn full_loss_gradient_default_form() {
    check_full_loss(&LossConfig::default(), 1);
}

#[test]
fn full_loss_gradient_printed_variants() {
    let cfg = LossConfig {
        margin_form: MarginForm::TwoSided,
        node_anchoring: NodeAnchoring::Printed,
        graph_anchor: GraphAnchor::Own,
        gamma: 2.0,
        delta_p: 0.5,
        ..LossConfig::default()
    };
    check_full_loss(&cfg, 2);
}

#[test]
fn circle_loss_gradient_on_three_node_toy() {
    let cfg = LossConfig {
        gamma: 2.0,
        delta_p: 0.5,
        ..LossConfig::default()
    };
    // embeddings of one anchor against three other-graph nodes
    let theta = [
        Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap(),
        Tensor::matrix(3, 3, vec![0.2, -0.1, 1.0, 0.9, 0.1, -0.3, -0.5, 0.7, 0.1]).unwrap(),
    ];
    let pos = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
    let neg = Tensor::matrix(1, 3, vec![0.0, 1.0, 1.0]).unwrap();
    for form in [MarginForm::OneSided, MarginForm::TwoSided] {
        let cfg = LossConfig {
            margin_form: form,
            ..cfg.clone()
        };
        let report = grad_check(
            |_, p| circle_loss(p[0].pairwise_dist(p[1])?, &pos, &neg, &cfg),
            &theta,
            STEP,
        )
        .unwrap();
        assert!(report.passes(TOL), "{form:?}: {report:?}");
    }
}

#[test]
fn squared_embedding_norm_gradient_without_normalization() {
    let mut model = common::small_model(4);
    model.config.normalize_nodes = false;
    let (graphs, _) = common::tiny_pair();
    let theta: Vec<Tensor> = model.params.values().to_vec();
    let report = grad_check(
        |tape, p| {
            let m = model.forward(tape, p, &graphs.0)?.nodes.m;
            Ok(m.mul(m)?.sum())
        },
        &theta,
        STEP,
    )
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
}
