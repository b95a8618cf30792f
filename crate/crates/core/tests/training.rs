mod common;

use stcoid::config::ExperimentConfig;
use stcoid::experiment::{train_model, training_scenes};
use stcoid::trainer::{loss_and_grad, train, LossConfig, TrainingExample};
use stcoid::CoidModel;

fn standard(epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.loss.epochs = epochs;
    cfg
}

#[test]
fn loss_falls_over_the_first_epochs() {
    let cfg = standard(5);
    let scenes = training_scenes(&cfg).unwrap();
    let (_, report) = train_model(&cfg, &scenes, |_| {}).unwrap();
    assert_eq!(report.curve.len(), 6);
    assert!(
        report.curve[5].train_loss <= report.curve[1].train_loss,
        "{:?}",
        report.curve
    );
}

#[test]
fn same_seed_same_curve_and_parameters() {
    let mut cfg = standard(2);
    cfg.train_scenes = 30;
    let scenes = training_scenes(&cfg).unwrap();
    let (m1, r1) = train_model(&cfg, &scenes, |_| {}).unwrap();
    let (m2, r2) = train_model(&cfg, &scenes, |_| {}).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(m1.params.values(), m2.params.values());
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let cfg = standard(0).resolved();
    let scenes = &training_scenes(&cfg).unwrap()[..10];
    let mut model = CoidModel::new(cfg.model.clone()).unwrap();
    let before = model.params.values().to_vec();
    let report = train(&mut model, scenes, &cfg.loss).unwrap();
    assert_eq!(model.params.values(), &before[..]);
    assert_eq!(report.curve.len(), 1);
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = standard(1).resolved();
    let scenes = training_scenes(&cfg).unwrap();
    let model = CoidModel::new(cfg.model.clone()).unwrap();
    let mut touched = vec![false; model.params.len()];
    for scene in &scenes[..40] {
        let ex = TrainingExample::from_scene(scene, &model).unwrap();
        let (_, grads) = loss_and_grad(&model, &ex, &cfg.loss).unwrap();
        for (flag, g) in touched.iter_mut().zip(&grads) {
            *flag |= g.data().iter().any(|&x| x != 0.0);
        }
    }
    let dead: Vec<&str> = model
        .params
        .names()
        .iter()
        .zip(&touched)
        .filter(|(_, &t)| !t)
        .map(|(n, _)| n.as_str())
        .collect();
    assert!(dead.is_empty(), "no gradient reached {dead:?}");
}

#[test]
fn invalid_loss_settings_are_rejected_before_training() {
    let cfg = standard(1).resolved();
    let scenes = &training_scenes(&cfg).unwrap()[..4];
    let mut model = CoidModel::new(cfg.model.clone()).unwrap();
    let bad = LossConfig {
        delta_p: 1.5,
        delta_n: 1.0,
        ..cfg.loss.clone()
    };
    assert!(train(&mut model, scenes, &bad).is_err());
    assert!(train(&mut model, &[], &cfg.loss).is_err());
}
