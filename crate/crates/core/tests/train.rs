use landmoe::adapter::LandMoeModel;
use landmoe::cli::ablation_variants;
use landmoe::config::Profile;
use landmoe::data::Experiment;
use landmoe::router::Mode;
use landmoe::tensor::Tensor;
use landmoe::train::{batch_gradients, batch_loss, train_run, AdamW, TrainConfig};

fn small() -> TrainConfig {
    let mut c = TrainConfig::desk(Profile::CrossSensor);
    c.train_scenes = 8;
    c.test_scenes = 2;
    c.batch_size = 4;
    c
}

#[test]
fn zero_epochs_matches_freeze() {
    let mut cfg = small();
    cfg.epochs = 0;
    let variants = ablation_variants(&cfg);
    let freeze = train_run(&variants[0].1, None, 1).unwrap();
    let full = train_run(&variants[3].1, None, 1).unwrap();
    assert_eq!(full.history.len(), 1);
    assert_eq!(full.history[0].miou, freeze.history[0].miou);
    assert_eq!(full.history[0].macc, freeze.history[0].macc);
    assert_eq!(full.history[0].per_class_acc, freeze.history[0].per_class_acc);
}

#[test]
fn zero_learning_rate_keeps_metrics() {
    let mut cfg = small();
    cfg.epochs = 2;
    cfg.learning_rate = 0.0;
    let r = train_run(&cfg, None, 1).unwrap();
    for h in &r.history[1..] {
        assert_eq!(h.miou, r.history[0].miou);
        assert_eq!(h.per_class_acc, r.history[0].per_class_acc);
    }
    assert_eq!(r.best_epoch, 0);
}

#[test]
fn fifty_steps_reduce_the_loss() {
    let cfg = small();
    let exp = Experiment::new(cfg.profile, cfg.seed, cfg.model.num_classes, cfg.model.channels);
    let scenes = exp.source_scenes(&cfg.sizes()).unwrap();
    let im: Vec<&Tensor> = scenes[..4].iter().map(|s| &s.image).collect();
    let lb: Vec<&[usize]> = scenes[..4].iter().map(|s| s.labels.as_slice()).collect();
    let mut model = LandMoeModel::new(cfg.model.clone(), 0).unwrap();
    let before = batch_loss(&model, &im, &lb, cfg.lambda, Mode::Eval, 0, 1).unwrap();
    let mut opt = AdamW::default();
    for step in 0..50 {
        let g = batch_gradients(&model, &im, &lb, cfg.lambda, Mode::Train, step, 1, None).unwrap();
        g.store_into(&mut model);
        opt.step(&mut model.store, cfg.learning_rate, cfg.weight_decay).unwrap();
    }
    let after = batch_loss(&model, &im, &lb, cfg.lambda, Mode::Eval, 0, 1).unwrap();
    assert!(after <= 0.95 * before, "{before} -> {after}");
}

#[test]
fn gradients_do_not_depend_on_thread_count() {
    let cfg = small();
    let exp = Experiment::new(cfg.profile, cfg.seed, cfg.model.num_classes, cfg.model.channels);
    let scenes = exp.source_scenes(&cfg.sizes()).unwrap();
    let im: Vec<&Tensor> = scenes.iter().map(|s| &s.image).collect();
    let lb: Vec<&[usize]> = scenes.iter().map(|s| s.labels.as_slice()).collect();
    let mut model = LandMoeModel::new(cfg.model.clone(), 2).unwrap();
    landmoe::train::perturb_trainable(&mut model, 2, 0.2);
    let one = batch_gradients(&model, &im, &lb, 0.1, Mode::Train, 9, 1, None).unwrap();
    let three = batch_gradients(&model, &im, &lb, 0.1, Mode::Train, 9, 3, None).unwrap();
    assert_eq!(one.loss.to_bits(), three.loss.to_bits());
    assert_eq!(one.grads, three.grads);
}
