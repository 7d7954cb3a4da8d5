use audiomamba::model::Model;
use audiomamba::train::{evaluate, synthetic_dataset, EvalMode, RunConfig, Trainer};

#[test]
fn fixed_batch_loss_strictly_decreases() {
    let mut cfg = RunConfig::toy(8);
    cfg.train.lr = 1e-3;
    cfg.train.warmup_steps = 0;
    let data = synthetic_dataset(8, 8, &cfg.frontend(), 0).unwrap();
    let rows: Vec<usize> = (0..8).collect();
    let (batch, targets) = Trainer::assemble(&data, &rows).unwrap();
    let mut trainer = Trainer::new(Model::new(cfg.model.clone(), 0).unwrap(), cfg.train).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| trainer.train_step(&batch, &targets, &rows).unwrap().loss).collect();
    for (i, w) in losses.windows(2).enumerate() {
        assert!(w[1] < w[0], "loss rose at step {}: {} -> {}", i + 1, w[0], w[1]);
    }
}

#[test]
fn random_weights_score_near_chance() {
    let cfg = RunConfig::toy(8);
    let data = synthetic_dataset(64, 8, &cfg.frontend(), 100).unwrap();
    let model = Model::<f32>::new(cfg.model, 7).unwrap();
    let report = evaluate(&model, &data, EvalMode::MultiLabel).unwrap();
    assert!((0.4..=0.6).contains(&report.mauc), "mAUC {}", report.mauc);
}
