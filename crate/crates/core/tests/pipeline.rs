use flexcast::data::{make_synthetic, split_chronological, SyntheticSpec};
use flexcast::eval::{evaluate, EvalOptions};
use flexcast::training::{load_checkpoint, save_checkpoint, Corpus};
use flexcast::{Exec, Model, ModelConfig, TrainConfig, Trainer};

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        ffn_dim: 32,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        reference_patch: 24,
        fixed_patch: 24,
        ..ModelConfig::mini()
    }
}

fn train_config(steps: u64) -> TrainConfig {
    TrainConfig {
        lr_init: 1e-3,
        batch_size: 16,
        steps_per_epoch: 100,
        steps,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn train_save_resume_evaluate() {
    let ds = make_synthetic(&SyntheticSpec {
        periods: vec![24.0, 12.0],
        amplitudes: vec![1.0, 0.5],
        noise_std: 0.1,
        length: 3000,
        channels: 2,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let split = split_chronological(&ds).unwrap();
    let corpus = Corpus::new(vec![ds.to_corpus_series(24)]);
    let opts = EvalOptions::new(vec![24, 48], 24);

    let untrained = Model::new(small_config(), 1).unwrap();
    let before = evaluate(&untrained, &ds.name, &split, &opts).unwrap().mean_mse();

    let mut trainer = Trainer::new(untrained, train_config(120)).unwrap();
    let losses = trainer.fit(&corpus, 60, |_, _| {}).unwrap();
    assert_eq!(losses.len(), 60);
    assert!(losses.iter().all(|l| l.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&path, &trainer.checkpoint()).unwrap();
    let reloaded = load_checkpoint(&path).unwrap();
    assert_eq!(reloaded.step, 60);

    let mut resumed = Trainer::resume(reloaded.clone(), train_config(120)).unwrap();
    let mut again = Trainer::resume(reloaded, train_config(120)).unwrap();
    let rest_a = trainer.fit(&corpus, 60, |_, _| {}).unwrap();
    let rest_b = resumed.fit(&corpus, 60, |_, _| {}).unwrap();
    let rest_c = again.fit(&corpus, 60, |_, _| {}).unwrap();
    assert_eq!(rest_b, rest_c);
    assert_eq!(resumed.model().weights(), again.model().weights());
    // Checkpoints store f32, so the resumed run only tracks the original.
    let drift = rest_a.iter().zip(&rest_b).map(|(a, b)| (a - b).abs() / a).fold(0.0, f64::max);
    assert!(drift < 1e-3, "relative loss drift {drift:.2e}");

    let model = resumed.into_model();
    let after = evaluate(&model, &ds.name, &split, &opts).unwrap();
    assert!(after.mean_mse() < 0.5 * before, "before {before}, after {}", after.mean_mse());

    let seq = evaluate(&model, &ds.name, &split, &EvalOptions { exec: Exec::Sequential, ..opts.clone() }).unwrap();
    assert_eq!(after.metrics, seq.metrics);
}
