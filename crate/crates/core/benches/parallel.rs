use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flexcast::data::{make_synthetic, split_chronological, SyntheticSpec};
use flexcast::eval::{evaluate, EvalOptions};
use flexcast::training::{batch_gradient, sample_window_batch, Corpus};
use flexcast::{Exec, Model, ModelConfig, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)];

fn model() -> Model {
    let cfg = ModelConfig {
        d_model: 32,
        ffn_dim: 64,
        n_heads: 4,
        enc_layers: 2,
        dec_layers: 2,
        reference_patch: 24,
        ..ModelConfig::mini()
    };
    Model::new(cfg, 0).unwrap()
}

fn dataset(channels: usize) -> flexcast::data::Dataset {
    make_synthetic(&SyntheticSpec {
        periods: vec![24.0, 12.0],
        amplitudes: vec![1.0, 0.5],
        noise_std: 0.1,
        length: 2400,
        channels,
        seed: 1,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn gradients(c: &mut Criterion) {
    let model = model();
    let corpus = Corpus::new(vec![dataset(4).to_corpus_series(24)]);
    let cfg = TrainConfig {
        batch_size: 32,
        ..TrainConfig::default()
    };
    let batch = sample_window_batch(&corpus, &cfg, model.config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut group = c.benchmark_group("batch_gradient");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradient(&model, &batch, exec).unwrap())
        });
    }
    group.finish();
}

fn forecasting(c: &mut Criterion) {
    let model = model();
    let ds = dataset(16);
    let histories: Vec<Vec<f64>> = ds.channels.iter().map(|ch| ch[..240].to_vec()).collect();
    let mut group = c.benchmark_group("forecast_channels");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.forecast_channels(&histories, 96, 24, exec).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let model = model();
    let ds = dataset(2);
    let split = split_chronological(&ds).unwrap();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in MODES {
        let opts = EvalOptions {
            exec,
            ..EvalOptions::new(vec![48], 24)
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, &ds.name, &split, &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, forecasting, evaluation);
criterion_main!(benches);
