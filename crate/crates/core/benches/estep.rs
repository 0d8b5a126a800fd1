use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use segdiscover::data::{generate_synthetic, FeatureSequence, SynthConfig};
use segdiscover::model::ModelConfig;
use segdiscover::numcore::Rng;
use segdiscover::par::Exec;
use segdiscover::trainer::{self_label_batch, TrainConfig, TrainState};

fn estep(c: &mut Criterion) {
    let ds = generate_synthetic(&SynthConfig {
        n_videos: 8,
        null_prob: 0.5,
        len_jitter: 5.0,
        ..SynthConfig::new(5)
    })
    .unwrap();
    let model = ModelConfig { state_dim: 32, hidden_dim: 32, ..ModelConfig::new(5, 16) };
    let mut group = c.benchmark_group("estep");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let cfg = TrainConfig { exec, ..TrainConfig::new(model.clone()) };
        let state = TrainState::init(&cfg, &ds).unwrap();
        let videos: Vec<&FeatureSequence> = ds.videos.iter().collect();
        let rngs: Vec<Rng> = (0..videos.len()).map(|i| Rng::new(7).substream(&[i as u64])).collect();
        group.bench_with_input(BenchmarkId::new("self_label_batch", format!("{exec:?}")), &cfg, |b, cfg| {
            b.iter(|| self_label_batch(&state.model, black_box(&videos), &rngs, cfg, &state.lengths).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, estep);
criterion_main!(benches);
