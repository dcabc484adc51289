use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unlearn_forge::model::{forward, init_model, loss_and_grad, ModelConfig, TrainExample};
use unlearn_forge::parallel::{par_map, seq_map};

fn batch(cfg: &ModelConfig, n: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..n)
        .map(|_| {
            (0..cfg.context_len)
                .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
                .collect()
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let cfg = ModelConfig {
        layers: 2,
        heads: 4,
        embed_dim: 64,
        context_len: 128,
        vocab_size: 512,
        seed: 1,
    };
    let model = init_model(cfg).unwrap();
    let seqs = batch(&cfg, 8);

    let mut g = c.benchmark_group("forward_batch");
    g.bench_function("par_map", |b| {
        b.iter(|| par_map(&seqs, |s| forward(&model, s).unwrap().rows))
    });
    g.bench_function("seq_map", |b| {
        b.iter(|| seq_map(&seqs, |s| forward(&model, s).unwrap().rows))
    });
    g.finish();

    let examples: Vec<TrainExample> = seqs.iter().map(|s| TrainExample::next_token(s)).collect();
    let mut g = c.benchmark_group("loss_and_grad");
    let name = if unlearn_forge::parallel::is_parallel() {
        "parallel_feature"
    } else {
        "sequential_feature"
    };
    g.bench_function(name, |b| {
        b.iter(|| loss_and_grad(&model, &examples).unwrap().loss_sum)
    });
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
