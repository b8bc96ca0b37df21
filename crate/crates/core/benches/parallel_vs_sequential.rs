use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use socialalign_core::model::train::{eval_loss, train_step};
use socialalign_core::model::{PromptSequence, ToyModel, ToyModelConfig, TrainState};
use socialalign_core::retrieval::Bm25Index;
use socialalign_core::Execution;

const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn sequences(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<PromptSequence> {
    (0..n)
        .map(|_| {
            let mut pick = |len: usize| -> Vec<usize> { (0..len).map(|_| rng.random_range(0..vocab - 1)).collect() };
            let (p, h, n, r) = (pick(12), pick(24), pick(8), pick(10));
            PromptSequence::from_segments(&p, &h, &n, vocab - 1, &r).unwrap()
        })
        .collect()
}

fn model_config() -> ToyModelConfig {
    ToyModelConfig {
        vocab_size: 64,
        d_model: 32,
        n_heads: 4,
        context_len: 64,
        gate_hidden: 16,
        grad_accum: 8,
        ..Default::default()
    }
}

fn batch_gradients(c: &mut Criterion) {
    let cfg = model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = sequences(8, cfg.vocab_size, &mut rng);
    let mut group = c.benchmark_group("train_step");
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut m = ToyModel::init(&cfg, 0).unwrap();
            let mut st = TrainState::new(&m, 0);
            b.iter(|| train_step(&mut m, &mut st, &batch, exec).unwrap())
        });
    }
    group.finish();
}

fn batch_eval(c: &mut Criterion) {
    let cfg = model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seqs = sequences(32, cfg.vocab_size, &mut rng);
    let m = ToyModel::init(&cfg, 0).unwrap();
    let mut group = c.benchmark_group("eval_loss");
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| eval_loss(&m, &seqs, exec).unwrap()));
    }
    group.finish();
}

fn bm25_scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let docs: Vec<String> = (0..20_000)
        .map(|_| {
            let len = rng.random_range(5..30);
            (0..len).map(|_| format!("w{}", rng.random_range(0..2000))).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let index = Bm25Index::with_defaults(&docs);
    let query = "w1 w17 w256 w999 w1500";
    let mut group = c.benchmark_group("bm25_top10");
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| index.retrieve_topk_with(query, 10, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, batch_eval, bm25_scoring);
criterion_main!(benches);
