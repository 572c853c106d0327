use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ktbench::metrics::auc;
use ktbench::models::loss_and_grad;
use ktbench::preprocess::window_all;
use ktbench::protocols::{eval_all_in_one, eval_one_by_one, eval_question_level, FusionMechanism};
use ktbench_bench::{dkt, sakt, sequences};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let scores: Vec<f64> = (0..100_000).map(|_| rng.gen()).collect();
    let labels: Vec<u8> = (0..100_000).map(|_| rng.gen_range(0..2)).collect();
    c.bench_function("auc_100k", |b| b.iter(|| auc(black_box(&scores), black_box(&labels))));
}

fn bench_protocols(c: &mut Criterion) {
    let (n, seqs) = sequences(100, 50);
    let model = dkt(n);
    c.bench_function("dkt_all_in_one", |b| b.iter(|| eval_all_in_one(&model, black_box(&seqs))));
    c.bench_function("dkt_one_by_one", |b| b.iter(|| eval_one_by_one(&model, black_box(&seqs))));
    c.bench_function("dkt_question_level_lf_avg", |b| {
        b.iter(|| eval_question_level(&model, black_box(&seqs), FusionMechanism::LfAvg))
    });
    let model = sakt(n);
    c.bench_function("sakt_all_in_one", |b| b.iter(|| eval_all_in_one(&model, black_box(&seqs))));
}

fn bench_training_step(c: &mut Criterion) {
    let (n, seqs) = sequences(64, 50);
    let windows = window_all(&seqs, 200).unwrap();
    let model = dkt(n);
    c.bench_function("dkt_loss_and_grad_batch64", |b| {
        b.iter(|| loss_and_grad(&model, black_box(&windows), None))
    });
    let model = sakt(n);
    c.bench_function("sakt_loss_and_grad_batch64", |b| {
        b.iter(|| loss_and_grad(&model, black_box(&windows), None))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_auc, bench_protocols, bench_training_step
}
criterion_main!(benches);
