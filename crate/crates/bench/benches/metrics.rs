use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ragforge_bench::sentence;
use ragforge_core::evaluate::{bleu, exact_match, rouge_l, token_f1};

fn text_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: Vec<(String, Vec<String>)> = (0..1_000)
        .map(|_| (sentence(&mut rng, 20, 300), vec![sentence(&mut rng, 20, 300), sentence(&mut rng, 8, 300)]))
        .collect();
    let mut g = c.benchmark_group("answer_metrics_x1000");
    g.bench_function("em", |b| b.iter(|| pairs.iter().map(|(p, gs)| exact_match(p, gs)).sum::<f64>()));
    g.bench_function("f1", |b| b.iter(|| pairs.iter().map(|(p, gs)| token_f1(p, gs)).sum::<f64>()));
    g.bench_function("bleu", |b| b.iter(|| pairs.iter().map(|(p, gs)| bleu(black_box(p), gs)).sum::<f64>()));
    g.bench_function("rouge_l", |b| b.iter(|| pairs.iter().map(|(p, gs)| rouge_l(p, gs)).sum::<f64>()));
    g.finish();
}

criterion_group!(benches, text_metrics);
criterion_main!(benches);
