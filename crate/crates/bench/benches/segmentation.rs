// SPDX-License-Identifier: MIT OR Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use promptlens_bench::TEXT;
use promptlens_core::segmentation::{aggregate_scores, normalize_for_display, segment, Granularity};
use promptlens_core::Vocabulary;

fn segmentation(c: &mut Criterion) {
    let vocab = Vocabulary::from_corpus(TEXT, 64);
    let prompt = vocab.tokenize(&TEXT.repeat(8));
    let target = vocab.tokenize(TEXT);
    let scores: Vec<f32> = (0..=prompt.len() + target.len()).map(|i| (i % 7) as f32).collect();
    let mut group = c.benchmark_group("segmentation");
    for g in Granularity::BUILTIN {
        group.bench_with_input(BenchmarkId::new("segment", g.name()), &g, |b, g| {
            b.iter(|| segment(&prompt, &target, g).unwrap())
        });
        let segments = segment(&prompt, &target, &g).unwrap();
        group.bench_with_input(BenchmarkId::new("aggregate_and_display", g.name()), &segments, |b, segs| {
            b.iter(|| normalize_for_display(&aggregate_scores(&scores, segs).unwrap(), 0.5).unwrap())
        });
    }
    group.bench_function("tokenize", |b| b.iter(|| vocab.tokenize(TEXT)));
    group.finish();
}

criterion_group!(benches, segmentation);
criterion_main!(benches);
