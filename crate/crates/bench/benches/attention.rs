use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spectra_bench::{attention_config, ENTITY_COUNTS};
use spectra_core::props::complexity::{Layer, Probe};
use std::hint::black_box;

fn attention_layers(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_layer");
    for n in ENTITY_COUNTS {
        let probe = Probe::new(attention_config(), n, n as u64);
        for layer in [Layer::Saqa, Layer::SelfAttention] {
            group.bench_with_input(BenchmarkId::new(layer.to_string(), n), &n, |b, _| {
                b.iter(|| black_box(probe.run(layer).expect("forward")))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, attention_layers);
criterion_main!(benches);
