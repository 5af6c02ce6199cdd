use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use sts_bench::fixture;
use sts_core::data_io::{generate, SynthConfig};
use sts_core::trainer::{batch_gradients, build_model, Split};
use sts_core::{MaskSource, Tape};

fn synth(c: &mut Criterion) {
    let cfg = SynthConfig { n_slots: 400, ..SynthConfig::default() };
    let graph = cfg.default_graph().unwrap();
    c.bench_function("generate_4x4_400", |b| b.iter(|| generate(black_box(&cfg), &graph).unwrap()));
}

fn model(c: &mut Criterion) {
    let (ds, graph, cfg) = fixture(4, 4, 200);
    let (model, params) = build_model(&cfg, &graph, ds.n_categories()).unwrap();
    let windows: Vec<usize> = ds.indices(Split::Train).into_iter().take(32).collect();
    let batch = ds.batch(&windows).unwrap();

    c.bench_function("forward_b32", |b| {
        b.iter_batched(
            Tape::new,
            |mut tape| {
                let bound = params.bind(&mut tape, false);
                model.forward(&mut tape, &bound, &batch.inputs, MaskSource::Predicted).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    c.bench_function("forward_backward_b32", |b| {
        b.iter(|| batch_gradients(&model, &params, &ds, black_box(&windows), cfg.mask_mode, 32).unwrap())
    });
}

criterion_group!(benches, synth, model);
criterion_main!(benches);
