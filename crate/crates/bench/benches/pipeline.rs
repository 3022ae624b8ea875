use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use compseg_bench::fitted;
use compseg_core::training::{image_objective, ParamView};
use compseg_core::{RunConfig, Segmenter, Supervision};

fn pipeline(c: &mut Criterion) {
    let f = fitted(RunConfig::standard()).expect("fitting the standard world");
    let record = &f.fixture.bench[f.fixture.bench.len() - 1];
    let segmenter = Segmenter::new(f.models.clone(), &f.cfg);

    c.bench_function("responses", |b| b.iter(|| f.models.dictionary.responses(black_box(&record.map)).unwrap()));
    for (name, sup) in [("segment_modal", Supervision::Modal), ("segment_amodal", Supervision::Amodal)] {
        c.bench_function(name, |b| {
            b.iter(|| {
                segmenter
                    .segment(black_box(&record.map), &record.modal_box, Some(&record.amodal_box), sup)
                    .unwrap()
            })
        });
    }

    let params = ParamView::from_models(&f.models, f.cfg.train.train_mu);
    let example = &f.fixture.examples[0];
    c.bench_function("image_objective", |b| {
        b.iter(|| image_objective(&params, &f.models, black_box(example), &f.cfg.train).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = pipeline
}
criterion_main!(benches);
