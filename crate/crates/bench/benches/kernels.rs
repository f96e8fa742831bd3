use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ltm_core::ib::{ibb_grad, LabelTerm, Probe, ProbeDims};
use ltm_core::mask::{merge_tokens, update_mask_raw, MaskMlp, UpdateInputs, UpdateScope};
use ltm_core::transformer::{MaskMode, Model, ModelSpec};
use ltm_core::Rng;

fn probe() -> Probe {
    Probe::random(&mut Rng::new(1), ProbeDims::new(16, 8, 4, 4, 3)).unwrap()
}

fn ib(c: &mut Criterion) {
    let p = probe();
    let labels = LabelTerm::Observed(&p.labels);
    c.bench_function("ibb_grad n16 N8 P4 D4", |b| {
        b.iter(|| ibb_grad(black_box(&p.g), &p.z, &p.phi_input, labels, &p.state).unwrap())
    });
    let inputs = UpdateInputs {
        phi_input: &p.phi_input,
        labels,
        state: &p.state,
        mlp: &MaskMlp::Identity,
        eta: 1.0,
        scope: UpdateScope::Batch,
    };
    c.bench_function("update_mask_raw batch", |b| {
        b.iter(|| update_mask_raw(black_box(&p.g), &p.z, &inputs).unwrap())
    });
}

fn merge(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let z = rng.normal_tensor::<f32>(&[32, 64, 32], 1.0);
    let g = rng.normal_tensor::<f32>(&[64, 16], 1.0);
    c.bench_function("merge_tokens B32 N64 P16 D32", |b| {
        b.iter(|| merge_tokens(black_box(&z), &g).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("toy forward B32");
    let images = Rng::new(3).uniform_tensor::<f32>(&[32, 16, 16], 0.0, 1.0);
    for r in [1.0, 0.5, 0.25] {
        let model = Model::<f32>::init(&ModelSpec::toy(2, r, 3), 0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(r), &model, |b, m| {
            b.iter(|| m.evaluate(black_box(&images), &MaskMode::Bootstrap).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, ib, merge, forward);
criterion_main!(benches);
