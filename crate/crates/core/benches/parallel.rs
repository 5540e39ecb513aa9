use attriprior::attrib::{expected_gradients_matrix, ReferenceSet, Target};
use attriprior::bench::{run_all_18, MaskKind, MaskingStrategy};
use attriprior::data::gen_correlated_groups_60;
use attriprior::nn::{init_model, Activation, InputShape, ModelSpec};
use attriprior::par::Exec;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn exec_modes(c: &mut Criterion) {
    let d = gen_correlated_groups_60(400, 1).unwrap();
    let model = init_model(&ModelSpec::mlp(InputShape::Flat(60), &[32, 16], Activation::Identity), 1).unwrap();
    let refs = ReferenceSet::new(d.x.clone()).unwrap();
    let x = d.x.slice(ndarray::s![..32, ..]).to_owned();
    let strategies: Vec<MaskingStrategy> =
        MaskKind::ALL.iter().map(|&k| MaskingStrategy::new(k, 8, 1).fit(d.x.view()).unwrap()).collect();
    let phi = expected_gradients_matrix(&model, x.view(), &refs, 100, 1, &Target::First, Exec::Sequential).unwrap();

    let mut g = c.benchmark_group("expected_gradients_32x60_k100");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| expected_gradients_matrix(&model, black_box(x.view()), &refs, 100, 1, &Target::First, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("run_all_18_32x60");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| run_all_18(&model, black_box(x.view()), &phi, &strategies, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, exec_modes);
criterion_main!(benches);
