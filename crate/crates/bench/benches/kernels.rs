use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use orthoproto::data::{generate_synthetic, make_split, SyntheticConfig};
use orthoproto::metrics::{auroc, oscr, EvalRecord};
use orthoproto::model::init_model;
use orthoproto::ndnum::matmul_values;
use orthoproto::training::{sample_batch, sgd_step, Experiment, RunState};
use orthoproto::{Tape, Tensor};

fn ramp(n: usize, k: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 * k).sin() * 3.0).fract()).collect()
}

fn tape_kernels(c: &mut Criterion) {
    let (m, k, n) = (64, 64, 64);
    let a = ramp(m * k, 0.37);
    let b = ramp(k * n, 0.91);
    c.bench_function("matmul_64", |bch| bch.iter(|| matmul_values(black_box(&a), black_box(&b), m, k, n)));
    c.bench_function("matmul_backward_64", |bch| {
        bch.iter(|| {
            let mut t = Tape::new();
            let x = t.param(Tensor::matrix(m, k, a.clone()).unwrap());
            let w = t.param(Tensor::matrix(k, n, b.clone()).unwrap());
            let y = t.matmul(x, w).unwrap();
            let r = t.relu(y);
            let s = t.sum(r);
            t.backward(s).unwrap();
            black_box(t.grad(w))
        })
    });
}

fn metric_kernels(c: &mut Criterion) {
    let recs: Vec<EvalRecord> = ramp(4000, 0.13)
        .into_iter()
        .enumerate()
        .map(|(i, s)| if i % 3 == 0 { EvalRecord::unknown(i % 5, s) } else { EvalRecord::known(i % 5, (i / 2) % 5, s + 0.2) })
        .collect();
    c.bench_function("auroc_4000", |b| b.iter(|| auroc(black_box(&recs)).unwrap()));
    c.bench_function("oscr_4000", |b| b.iter(|| oscr(black_box(&recs)).unwrap()));
}

fn sgd_kernel(c: &mut Criterion) {
    let exp = Experiment::benchmark();
    let ds = generate_synthetic(&SyntheticConfig::benchmark(0)).unwrap();
    let split = make_split(&ds, exp.n_known, exp.test_fraction, 0).unwrap();
    let model = init_model(&exp.encoder(), exp.n_known, 0).unwrap();
    let obj = exp.train.objective();
    let lr = exp.train.learning_rate;
    c.bench_function("sgd_step_benchmark", |b| {
        b.iter_batched(
            || {
                let mut st = RunState::new(model.clone(), 0);
                let batch = sample_batch(&split, &ds, &exp.train, &mut st.rng).unwrap();
                (st, batch)
            },
            |(mut st, batch)| sgd_step(&mut st, &batch, &obj, lr).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, tape_kernels, metric_kernels, sgd_kernel);
criterion_main!(benches);
