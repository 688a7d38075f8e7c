//! Sequential vs rayon execution of the data-parallel paths.
//!
//! Built without the `parallel` feature both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use attrfuse::config::RunConfig;
use attrfuse::data::DatasetId;
use attrfuse::exec::{self, ExecMode};
use attrfuse::gradcheck::build_case;
use attrfuse::model::ModelState;
use attrfuse::numerics::{kernels, RngState, Tensor};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 192] {
        let mut rng = RngState::new(1);
        let a = rng.gaussian_vec(n * n, 1.0);
        let b = rng.gaussian_vec(n * n, 1.0);
        for (label, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(label, n), &n, |bench, &n| {
                exec::set_mode(mode);
                bench.iter(|| kernels::matmul(&a, &b, n, n, n));
            });
        }
    }
    group.finish();
}

fn bench_eval(c: &mut Criterion) {
    let cfg = RunConfig::toy();
    let specs: Vec<_> = cfg
        .datasets
        .iter()
        .map(|d| {
            let mut s = d.spec();
            s.positive_rates = vec![0.5; s.attribute_count()];
            s
        })
        .collect();
    let model = ModelState::new(&cfg.model, &specs, &cfg.query_modes(), cfg.seed).unwrap();
    let spec = &specs[1];
    let id = DatasetId::new(&cfg.datasets[1].id);
    let mut rng = RngState::new(2);
    let frames: Vec<Tensor> = (0..32)
        .map(|_| {
            Tensor::new(
                &[spec.frame_count, spec.channels, spec.height, spec.width],
                rng.gaussian_vec(spec.frame_len(), 1.0),
            )
            .unwrap()
        })
        .collect();
    let mut group = c.benchmark_group("predict_eval_32");
    group.sample_size(10);
    for (label, mode) in MODES {
        group.bench_function(label, |bench| {
            exec::set_mode(mode);
            bench.iter(|| model.predict_eval(&frames, &id).unwrap());
        });
    }
    group.finish();
}

fn bench_gradcheck(c: &mut Criterion) {
    let case = build_case("encoder_layer").unwrap();
    let mut group = c.benchmark_group("finite_differences_encoder_layer");
    group.sample_size(10);
    for (label, mode) in MODES {
        group.bench_function(label, |bench| {
            exec::set_mode(mode);
            bench.iter(|| case.numeric(1e-5).unwrap());
        });
    }
    group.finish();
}

fn bench_synthetic(c: &mut Criterion) {
    let cfg = RunConfig::toy();
    let mut syn = cfg.synthetic_spec(&cfg.datasets[2]).unwrap();
    syn.spec.train_size = 64;
    syn.spec.val_size = 0;
    let mut group = c.benchmark_group("render_64_event_samples");
    group.sample_size(10);
    for (label, mode) in MODES {
        group.bench_function(label, |bench| {
            exec::set_mode(mode);
            bench.iter(|| attrfuse::data::synthetic::render_all(&syn, 605).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_eval, bench_gradcheck, bench_synthetic);
criterion_main!(benches);
