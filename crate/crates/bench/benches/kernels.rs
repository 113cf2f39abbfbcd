use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use vmdnet_core::criteria::{fit_ar, mutual_information};
use vmdnet_core::forecaster::{Batch, ModelConfig, TrainHyper, VmdNetModel};
use vmdnet_core::nn::{Tape, Tensor};
use vmdnet_core::synthetic::{multi_tone, uniform_noise};
use vmdnet_core::vmd::{decompose, VmdConfig};
use vmdnet_core::windowing::TIME_FEATURE_DIM;
use vmdnet_core::Signal;

fn bench_decompose(c: &mut Criterion) {
    let mut group = c.benchmark_group("vmd_decompose_two_tone");
    for n in [256usize, 512, 1024] {
        let signal = Signal::new(multi_tone(n, &[(0.013, 1.0), (0.119, 0.5)])).unwrap();
        let cfg = VmdConfig {
            num_modes: 2,
            bandwidth_penalty: 2000.0,
            ..VmdConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| decompose(black_box(&signal), black_box(&cfg)).unwrap())
        });
    }
    group.finish();
}

fn bench_criteria(c: &mut Criterion) {
    let x = uniform_noise(2048, 1);
    let y = uniform_noise(2048, 2);
    c.bench_function("mutual_information_2048x16", |b| {
        b.iter(|| mutual_information(black_box(&x), black_box(&y), 16).unwrap())
    });
    let series = multi_tone(2048, &[(0.02, 1.0), (0.15, 0.5)]);
    c.bench_function("fit_ar2_2048", |b| {
        b.iter(|| fit_ar(black_box(&series), 2).unwrap())
    });
}

fn bench_model_step(c: &mut Criterion) {
    let config = ModelConfig {
        num_modes: 3,
        lookback: 96,
        horizon: 24,
        d_model: 16,
        tcn_channels: vec![16, 16],
        kernel_size: 3,
        dropout: 0.0,
        rng_seed: 1,
        ..ModelConfig::default()
    };
    let mut model = VmdNetModel::new(config.clone()).unwrap();
    let bsz = 16;
    let n = |d: &[usize]| -> Tensor {
        let count: usize = d.iter().product();
        Tensor::from_vec(d, (0..count).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    };
    let batch = Batch {
        modes: n(&[bsz, 3, 96]),
        omegas: n(&[bsz, 3]),
        time: n(&[bsz, 96, TIME_FEATURE_DIM]),
        target: n(&[bsz, 24]),
    };
    let hyper = TrainHyper::default();
    c.bench_function("forward_backward_adam_step_b16", |b| {
        b.iter(|| {
            model.store.zero_grads();
            let mut tape = Tape::new(true, 3);
            let out = model.forward(&mut tape, &batch).unwrap();
            let loss = tape.mse_loss(out, &batch.target).unwrap();
            tape.backward(loss, &mut model.store).unwrap();
            model
                .store
                .adam_step(hyper.learning_rate, 0.9, 0.999, 1e-8);
        })
    });
}

criterion_group!(benches, bench_decompose, bench_criteria, bench_model_step);
criterion_main!(benches);
