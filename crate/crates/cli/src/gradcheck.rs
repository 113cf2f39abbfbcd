//! Quick finite-difference verification of the differentiation engine,
//! exposed as the `gradcheck` subcommand. Prints one line per check.

use rand::Rng;

use vmdnet_core::forecaster::{Batch, ModelConfig, VmdNetModel};
use vmdnet_core::nn::{NodeId, ParamStore, Tape, Tensor};
use vmdnet_core::rng::stream_rng;
use vmdnet_core::windowing::TIME_FEATURE_DIM;

pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rand_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_rel_err<F>(store: &mut ParamStore, build: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> NodeId,
{
    store.zero_grads();
    let mut tape = Tape::new(true, 7);
    let loss = build(&mut tape, store);
    tape.backward(loss, store).expect("backward");

    let h = 1e-4;
    let mut worst = 0.0f64;
    for name in store.names().map(String::from).collect::<Vec<_>>() {
        let n = store.value(&name).unwrap().numel();
        for j in 0..n {
            let orig = store.value(&name).unwrap().data()[j];
            store.value_mut(&name).unwrap().data_mut()[j] = orig + h;
            let mut tp = Tape::new(true, 7);
            let lp = build(&mut tp, store);
            let fp = tp.value(lp).item();
            store.value_mut(&name).unwrap().data_mut()[j] = orig - h;
            let mut tm = Tape::new(true, 7);
            let lm = build(&mut tm, store);
            let fm = tm.value(lm).item();
            store.value_mut(&name).unwrap().data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = store.grad(&name).unwrap().data()[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn run_all() -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut push = |name: &str, err: f64, tol: f64| {
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err: err,
            passed: err <= tol,
        });
    };

    {
        let mut rng = stream_rng(1, "gradcheck-linear", 0);
        let mut store = ParamStore::new();
        store.add("w", rand_tensor(&[4, 5], &mut rng)).unwrap();
        store.add("b", rand_tensor(&[5], &mut rng)).unwrap();
        let x = rand_tensor(&[3, 4], &mut rng);
        let t = rand_tensor(&[3, 5], &mut rng);
        let err = max_rel_err(&mut store, move |tape, store| {
            let xi = tape.constant(x.clone());
            let w = tape.param(store, "w").unwrap();
            let b = tape.param(store, "b").unwrap();
            let y = tape.linear(xi, w, b).unwrap();
            tape.mse_loss(y, &t).unwrap()
        });
        push("linear", err, 1e-4);
    }
    {
        let mut rng = stream_rng(2, "gradcheck-conv", 0);
        let mut store = ParamStore::new();
        store.add("w", rand_tensor(&[3, 2, 3], &mut rng)).unwrap();
        store.add("b", rand_tensor(&[3], &mut rng)).unwrap();
        let x = rand_tensor(&[2, 2, 8], &mut rng);
        let t = rand_tensor(&[2, 3, 8], &mut rng);
        let err = max_rel_err(&mut store, move |tape, store| {
            let xi = tape.constant(x.clone());
            let w = tape.param(store, "w").unwrap();
            let b = tape.param(store, "b").unwrap();
            let y = tape.conv1d_causal(xi, w, b, 2).unwrap();
            tape.mse_loss(y, &t).unwrap()
        });
        push("conv1d_causal", err, 1e-4);
    }
    {
        let mut rng = stream_rng(3, "gradcheck-gelu", 0);
        let mut store = ParamStore::new();
        store.add("w", rand_tensor(&[3, 3], &mut rng)).unwrap();
        store.add("b", rand_tensor(&[3], &mut rng)).unwrap();
        let x = rand_tensor(&[4, 3], &mut rng);
        let t = rand_tensor(&[4, 3], &mut rng);
        let err = max_rel_err(&mut store, move |tape, store| {
            let xi = tape.constant(x.clone());
            let w = tape.param(store, "w").unwrap();
            let b = tape.param(store, "b").unwrap();
            let y = tape.linear(xi, w, b).unwrap();
            let z = tape.gelu(y);
            let z = tape.dropout(z, 0.2).unwrap();
            tape.mse_loss(z, &t).unwrap()
        });
        push("gelu+dropout", err, 1e-4);
    }
    {
        // Tiny end-to-end model: K=2, P=16, F=4, d_model=8.
        let config = ModelConfig {
            num_modes: 2,
            lookback: 16,
            horizon: 4,
            d_model: 8,
            tcn_channels: vec![8],
            kernel_size: 3,
            dropout: 0.0,
            rng_seed: 11,
            ..ModelConfig::default()
        };
        let model = VmdNetModel::new(config.clone()).unwrap();
        let mut rng = stream_rng(4, "gradcheck-e2e", 0);
        let batch = Batch {
            modes: rand_tensor(&[2, 2, 16], &mut rng),
            omegas: Tensor::from_vec(&[2, 2], vec![0.1, 0.3, 0.12, 0.28]).unwrap(),
            time: rand_tensor(&[2, 16, TIME_FEATURE_DIM], &mut rng),
            target: rand_tensor(&[2, 4], &mut rng),
        };
        let mut store = model.store.clone();
        let err = max_rel_err(&mut store, move |tape, store| {
            let mut m = model.clone();
            m.store = store.clone();
            let out = m.forward(tape, &batch).unwrap();
            tape.mse_loss(out, &batch.target).unwrap()
        });
        push("end_to_end_model", err, 1e-3);
    }
    results
}
