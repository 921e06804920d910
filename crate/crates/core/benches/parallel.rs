//! Sequential vs rayon fan-out for the three data-parallel hot paths:
//! finite-difference gradient checking, batched forecasting and dataset
//! loss. Build with `--no-default-features` to see the fallback only.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use egpde_core::data::{synthetic_series, DataConfig, PreparedData, SyntheticSpec};
use egpde_core::eval::forecast_windows;
use egpde_core::gradcheck::{grad_check, objective, GradCheckConfig};
use egpde_core::model::{AblationMode, EgpdeNet, ModelConfig, ModelInput};
use egpde_core::ode::SolverConfig;
use egpde_core::training::{dataset_mse, mse_loss};
use egpde_core::{Execution, Tensor};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn prepared(window: usize) -> PreparedData {
    let series = synthetic_series(&SyntheticSpec { rows: 1200, ..SyntheticSpec::default() }, 1);
    let cfg = DataConfig {
        window,
        horizon: 2,
        half_rate: true,
    };
    PreparedData::new(series, &cfg, None).unwrap()
}

fn gradcheck(c: &mut Criterion) {
    let data = prepared(5);
    let cfg = ModelConfig {
        window: 5,
        n_exogenous: data.n_exogenous(),
        horizon: 2,
        latent: 4,
        rnn_hidden: 8,
        d_model: 4,
        heads: 2,
        ablation: AblationMode::Full,
    };
    let model = EgpdeNet::new(cfg, 0).unwrap();
    let samples = &data.train[..2];
    let input = ModelInput::from_windows(samples).unwrap();
    let truth = Tensor::matrix(2, 2, samples.iter().flat_map(|s| s.targets.clone()).collect()).unwrap();
    let solver = SolverConfig::rk4(0.1);
    let f = objective(|tape, vars| {
        let p = model.params().bind_vars(vars);
        let pred = model.forecast(&p, tape, &input, &[1.0, 2.0], &solver)?.predictions;
        Ok(mse_loss(pred, tape.constant(&truth))?)
    });
    let params: Vec<(String, Tensor)> = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();

    let mut group = c.benchmark_group("gradcheck_tiny");
    group.sample_size(10);
    for (name, execution) in MODES {
        let check = GradCheckConfig {
            execution,
            ..GradCheckConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| grad_check(&f, &params, &check).unwrap())
        });
    }
    group.finish();
}

fn forecasting(c: &mut Criterion) {
    let data = prepared(20);
    let model = EgpdeNet::new(ModelConfig::new(20, data.n_exogenous(), 2), 0).unwrap();
    let windows: Vec<_> = data.train.iter().collect();
    let solver = SolverConfig::default();
    let steps = [1.0, 1.5, 2.0];

    let mut group = c.benchmark_group("forecast_windows");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| forecast_windows(&model, &data, &windows, &steps, &solver, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("dataset_mse");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| dataset_mse(&model, &data.train, &solver, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gradcheck, forecasting);
criterion_main!(benches);
