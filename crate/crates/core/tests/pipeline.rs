use egpde_core::data::{
    load_csv, make_windows, resample_half, split_chronological, synthetic_series, write_csv, DataConfig,
    PreparedData, RawSeries, SyntheticSpec,
};
use egpde_core::eval::{evaluate_arbitrary, evaluate_persistence, mae, rmse};
use egpde_core::model::{EgpdeNet, ModelConfig};
use egpde_core::ode::SolverConfig;
use egpde_core::training::{fit, load_checkpoint, save_checkpoint, CheckpointMeta, TrainConfig};
use egpde_core::{Execution, Tape, Tensor};
use proptest::prelude::*;

fn series(rows: usize) -> RawSeries {
    RawSeries::new(
        vec!["x".into(), "y".into()],
        (0..2 * rows).map(|i| (i as f64 * 0.37).sin()).collect(),
        1,
    )
    .unwrap()
}

#[test]
fn csv_to_checkpoint_to_fractional_eval() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("series.csv");
    write_csv(&synthetic_series(&SyntheticSpec { rows: 600, ..SyntheticSpec::default() }, 3), &csv).unwrap();
    let raw = load_csv(&csv, "target").unwrap();
    assert_eq!(raw.n_exogenous(), 3);

    let data_cfg = DataConfig {
        window: 10,
        horizon: 3,
        half_rate: true,
    };
    let data = PreparedData::new(raw, &data_cfg, None).unwrap();
    let cfg = ModelConfig {
        latent: 4,
        rnn_hidden: 8,
        d_model: 4,
        heads: 2,
        ..ModelConfig::new(10, 3, 3)
    };
    let mut model = EgpdeNet::new(cfg.clone(), 1).unwrap();
    let tc = TrainConfig {
        batch_size: 32,
        learning_rate: 0.01,
        max_epochs: 4,
        seed: 1,
        solver: SolverConfig::rk4(0.25),
        ..TrainConfig::default()
    };
    let history = fit(&mut model, &data.train, &data.valid, &tc).unwrap();
    assert!(history.best_valid.is_finite());

    let ckpt = dir.path().join("m.ckpt");
    let meta = CheckpointMeta {
        model: cfg,
        data: data_cfg,
        stats: data.stats.clone(),
        target: "target".into(),
        columns: data.original.names.clone(),
        seed: 1,
    };
    save_checkpoint(&model, &meta, &ckpt).unwrap();
    let (restored, meta2) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(meta2, meta);

    let steps = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
    let a = evaluate_arbitrary(&model, &data, &data.test, &steps, &tc.solver, Execution::Parallel).unwrap();
    let b = evaluate_arbitrary(&restored, &data, &data.test, &steps, &tc.solver, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.steps.len(), 6);
    assert!(a.steps.iter().all(|s| s.rmse.is_finite() && s.rmse >= s.mae));
    let base = evaluate_persistence(&data, &data.test, &steps).unwrap();
    assert_eq!(base.steps.len(), 6);
}

#[test]
fn dopri5_and_rk4_agree_on_the_model() {
    let data = PreparedData::new(
        synthetic_series(&SyntheticSpec { rows: 800, ..SyntheticSpec::default() }, 2),
        &DataConfig {
            window: 20,
            horizon: 3,
            half_rate: true,
        },
        None,
    )
    .unwrap();
    let model = EgpdeNet::new(ModelConfig::new(20, 3, 3), 0).unwrap();
    let input = egpde_core::model::ModelInput::from_windows(&data.test[..8]).unwrap();
    let times = [1.0, 1.5, 2.0, 2.5, 3.0];
    let fine = model.predict(&input, &times, &SolverConfig::rk4(0.01)).unwrap();
    let adaptive = model.predict(&input, &times, &SolverConfig::dopri5(1e-8, 1e-10)).unwrap();
    assert!(fine.max_abs_diff(&adaptive) < 1e-7, "{}", fine.max_abs_diff(&adaptive));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_covers_every_row(len in 10usize..5000) {
        let s = split_chronological(len).unwrap();
        prop_assert_eq!(s.train.start, 0);
        prop_assert_eq!(s.train.end, s.valid.start);
        prop_assert_eq!(s.valid.end, s.test.start);
        prop_assert_eq!(s.test.end, len);
        prop_assert_eq!(s.train.len(), len * 8 / 10);
    }

    #[test]
    fn window_count_and_half_rate_length(rows in 2usize..300, t in 1usize..12, k in 1usize..5) {
        let raw = series(rows);
        prop_assert_eq!(resample_half(&raw).unwrap().len(), rows.div_ceil(2));
        let windows = make_windows(&raw, 0..rows, t, k);
        if rows >= t + k {
            let w = windows.unwrap();
            prop_assert_eq!(w.len(), rows - t - k + 1);
            prop_assert!(w.iter().enumerate().all(|(i, s)| s.anchor == i + t - 1));
        } else {
            prop_assert!(windows.is_err());
        }
    }

    #[test]
    fn rmse_bounds_mae(pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..64)) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (r, m) = (rmse(&p, &t).unwrap(), mae(&p, &t).unwrap());
        prop_assert!(r + 1e-12 * r.max(1.0) >= m);
        prop_assert!(r <= p.iter().zip(&t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) + 1e-9);
    }

    #[test]
    fn product_rule_gradient(a in proptest::collection::vec(-3f64..3.0, 1..16)) {
        let n = a.len();
        let b: Vec<f64> = a.iter().map(|v| v.cos()).collect();
        let tape = Tape::new();
        let x = tape.param(&Tensor::matrix(1, n, a.clone()).unwrap());
        let y = tape.param(&Tensor::matrix(1, n, b.clone()).unwrap());
        let loss = x.mul(y).unwrap().tanh().unwrap().mean().unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x);
        for i in 0..n {
            let th = (a[i] * b[i]).tanh();
            let want = (1.0 - th * th) * b[i] / n as f64;
            prop_assert!((gx.data()[i] - want).abs() < 1e-12);
        }
    }
}
