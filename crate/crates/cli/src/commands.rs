use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use egpde_core::autodiff::Fault;
use egpde_core::data::{
    load_csv, synthetic_series, write_csv, PreparedData, RawSeries, SyntheticSpec, WindowSample,
};
use egpde_core::eval::{
    aggregate_runs, contribution_svg, evaluate_arbitrary, evaluate_persistence, variable_contribution,
    write_contribution_csv, RunAggregate,
};
use egpde_core::gradcheck::{grad_check, objective, GradCheckConfig};
use egpde_core::model::{AblationMode, EgpdeNet, ModelConfig, ModelInput};
use egpde_core::ode::SolverConfig;
use egpde_core::training::{fit, load_checkpoint, mse_loss, save_checkpoint, CheckpointMeta};
use egpde_core::{par, Execution, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_steps, RunConfig};
use crate::{ContribArgs, EvalArgs, GradcheckArgs, PrepareSource, TrainArgs};

fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag.unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

pub fn checkpoint_name(ablation: AblationMode, seed: u64) -> String {
    format!("{ablation}_seed{seed}")
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(mode) = args.ablation {
        cfg.model.ablation = mode;
    }
    if let Some(seeds) = args.seeds {
        ensure!(!seeds.is_empty(), "--seeds must name at least one seed");
        cfg.training.seeds = seeds;
    }
    if let Some(epochs) = args.epochs {
        cfg.training.max_epochs = epochs;
    }
    cfg.validate()?;
    let out = output_dir(args.output.output, &cfg)?;
    let series = load_csv(&cfg.data.path, &cfg.data.target)
        .with_context(|| format!("loading {}", cfg.data.path.display()))?;
    let data = PreparedData::new(series, &cfg.data_config(), None)?;
    let model_cfg = cfg.model_config(data.n_exogenous());
    println!(
        "{}: {} rows ({} working), N={}, windows train/valid/test = {}/{}/{}, {} parameters",
        cfg.data.path.display(),
        data.original.len(),
        data.working.len(),
        data.n_exogenous(),
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        model_cfg.param_count(),
    );

    let exec = if args.parallel {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    let results = par::map(exec, &cfg.training.seeds, |&seed| -> Result<String> {
        let started = Instant::now();
        let mut model = EgpdeNet::new(model_cfg.clone(), seed)?;
        let history = fit(&mut model, &data.train, &data.valid, &cfg.train_config(seed))
            .with_context(|| format!("training seed {seed}"))?;
        let name = checkpoint_name(model_cfg.ablation, seed);
        let meta = CheckpointMeta {
            model: model_cfg.clone(),
            data: cfg.data_config(),
            stats: data.stats.clone(),
            target: cfg.data.target.clone(),
            columns: data.original.names.clone(),
            seed,
        };
        let ckpt = out.join(format!("{name}.ckpt"));
        save_checkpoint(&model, &meta, &ckpt)?;
        history.write_csv(out.join(format!("{name}_history.csv")))?;
        Ok(format!(
            "seed {seed}: {} epochs, best valid MSE {:.6} at epoch {} ({:.1}s) -> {}",
            history.epochs.len(),
            history.best_valid,
            history.best_epoch,
            started.elapsed().as_secs_f64(),
            ckpt.display()
        ))
    });
    for r in results {
        println!("{}", r?);
    }
    Ok(ExitCode::SUCCESS)
}

/// Loads the configured dataset under a checkpoint's own preprocessing.
fn data_for(cfg: &RunConfig, meta: &CheckpointMeta) -> Result<PreparedData> {
    let series = load_csv(&cfg.data.path, &meta.target)
        .with_context(|| format!("loading {}", cfg.data.path.display()))?;
    ensure!(
        series.names == meta.columns,
        "dataset columns {:?} do not match the checkpoint's {:?}",
        series.names,
        meta.columns
    );
    Ok(PreparedData::new(series, &meta.data, Some(meta.stats.clone()))?)
}

fn write_aggregate(agg: &RunAggregate, dir: &Path, name: &str) -> Result<()> {
    agg.write_csv(dir.join(format!("{name}.csv")))?;
    agg.write_json(dir.join(format!("{name}.json")))?;
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let steps = match &args.steps {
        Some(s) => parse_steps(s)?,
        None => Vec::new(),
    };
    let cfg = RunConfig::load(&args.config)?;
    let steps = if steps.is_empty() { cfg.eval.steps.clone() } else { steps };
    let out = output_dir(args.output.output, &cfg)?;
    let solver = cfg.training.solver;

    let mut reports = Vec::new();
    let mut first: Option<(CheckpointMeta, PreparedData)> = None;
    for path in &args.checkpoint {
        let (model, meta) =
            load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        if let Some((m0, _)) = &first {
            ensure!(
                m0.model == meta.model && m0.data == meta.data,
                "checkpoint {} has a different configuration from the first",
                path.display()
            );
        } else {
            let data = data_for(&cfg, &meta)?;
            first = Some((meta.clone(), data));
        }
        let data = &first.as_ref().expect("set above").1;
        let report = evaluate_arbitrary(&model, data, &data.test, &steps, &solver, Execution::Parallel)?;
        if report.skipped > 0 {
            eprintln!(
                "{}: {} test windows skipped (truth beyond the end of the series)",
                path.display(),
                report.skipped
            );
        }
        reports.push(report);
    }
    let (meta, data) = first.expect("at least one checkpoint");
    let agg = aggregate_runs(&reports)?;
    let name = format!("eval_{}", meta.model.ablation);
    write_aggregate(&agg, &out, &name)?;
    println!("{} ({} run(s), original units)", meta.model.ablation, agg.runs);
    print!("{}", agg.table());
    if args.baseline {
        let base = aggregate_runs(&[evaluate_persistence(&data, &data.test, &steps)?])?;
        write_aggregate(&base, &out, "eval_persistence")?;
        println!("persistence baseline");
        print!("{}", base.table());
    }
    Ok(ExitCode::SUCCESS)
}

/// Tiny configuration used for gradient checking.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        window: 5,
        n_exogenous: 3,
        horizon: 2,
        latent: 4,
        rnn_hidden: 8,
        d_model: 4,
        heads: 2,
        ablation: AblationMode::Full,
    }
}

fn random_windows(cfg: &ModelConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<WindowSample> {
    let (t, n) = (cfg.window, cfg.n_exogenous);
    (0..count)
        .map(|i| WindowSample {
            exogenous: Tensor::matrix(t, n, (0..t * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .expect("finite values"),
            history: (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            targets: (0..cfg.horizon).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            offsets: (1..=cfg.horizon).map(|k| k as f64).collect(),
            anchor: i,
        })
        .collect()
}

pub fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let started = Instant::now();
    let cfg = gradcheck_config();
    let model = EgpdeNet::new(cfg.clone(), args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
    let samples = random_windows(&cfg, 2, &mut rng);
    let input = ModelInput::from_windows(&samples)?;
    let truth = Tensor::matrix(
        samples.len(),
        cfg.horizon,
        samples.iter().flat_map(|s| s.targets.clone()).collect(),
    )?;
    let times: Vec<f64> = samples[0].offsets.clone();
    let solver = SolverConfig::rk4(0.1);
    let f = objective(|tape, vars| {
        let p = model.params().bind_vars(vars);
        let pred = model.forecast(&p, tape, &input, &times, &solver)?.predictions;
        Ok(mse_loss(pred, tape.constant(&truth))?)
    });
    let params: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let check = GradCheckConfig {
        eps: args.eps,
        execution: if args.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
        fault: args.inject_fault.then_some(Fault::TanhBackward),
    };
    let report = grad_check(f, &params, &check)?;
    let worst = report
        .worst
        .as_ref()
        .map(|(n, i)| format!("{n}[{i}]"))
        .unwrap_or_else(|| "-".into());
    println!(
        "checked {} gradient entries in {:.2}s; max relative error {:.3e} at {worst}",
        report.evaluated,
        started.elapsed().as_secs_f64(),
        report.max_rel_error
    );
    if report.max_rel_error < args.tolerance {
        println!("PASS (< {:e})", args.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL (>= {:e})", args.tolerance);
        Ok(ExitCode::FAILURE)
    }
}

pub fn contrib(args: ContribArgs) -> Result<ExitCode> {
    let cfg = RunConfig::load(&args.config)?;
    let (model, meta) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    if meta.model.ablation == AblationMode::NoSelfAtt {
        bail!("variable contributions come from the attention encoder, which the no_self_att variant does not have");
    }
    let out = output_dir(args.output.output, &cfg)?;
    let data = data_for(&cfg, &meta)?;
    let contrib = variable_contribution(&model, &data.test, &data.exogenous_names(), Execution::Parallel)?;
    let stem = args
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let csv = out.join(format!("contrib_{stem}.csv"));
    let svg = out.join(format!("contrib_{stem}.svg"));
    write_contribution_csv(&contrib, &csv)?;
    std::fs::write(&svg, contribution_svg(&contrib)).with_context(|| format!("writing {}", svg.display()))?;
    for c in &contrib {
        println!("{:<24} {:.4}", c.name, c.weight);
    }
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(ExitCode::SUCCESS)
}

pub fn prepare_data(source: PrepareSource) -> Result<ExitCode> {
    match source {
        PrepareSource::Synthetic { rows, seed, noise, out } => {
            ensure!(rows >= 10, "need at least 10 rows");
            ensure!(noise >= 0.0 && noise.is_finite(), "noise must be non-negative");
            let spec = SyntheticSpec {
                rows,
                noise,
                ..SyntheticSpec::default()
            };
            let series = synthetic_series(&spec, seed);
            write_csv(&series, &out)?;
            println!("wrote {} rows to {} (target column \"target\")", rows, out.display());
        }
        PrepareSource::Convert {
            input,
            out,
            delimiter,
            timestamp_columns,
            drop,
            target,
        } => {
            let series = convert(&input, delimiter, timestamp_columns, &drop)?;
            write_csv(&series, &out)?;
            if let Some(t) = target {
                load_csv(&out, &t).with_context(|| format!("re-reading {}", out.display()))?;
            }
            println!(
                "wrote {} rows x {} features to {}",
                series.len(),
                series.width(),
                out.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Strips positional prefixes such as `3:` from header names.
fn clean_name(raw: &str) -> String {
    let raw = raw.trim();
    match raw.split_once(':') {
        Some((pre, rest)) if !pre.is_empty() && pre.chars().all(|c| c.is_ascii_digit()) => rest.trim().to_string(),
        _ => raw.to_string(),
    }
}

fn split_fields(line: &str, delimiter: char) -> Vec<&str> {
    if delimiter == ' ' {
        line.split_whitespace().collect()
    } else {
        line.split(delimiter).map(str::trim).collect()
    }
}

fn convert(input: &Path, delimiter: char, ts_cols: usize, drop: &[String]) -> Result<RawSeries> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().context("input file is empty")?;
    let header: Vec<String> = split_fields(header.trim_start_matches('#'), delimiter)
        .into_iter()
        .map(clean_name)
        .collect();
    ensure!(header.len() > ts_cols, "header has only {} columns", header.len());
    for d in drop {
        ensure!(header.contains(d), "cannot drop unknown column {d:?}");
    }
    let keep: Vec<usize> = (ts_cols..header.len()).filter(|&c| !drop.contains(&header[c])).collect();
    let names: Vec<String> = keep.iter().map(|&c| header[c].clone()).collect();
    ensure!(names.len() >= 2, "need at least two feature columns after dropping");
    let mut values = Vec::new();
    let mut stamps = Vec::new();
    for (i, line) in lines {
        let fields = split_fields(line, delimiter);
        ensure!(
            fields.len() == header.len(),
            "line {}: expected {} fields, found {}",
            i + 1,
            header.len(),
            fields.len()
        );
        if ts_cols > 0 {
            stamps.push(fields[..ts_cols].join("T"));
        }
        for &c in &keep {
            let v: f64 = fields[c]
                .parse()
                .with_context(|| format!("line {}, column {:?}: cannot parse {:?}", i + 1, header[c], fields[c]))?;
            values.push(v);
        }
    }
    let last = names.len() - 1;
    let mut series = RawSeries::new(names, values, last)?;
    if ts_cols > 0 {
        series.timestamps = Some(stamps);
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_prefixes_are_stripped() {
        assert_eq!(clean_name("3:Temperature_Comedor_Sensor"), "Temperature_Comedor_Sensor");
        assert_eq!(clean_name(" CO2 "), "CO2");
        assert_eq!(clean_name("a:b"), "a:b");
    }

    #[test]
    fn converts_space_delimited_files() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("raw.txt");
        std::fs::write(
            &input,
            "1:Date 2:Time 3:Temp 4:Humid 5:Junk\n13/03/2012 11:45 18.1875  39.9125 0\n13/03/2012 12:00 18.4633 39.9204 0\n",
        )
        .unwrap();
        let s = convert(&input, ' ', 2, &["Junk".into()]).unwrap();
        assert_eq!(s.names, vec!["Temp", "Humid"]);
        assert_eq!(s.len(), 2);
        assert_eq!(s.timestamps.as_ref().unwrap()[0], "13/03/2012T11:45");
        assert_eq!(s.value(1, 1), 39.9204);
        assert!(convert(&input, ' ', 2, &["Nope".into()]).is_err());
    }
}
