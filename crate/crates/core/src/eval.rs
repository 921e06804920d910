//! Metrics, arbitrary-step scoring in original units, cross-seed
//! aggregation and variable-contribution export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PreparedData, WindowSample};
use crate::error::{Error, Result};
use crate::model::{EgpdeNet, ModelInput};
use crate::ode::SolverConfig;
use crate::par::{self, Execution};

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Config(format!(
            "metrics need equal non-empty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let abs: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(abs / pred.len() as f64)
}

/// `Step1`, `Step1.5`, …
pub fn step_label(step: f64) -> String {
    format!("Step{step}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub label: String,
    pub step: f64,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

impl StepReport {
    fn new(step: f64, pred: &[f64], truth: &[f64]) -> Result<Self> {
        let report = Self {
            label: step_label(step),
            step,
            rmse: rmse(pred, truth)?,
            mae: mae(pred, truth)?,
            n: pred.len(),
        };
        debug_assert!(report.rmse + 1e-12 >= report.mae);
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sorted by step.
    pub steps: Vec<StepReport>,
    /// Windows dropped because a truth row lies past the end of the series.
    pub skipped: usize,
}

impl EvalReport {
    pub fn average_rmse(&self) -> f64 {
        self.steps.iter().map(|s| s.rmse).sum::<f64>() / self.steps.len() as f64
    }

    pub fn step(&self, step: f64) -> Option<&StepReport> {
        self.steps.iter().find(|s| (s.step - step).abs() < 1e-9)
    }
}

fn sorted_steps(steps: &[f64]) -> Result<Vec<f64>> {
    if steps.is_empty() || steps.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Config(format!("steps must be positive and finite, got {steps:?}")));
    }
    let mut sorted = steps.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[1] - w[0] < 1e-9) {
        return Err(Error::Config(format!("duplicate steps in {steps:?}")));
    }
    Ok(sorted)
}

/// Raw-row offset for `step` working-grid steps, if it lands on a row.
fn raw_offset(step: f64, factor: usize) -> Result<usize> {
    let raw = step * factor as f64;
    if (raw - raw.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "step {step} falls between rows of the original series (rate factor {factor}) and cannot be scored"
        )));
    }
    Ok(raw.round() as usize)
}

/// Scorable windows and their original-unit truths, one row per window.
struct Truths<'a> {
    windows: Vec<&'a WindowSample>,
    truth: Vec<Vec<f64>>,
    skipped: usize,
}

fn truths<'a>(data: &PreparedData, windows: &'a [WindowSample], steps: &[f64]) -> Result<Truths<'a>> {
    let offsets = steps
        .iter()
        .map(|&s| raw_offset(s, data.factor))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Truths {
        windows: Vec::new(),
        truth: Vec::new(),
        skipped: 0,
    };
    for w in windows {
        let base = data.factor * w.anchor;
        let rows: Vec<usize> = offsets.iter().map(|o| base + o).collect();
        if rows.iter().any(|&r| r >= data.original.len()) {
            out.skipped += 1;
            continue;
        }
        out.windows.push(w);
        out.truth.push(rows.iter().map(|&r| data.original.target_value(r)).collect());
    }
    if out.windows.is_empty() {
        return Err(Error::Config("no window has ground truth for every requested step".into()));
    }
    Ok(out)
}

fn reports(steps: &[f64], pred: &[Vec<f64>], truth: &[Vec<f64>], skipped: usize) -> Result<EvalReport> {
    let steps = steps
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let p: Vec<f64> = pred.iter().map(|r| r[j]).collect();
            let t: Vec<f64> = truth.iter().map(|r| r[j]).collect();
            StepReport::new(s, &p, &t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { steps, skipped })
}

const CHUNK: usize = 128;

/// De-normalized forecasts at `steps` for every window (`windows × steps`).
pub fn forecast_windows(
    model: &EgpdeNet,
    data: &PreparedData,
    windows: &[&WindowSample],
    steps: &[f64],
    solver: &SolverConfig,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<&[&WindowSample]> = windows.chunks(CHUNK).collect();
    let target = data.target_column();
    let parts = par::map(exec, &chunks, |chunk| -> Result<Vec<Vec<f64>>> {
        let out = model.predict(&ModelInput::new(chunk)?, steps, solver)?;
        Ok((0..chunk.len())
            .map(|b| out.row(b).iter().map(|&v| data.stats.denormalize(target, v)).collect())
            .collect())
    });
    let mut rows = Vec::with_capacity(windows.len());
    for part in parts {
        rows.extend(part?);
    }
    Ok(rows)
}

/// Scores forecasts at arbitrary `steps` (in working-grid units) against
/// rows of the original, pre-resampling series. Reports come back sorted by
/// step whatever the request order.
pub fn evaluate_arbitrary(
    model: &EgpdeNet,
    data: &PreparedData,
    windows: &[WindowSample],
    steps: &[f64],
    solver: &SolverConfig,
    exec: Execution,
) -> Result<EvalReport> {
    let steps = sorted_steps(steps)?;
    let t = truths(data, windows, &steps)?;
    let pred = forecast_windows(model, data, &t.windows, &steps, solver, exec)?;
    reports(&steps, &pred, &t.truth, t.skipped)
}

/// Last observed target value repeated at every step.
pub fn evaluate_persistence(data: &PreparedData, windows: &[WindowSample], steps: &[f64]) -> Result<EvalReport> {
    let steps = sorted_steps(steps)?;
    let t = truths(data, windows, &steps)?;
    let pred: Vec<Vec<f64>> = t
        .windows
        .iter()
        .map(|w| vec![data.original.target_value(data.factor * w.anchor); steps.len()])
        .collect();
    reports(&steps, &pred, &t.truth, t.skipped)
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// `None` with a single run.
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() >= 2)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub rmse: Summary,
    pub mae: Summary,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub steps: Vec<AggregateRow>,
    /// Mean over steps of the per-step means; its spread is taken over the
    /// per-seed step averages.
    pub average: AggregateRow,
    pub runs: usize,
}

pub fn aggregate_runs(runs: &[EvalReport]) -> Result<RunAggregate> {
    let first = runs.first().ok_or_else(|| Error::Config("no runs to aggregate".into()))?;
    let labels: Vec<&str> = first.steps.iter().map(|s| s.label.as_str()).collect();
    for r in runs {
        if r.steps.iter().map(|s| s.label.as_str()).ne(labels.iter().copied()) {
            return Err(Error::Config("runs report different step sets".into()));
        }
    }
    let steps: Vec<AggregateRow> = (0..labels.len())
        .map(|j| AggregateRow {
            label: labels[j].to_string(),
            rmse: Summary::of(&runs.iter().map(|r| r.steps[j].rmse).collect::<Vec<_>>()),
            mae: Summary::of(&runs.iter().map(|r| r.steps[j].mae).collect::<Vec<_>>()),
            n: runs.iter().map(|r| r.steps[j].n).sum(),
        })
        .collect();
    let per_run = |f: fn(&StepReport) -> f64| -> Vec<f64> {
        runs.iter()
            .map(|r| r.steps.iter().map(f).sum::<f64>() / r.steps.len() as f64)
            .collect()
    };
    let m = steps.len() as f64;
    let mut rmse = Summary::of(&per_run(|s| s.rmse));
    let mut mae = Summary::of(&per_run(|s| s.mae));
    rmse.mean = steps.iter().map(|s| s.rmse.mean).sum::<f64>() / m;
    mae.mean = steps.iter().map(|s| s.mae.mean).sum::<f64>() / m;
    Ok(RunAggregate {
        average: AggregateRow {
            label: "Average".into(),
            rmse,
            mae,
            n: steps.iter().map(|s| s.n).sum(),
        },
        steps,
        runs: runs.len(),
    })
}

impl RunAggregate {
    fn rows(&self) -> impl Iterator<Item = &AggregateRow> {
        self.steps.iter().chain(std::iter::once(&self.average))
    }

    /// Long format: `step,metric,mean,std,n`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("step,metric,mean,std,n\n");
        for row in self.rows() {
            for (metric, s) in [("rmse", &row.rmse), ("mae", &row.mae)] {
                let std = s.std.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{},{metric},{},{std},{}", row.label, s.mean, row.n);
            }
        }
        write_file(path.as_ref(), &out)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        write_file(path.as_ref(), &json)
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>22} {:>22} {:>8}\n", "step", "rmse", "mae", "n");
        let cell = |s: &Summary| match s.std {
            Some(std) => format!("{:.4} ± {:.4}", s.mean, std),
            None => format!("{:.4}", s.mean),
        };
        for row in self.rows() {
            let _ = writeln!(
                out,
                "{:<10} {:>22} {:>22} {:>8}",
                row.label,
                cell(&row.rmse),
                cell(&row.mae),
                row.n
            );
        }
        out
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub name: String,
    pub weight: f64,
}

/// Mean attention mass per exogenous variable over `windows`.
pub fn variable_contribution(
    model: &EgpdeNet,
    windows: &[WindowSample],
    names: &[String],
    exec: Execution,
) -> Result<Vec<Contribution>> {
    if windows.is_empty() {
        return Err(Error::Config("no windows for variable contribution".into()));
    }
    let n = model.config().n_exogenous;
    if names.len() != n {
        return Err(Error::Config(format!("{} names for {n} variables", names.len())));
    }
    let chunks: Vec<&[WindowSample]> = windows.chunks(CHUNK).collect();
    let parts = par::map(exec, &chunks, |chunk| -> Result<Vec<f64>> {
        let w = model.variable_weights(&ModelInput::from_windows(chunk)?)?;
        let mut sums = vec![0.0; n];
        for b in 0..chunk.len() {
            sums.iter_mut().zip(w.row(b)).for_each(|(s, v)| *s += v);
        }
        Ok(sums)
    });
    let mut totals = vec![0.0; n];
    for part in parts {
        totals.iter_mut().zip(part?).for_each(|(t, v)| *t += v);
    }
    Ok(names
        .iter()
        .zip(totals)
        .map(|(name, t)| Contribution {
            name: name.clone(),
            weight: t / windows.len() as f64,
        })
        .collect())
}

pub fn write_contribution_csv(contrib: &[Contribution], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("name,weight\n");
    for c in contrib {
        let name = if c.name.contains([',', '"']) {
            format!("\"{}\"", c.name.replace('"', "\"\""))
        } else {
            c.name.clone()
        };
        let _ = writeln!(out, "{name},{}", c.weight);
    }
    write_file(path.as_ref(), &out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Horizontal bar chart, one bar per variable.
pub fn contribution_svg(contrib: &[Contribution]) -> String {
    const ROW: f64 = 22.0;
    const LABEL: f64 = 140.0;
    const BAR: f64 = 320.0;
    let max = contrib.iter().map(|c| c.weight).fold(0.0, f64::max).max(1e-12);
    let height = ROW * contrib.len() as f64 + 40.0;
    let width = LABEL + BAR + 80.0;
    let mut svg = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(svg, "  <text x=\"10\" y=\"18\">Variable contribution</text>");
    for (i, c) in contrib.iter().enumerate() {
        let y = 30.0 + ROW * i as f64;
        let w = BAR * c.weight / max;
        let _ = writeln!(
            svg,
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            LABEL - 6.0,
            y + 14.0,
            xml_escape(&c.name)
        );
        let _ = writeln!(
            svg,
            "  <rect x=\"{LABEL}\" y=\"{}\" width=\"{w:.2}\" height=\"{}\" fill=\"#4878a8\"/>",
            y + 3.0,
            ROW - 6.0
        );
        let _ = writeln!(svg, "  <text x=\"{:.2}\" y=\"{}\">{:.3}</text>", LABEL + w + 4.0, y + 14.0, c.weight);
    }
    svg.push_str("</svg>\n");
    svg
}
