//! Series ingestion, resampling, chronological splits, normalization and
//! sliding windows.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::tensor::Tensor;

/// A multivariate series: one target column and `N` exogenous columns.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    /// Feature column names, target included, timestamp excluded.
    pub names: Vec<String>,
    /// Row-major `len × names.len()` values.
    pub values: Vec<f64>,
    pub target: usize,
    pub timestamps: Option<Vec<String>>,
    pub sample_interval: String,
}

impl RawSeries {
    pub fn new(names: Vec<String>, values: Vec<f64>, target: usize) -> Result<Self, DataError> {
        if names.len() < 2 {
            return Err(DataError::Invalid("need a target and at least one exogenous column".into()));
        }
        if target >= names.len() {
            return Err(DataError::Invalid(format!("target index {target} out of range")));
        }
        if values.len() % names.len() != 0 {
            return Err(DataError::Invalid("values do not fill whole rows".into()));
        }
        Ok(Self {
            names,
            values,
            target,
            timestamps: None,
            sample_interval: "1 step".into(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    /// Number of exogenous variables `N`.
    pub fn n_exogenous(&self) -> usize {
        self.width() - 1
    }

    /// Column indices of the exogenous variables, in file order.
    pub fn exogenous_columns(&self) -> Vec<usize> {
        (0..self.width()).filter(|&c| c != self.target).collect()
    }

    pub fn exogenous_names(&self) -> Vec<String> {
        self.exogenous_columns().into_iter().map(|c| self.names[c].clone()).collect()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.width();
        &self.values[r * w..(r + 1) * w]
    }

    pub fn value(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width() + c]
    }

    pub fn target_value(&self, r: usize) -> f64 {
        self.value(r, self.target)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.value(r, c)).collect()
    }

    /// Rows `range`, keeping names and target.
    pub fn slice(&self, range: Range<usize>) -> RawSeries {
        let w = self.width();
        RawSeries {
            names: self.names.clone(),
            values: self.values[range.start * w..range.end * w].to_vec(),
            target: self.target,
            timestamps: self.timestamps.as_ref().map(|t| t[range].to_vec()),
            sample_interval: self.sample_interval.clone(),
        }
    }

    /// Keeps every `factor`-th row starting with row 0.
    pub fn resample(&self, factor: usize) -> RawSeries {
        assert!(factor >= 1, "resample factor must be positive");
        let keep: Vec<usize> = (0..self.len()).step_by(factor).collect();
        RawSeries {
            names: self.names.clone(),
            values: keep.iter().flat_map(|&r| self.row(r).iter().copied()).collect(),
            target: self.target,
            timestamps: self
                .timestamps
                .as_ref()
                .map(|t| keep.iter().map(|&r| t[r].clone()).collect()),
            sample_interval: if factor == 1 {
                self.sample_interval.clone()
            } else {
                format!("{factor} × {}", self.sample_interval)
            },
        }
    }
}

/// Half-rate resampling: rows 0, 2, 4, …; the result has `ceil(len/2)` rows.
pub fn resample_half(series: &RawSeries) -> Result<RawSeries, DataError> {
    if series.len() < 2 {
        return Err(DataError::TooShort {
            len: series.len(),
            needed: 2,
        });
    }
    Ok(series.resample(2))
}

pub fn load_csv(path: impl AsRef<Path>, target: &str) -> Result<RawSeries, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(file, target)
}

/// Parses a headed, comma-delimited series. A first column named
/// `timestamp` is kept aside and not treated as a feature. Row numbers in
/// errors are 1-based file lines, the header being line 1.
pub fn parse_csv(reader: impl Read, target: &str) -> Result<RawSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let has_timestamp = header.first().is_some_and(|h| h.eq_ignore_ascii_case("timestamp"));
    let skip = usize::from(has_timestamp);
    let names: Vec<String> = header[skip..].to_vec();
    let target_idx = names
        .iter()
        .position(|n| n == target)
        .ok_or_else(|| DataError::MissingTarget(target.to_string()))?;

    let mut values = Vec::new();
    let mut stamps = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != header.len() {
            return Err(DataError::ColumnCount {
                row: line,
                expected: header.len(),
                found: record.len(),
            });
        }
        if has_timestamp {
            stamps.push(record[0].to_string());
        }
        for (c, cell) in record.iter().skip(skip).enumerate() {
            let v: f64 = cell.trim().parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                DataError::Parse {
                    row: line,
                    column: names[c].clone(),
                    value: cell.to_string(),
                }
            })?;
            values.push(v);
        }
    }
    let mut series = RawSeries::new(names, values, target_idx)?;
    if has_timestamp {
        series.timestamps = Some(stamps);
    }
    Ok(series)
}

/// Writes a series in the canonical layout (timestamp column first when present).
pub fn write_csv(series: &RawSeries, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = Vec::with_capacity(series.width() + 1);
    if series.timestamps.is_some() {
        header.push("timestamp".to_string());
    }
    header.extend(series.names.iter().cloned());
    w.write_record(&header)?;
    for r in 0..series.len() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ts) = &series.timestamps {
            rec.push(ts[r].clone());
        }
        rec.extend(series.row(r).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Contiguous train/valid/test row ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

/// 8:1:1 chronological split; boundaries are floored and the remainder
/// goes to test.
pub fn split_chronological(len: usize) -> Result<Split, DataError> {
    if len < 10 {
        return Err(DataError::TooShort { len, needed: 10 });
    }
    let train = len * 8 / 10;
    let valid = len / 10;
    Ok(Split {
        train: 0..train,
        valid: train..train + valid,
        test: train + valid..len,
    })
}

/// Per-column z-score statistics (population σ) fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-8;

impl NormStats {
    pub fn fit(series: &RawSeries, rows: Range<usize>) -> Result<Self, DataError> {
        if rows.is_empty() || rows.end > series.len() {
            return Err(DataError::Invalid(format!(
                "cannot fit normalizer on rows {rows:?} of {}",
                series.len()
            )));
        }
        let n = rows.len() as f64;
        let w = series.width();
        let mut mean = vec![0.0; w];
        for r in rows.clone() {
            mean.iter_mut().zip(series.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; w];
        for r in rows {
            for (c, v) in series.row(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, series: &RawSeries) -> RawSeries {
        let w = series.width();
        let mut out = series.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            let c = i % w;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }

    pub fn denormalize(&self, column: usize, value: f64) -> f64 {
        value * self.std[column] + self.mean[column]
    }
}

/// One training/evaluation instance.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `T×N` exogenous history.
    pub exogenous: Tensor,
    /// `T` target history.
    pub history: Vec<f64>,
    /// Target values at `offsets`.
    pub targets: Vec<f64>,
    pub offsets: Vec<f64>,
    /// Row index (in the windowed series) of the last input row.
    pub anchor: usize,
}

impl WindowSample {
    pub fn window(&self) -> usize {
        self.history.len()
    }

    pub fn n_exogenous(&self) -> usize {
        self.exogenous.shape()[1]
    }
}

/// Stride-1 windows over `rows` of `series`: `T` input rows followed by
/// targets at integer offsets `1..=K`. Yields `rows.len() − T − K + 1`
/// samples.
pub fn make_windows(
    series: &RawSeries,
    rows: Range<usize>,
    window: usize,
    horizon: usize,
) -> Result<Vec<WindowSample>, DataError> {
    if window == 0 || horizon == 0 {
        return Err(DataError::Invalid("window and horizon must be at least 1".into()));
    }
    let needed = window + horizon;
    if rows.len() < needed || rows.end > series.len() {
        return Err(DataError::TooShort {
            len: rows.len(),
            needed,
        });
    }
    let exo_cols = series.exogenous_columns();
    let n = exo_cols.len();
    let offsets: Vec<f64> = (1..=horizon).map(|k| k as f64).collect();
    let count = rows.len() - needed + 1;
    let samples = (0..count)
        .map(|i| {
            let start = rows.start + i;
            let anchor = start + window - 1;
            let mut exo = Vec::with_capacity(window * n);
            let mut history = Vec::with_capacity(window);
            for r in start..=anchor {
                exo.extend(exo_cols.iter().map(|&c| series.value(r, c)));
                history.push(series.target_value(r));
            }
            WindowSample {
                exogenous: Tensor::from_parts(vec![window, n], exo),
                history,
                targets: (1..=horizon).map(|k| series.target_value(anchor + k)).collect(),
                offsets: offsets.clone(),
                anchor,
            }
        })
        .collect();
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub window: usize,
    pub horizon: usize,
    /// Train and evaluate on every second row of the source series.
    pub half_rate: bool,
}

/// A series run through the full pipeline.
#[derive(Clone, Debug)]
pub struct PreparedData {
    /// Source series in original units; fractional-step truths are read here.
    pub original: RawSeries,
    /// Resampled (if half-rate) and normalized series the model sees.
    pub working: RawSeries,
    /// Original rows per working row.
    pub factor: usize,
    pub split: Split,
    pub stats: NormStats,
    pub train: Vec<WindowSample>,
    pub valid: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl PreparedData {
    /// Resample, split, normalize with train statistics (or `stats` when
    /// given, e.g. from a checkpoint) and window every segment.
    pub fn new(original: RawSeries, cfg: &DataConfig, stats: Option<NormStats>) -> Result<Self, DataError> {
        let factor = if cfg.half_rate { 2 } else { 1 };
        let resampled = if cfg.half_rate {
            resample_half(&original)?
        } else {
            original.clone()
        };
        let split = split_chronological(resampled.len())?;
        let stats = match stats {
            Some(s) if s.mean.len() == resampled.width() => s,
            Some(_) => return Err(DataError::Invalid("normalizer width does not match series".into())),
            None => NormStats::fit(&resampled, split.train.clone())?,
        };
        let working = stats.apply(&resampled);
        let win = |r: Range<usize>| make_windows(&working, r, cfg.window, cfg.horizon);
        Ok(Self {
            train: win(split.train.clone())?,
            valid: win(split.valid.clone())?,
            test: win(split.test.clone())?,
            original,
            working,
            factor,
            split,
            stats,
        })
    }

    pub fn n_exogenous(&self) -> usize {
        self.working.n_exogenous()
    }

    pub fn exogenous_names(&self) -> Vec<String> {
        self.working.exogenous_names()
    }

    pub fn target_column(&self) -> usize {
        self.working.target
    }
}

/// Parameters of the synthetic benchmark series.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub noise: f64,
    /// Period (rows) of each exogenous sinusoid.
    pub periods: Vec<f64>,
    /// How many rows each exogenous driver leads the target by.
    pub lags: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            rows: 2000,
            noise: 0.05,
            periods: vec![46.0, 74.0, 118.0],
            lags: vec![6, 9, 13],
            weights: vec![0.8, -0.6, 0.5],
        }
    }
}

/// Target = weighted sum of lagged exogenous sinusoids + Gaussian noise.
/// Columns: `timestamp, x1..xN, target`.
pub fn synthetic_series(spec: &SyntheticSpec, seed: u64) -> RawSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = Uniform::new(0.0, std::f64::consts::TAU);
    let noise = Normal::new(0.0, spec.noise).expect("finite noise level");
    let phases: Vec<f64> = spec.periods.iter().map(|_| phase.sample(&mut rng)).collect();
    let n = spec.periods.len();
    let driver = |i: usize, t: f64| (std::f64::consts::TAU * t / spec.periods[i] + phases[i]).sin();
    let mut values = Vec::with_capacity(spec.rows * (n + 1));
    for r in 0..spec.rows {
        let t = r as f64;
        values.extend((0..n).map(|i| driver(i, t)));
        let y: f64 = (0..n)
            .map(|i| spec.weights[i] * driver(i, t - spec.lags[i] as f64))
            .sum::<f64>()
            + noise.sample(&mut rng);
        values.push(y);
    }
    let mut names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    names.push("target".into());
    let mut series = RawSeries::new(names, values, n).expect("well-formed synthetic series");
    series.timestamps = Some((0..spec.rows).map(|r| r.to_string()).collect());
    series
}
