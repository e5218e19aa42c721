//! Windowed real-valued series.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fnv1a, Batch, BatchInput, Dataset, InputSpec, Splits, TargetKind, FNV_OFFSET};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIGMA_FLOOR: f64 = 1e-8;

/// Per-feature affine map applied after the log transform:
/// `y = (log v − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }

    /// Statistics of `values` with the standard deviation floored at 1e-8.
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mut mean = values.iter().sum::<f64>() / n;
        if !values.is_empty() && values.iter().all(|&v| v == values[0]) {
            // Summation rounding would otherwise leave a residue that the
            // σ floor blows up.
            mean = values[0];
        }
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean: vec![mean],
            std: vec![var.sqrt().max(SIGMA_FLOOR)],
        }
    }

    pub fn normalize(&self, feature: usize, log_value: f64) -> f64 {
        (log_value - self.mean[feature]) / self.std[feature]
    }

    pub fn denormalize(&self, feature: usize, y: f64) -> f64 {
        y * self.std[feature] + self.mean[feature]
    }
}

/// Fixed-length windows predicting one scalar each.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub(crate) window: usize,
    pub(crate) input_dim: usize,
    /// `num_examples × window × input_dim`, row-major.
    pub(crate) inputs: Vec<f64>,
    pub(crate) targets: Vec<f64>,
    pub(crate) normalization: Normalization,
    pub(crate) splits: Splits,
    /// Source time index of each window's last input and of its target.
    pub(crate) input_end: Vec<usize>,
    pub(crate) target_time: Vec<usize>,
}

impl SeriesDataset {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Window `k` as `window × input_dim` values.
    pub fn example(&self, k: usize) -> &[f64] {
        let w = self.window * self.input_dim;
        &self.inputs[k * w..(k + 1) * w]
    }

    pub fn target(&self, k: usize) -> f64 {
        self.targets[k]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// `(last input time, target time)` of window `k` in source-series
    /// coordinates.
    pub fn times(&self, k: usize) -> (usize, usize) {
        (self.input_end[k], self.target_time[k])
    }
}

impl Dataset for SeriesDataset {
    fn len(&self) -> usize {
        self.targets.len()
    }

    fn input_spec(&self) -> InputSpec {
        InputSpec::Dense { dim: self.input_dim }
    }

    fn target_kind(&self) -> TargetKind {
        TargetKind::Regression
    }

    fn splits(&self) -> &Splits {
        &self.splits
    }

    fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut x = Vec::with_capacity(indices.len() * self.window * self.input_dim);
        let mut y = Vec::with_capacity(indices.len());
        for &k in indices {
            if k >= self.len() {
                return Err(Error::Data(format!("example {k} out of range ({} examples)", self.len())));
            }
            x.extend_from_slice(self.example(k));
            y.push(self.targets[k]);
        }
        Ok(Batch {
            input: BatchInput::Dense(Tensor::new(vec![indices.len(), self.window, self.input_dim], x)?),
            targets: Tensor::new(vec![indices.len(), 1], y)?,
        })
    }

    fn fingerprint(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for v in self.inputs.iter().chain(&self.targets) {
            fnv1a(&mut h, &v.to_bits().to_le_bytes());
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvOptions {
    pub value_column: String,
    #[serde(default = "default_date_column")]
    pub date_column: String,
    pub window: usize,
    pub horizon: usize,
    /// Keep the last observation of each calendar month.
    #[serde(default)]
    pub monthly: bool,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

impl CsvOptions {
    /// Options with the default date column and split fractions.
    pub fn new(value_column: impl Into<String>, window: usize, horizon: usize) -> Self {
        Self {
            value_column: value_column.into(),
            date_column: default_date_column(),
            window,
            horizon,
            monthly: false,
            train_frac: default_train_frac(),
            val_frac: default_val_frac(),
        }
    }
}

fn default_date_column() -> String {
    "date".into()
}

fn default_train_frac() -> f64 {
    0.7
}

fn default_val_frac() -> f64 {
    0.15
}

fn parse_date(raw: &str) -> Option<NaiveDate> {
    let s = raw.trim();
    NaiveDate::parse_from_str(s.get(..10).unwrap_or(s), "%Y-%m-%d").ok()
}

/// Reads a `date,value,...` CSV (header row, ISO-8601 dates), log-transforms
/// and normalizes the value column with statistics from the training
/// windows only, and cuts sliding windows of `window` steps each predicting
/// the value `horizon` steps after the window's last step.
pub fn load_csv_series(path: &Path, opts: &CsvOptions) -> Result<SeriesDataset> {
    if opts.window == 0 || opts.horizon == 0 {
        return Err(Error::Config("window and horizon must be at least 1".into()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("column `{name}` not found in {}", path.display())))
    };
    let (date_col, value_col) = (col(&opts.date_column)?, col(&opts.value_column)?);

    let mut rows: Vec<(NaiveDate, f64)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("row {line}: {e}")))?;
        let date = rec
            .get(date_col)
            .and_then(parse_date)
            .ok_or_else(|| Error::Data(format!("row {line}: unparseable date")))?;
        let raw = rec.get(value_col).unwrap_or("").trim();
        let value: f64 = raw
            .parse()
            .map_err(|_| Error::Data(format!("row {line}: value `{raw}` is not a number")))?;
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::Data(format!("row {line}: value {value} must be positive for the log transform")));
        }
        rows.push((date, value));
    }
    rows.sort_by_key(|r| r.0);
    if opts.monthly {
        let mut monthly: Vec<(NaiveDate, f64)> = Vec::new();
        for r in rows {
            match monthly.last_mut() {
                Some(last) if (last.0.year(), last.0.month()) == (r.0.year(), r.0.month()) => *last = r,
                _ => monthly.push(r),
            }
        }
        rows = monthly;
    }
    let logs: Vec<f64> = rows.iter().map(|r| r.1.ln()).collect();
    series_from_log_values(&logs, opts.window, opts.horizon, opts.train_frac, opts.val_frac)
}

/// Windows an already log-transformed series.
pub(crate) fn series_from_log_values(
    logs: &[f64],
    window: usize,
    horizon: usize,
    train_frac: f64,
    val_frac: f64,
) -> Result<SeriesDataset> {
    let span = window + horizon;
    if logs.len() < span {
        return Err(Error::Data(format!(
            "{} rows cannot fill one window of {window} steps with horizon {horizon}",
            logs.len()
        )));
    }
    let n = logs.len() - span + 1;
    let splits = Splits::fractions(n, train_frac, val_frac);
    // Everything up to the last training target is training-time data.
    let train_end = splits.train.end - 1 + window - 1 + horizon;
    let normalization = Normalization::fit(&logs[..=train_end]);
    let y: Vec<f64> = logs.iter().map(|&l| normalization.normalize(0, l)).collect();

    let mut inputs = Vec::with_capacity(n * window);
    let mut targets = Vec::with_capacity(n);
    let mut input_end = Vec::with_capacity(n);
    let mut target_time = Vec::with_capacity(n);
    for k in 0..n {
        inputs.extend_from_slice(&y[k..k + window]);
        targets.push(y[k + window - 1 + horizon]);
        input_end.push(k + window - 1);
        target_time.push(k + window - 1 + horizon);
    }
    Ok(SeriesDataset {
        window,
        input_dim: 1,
        inputs,
        targets,
        normalization,
        splits,
        input_end,
        target_time,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongMemoryOptions {
    pub num_examples: usize,
    pub window: usize,
    pub lag: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.05
}

impl LongMemoryOptions {
    /// 0-based position of the value the target depends on.
    pub fn key_position(&self) -> usize {
        self.window - self.lag - 1
    }
}

/// Nonlinear read-out of the remembered value.
pub fn long_memory_target(x: f64) -> f64 {
    (2.0 * x).tanh()
}

/// Long-range dependency task. Each example is `window` steps of two
/// channels: white noise `x_t ~ U(-1, 1)` and a marker that is 1 only at the
/// key position `window − lag − 1`. The target is
/// `tanh(2·x_key) + noise·ε`, `ε ~ U(-√3, √3)` (unit variance).
pub fn synth_long_memory(opts: &LongMemoryOptions) -> Result<SeriesDataset> {
    if opts.lag >= opts.window {
        return Err(Error::Config(format!("lag {} must be smaller than window {}", opts.lag, opts.window)));
    }
    if opts.num_examples == 0 {
        return Err(Error::Config("num_examples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (t, key) = (opts.window, opts.key_position());
    let mut inputs = Vec::with_capacity(opts.num_examples * t * 2);
    let mut targets = Vec::with_capacity(opts.num_examples);
    let root3 = 3f64.sqrt();
    for _ in 0..opts.num_examples {
        let mut key_value = 0.0;
        for step in 0..t {
            let x: f64 = rng.gen_range(-1.0..1.0);
            if step == key {
                key_value = x;
            }
            inputs.push(x);
            inputs.push(if step == key { 1.0 } else { 0.0 });
        }
        let eps: f64 = rng.gen_range(-root3..root3);
        targets.push(long_memory_target(key_value) + opts.noise * eps);
    }
    let n = opts.num_examples;
    Ok(SeriesDataset {
        window: t,
        input_dim: 2,
        inputs,
        targets,
        normalization: Normalization::identity(2),
        splits: Splits::fractions(n, 0.7, 0.15),
        input_end: (0..n).map(|k| k * (t + 1) + t - 1).collect(),
        target_time: (0..n).map(|k| k * (t + 1) + t).collect(),
    })
}
