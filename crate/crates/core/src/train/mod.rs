//! Losses, Adam, early-stopped training and multi-seed execution.

mod adam;
mod loss;
mod report;

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_update, clip_global_norm, Adam, AdamConfig, Moments};
pub use loss::{binary_ce, mse_loss, multiclass_ce, LossKind};
pub use report::{
    read_report, write_report, EpochRecord, Metric, RunReport, Timings, CHECKPOINT_FILE, REPORT_FILE,
    REPORT_SCHEMA_VERSION, TIMINGS_FILE,
};

use crate::autodiff::Tape;
use crate::data::{batch_indices, Batch, BatchInput, Dataset, InputSpec};
use crate::error::{Error, Result};
use crate::model::{write_checkpoint, KnockoutMask, Model, ModelConfig};
use crate::params::param_seed;

fn default_lr() -> f64 {
    1e-3
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    32
}
fn default_patience() -> usize {
    10
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_loss() -> LossKind {
    LossKind::Mse
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            betas: default_betas(),
            adam_eps: default_eps(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            early_stop_patience: default_patience(),
            seeds: default_seeds(),
            loss: default_loss(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail("lr must be a finite non-negative number");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive");
        }
        if self.early_stop_patience == 0 {
            return fail("early_stop_patience must be at least 1");
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail("grad_clip must be positive");
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
        }
    }
}

/// Mean loss and metric over a set of examples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: f64,
    pub examples: usize,
}

/// Evaluates `model` on `range` without recording gradients.
pub fn evaluate(
    model: &Model,
    data: &dyn Dataset,
    range: Range<usize>,
    loss: LossKind,
    batch_size: usize,
    knockout: &KnockoutMask,
) -> Result<Evaluation> {
    let n = range.len();
    if n == 0 {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let (mut loss_sum, mut metric_sum) = (0.0, 0.0);
    for idx in batch_indices(range, batch_size, None) {
        let batch = finite_batch(data, &idx)?;
        let tape = Tape::new();
        let bound = model.params().bind(&tape, false);
        let pred = model.forward(&tape, &bound, &batch.input, knockout)?.prediction;
        loss_sum += loss.apply(&pred, &batch.targets)?.item() * idx.len() as f64;
        metric_sum += loss.metric_sum(&pred.value(), &batch.targets)?;
    }
    Ok(Evaluation {
        loss: loss_sum / n as f64,
        metric: metric_sum / n as f64,
        examples: n,
    })
}

/// Fetches a batch, rejecting non-finite inputs or targets as bad data so
/// they are not mistaken for a diverging model.
fn finite_batch(data: &dyn Dataset, idx: &[usize]) -> Result<Batch> {
    let batch = data.batch(idx)?;
    let inputs_ok = match &batch.input {
        BatchInput::Dense(t) => t.all_finite(),
        BatchInput::Tokens { .. } => true,
    };
    if !inputs_ok || !batch.targets.all_finite() {
        return Err(Error::Data(format!(
            "non-finite value in the batch of examples {:?}",
            idx
        )));
    }
    Ok(batch)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteGradient { .. })
}

/// One optimizer step on a mini-batch; returns the batch loss.
fn train_step(
    model: &mut Model,
    data: &dyn Dataset,
    idx: &[usize],
    cfg: &TrainConfig,
    adam: &mut Adam,
    knockout: &KnockoutMask,
) -> Result<f64> {
    let batch = finite_batch(data, idx)?;
    let tape = Tape::new();
    let bound = model.params().bind(&tape, true);
    let pred = model.forward(&tape, &bound, &batch.input, knockout)?.prediction;
    let loss = cfg.loss.apply(&pred, &batch.targets)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grads = tape.backward(&loss)?;
    let mut by_name = BTreeMap::new();
    for (name, var) in bound.iter() {
        if let Some(g) = grads.get(var) {
            by_name.insert(name.to_string(), g.clone());
        }
    }
    if let Some(max) = cfg.grad_clip {
        clip_global_norm(&mut by_name, max);
    }
    adam.step(model.params_mut(), &by_name)?;
    Ok(value)
}

/// Trains `model` in place and returns its report. The model ends up holding
/// the best-validation parameters. A run aborted by a non-finite value is
/// returned as `Ok` with [`RunReport::diverged`] set.
pub fn train(model: &mut Model, data: &dyn Dataset, cfg: &TrainConfig, seed: u64) -> Result<RunReport> {
    train_with_knockout(model, data, cfg, seed, &KnockoutMask::none())
}

/// [`train`] with some layers held at zero throughout.
pub fn train_with_knockout(
    model: &mut Model,
    data: &dyn Dataset,
    cfg: &TrainConfig,
    seed: u64,
    knockout: &KnockoutMask,
) -> Result<RunReport> {
    cfg.validate()?;
    if !cfg.loss.compatible(model.config().head) {
        return Err(Error::Config(format!(
            "loss {:?} does not fit a {:?} head",
            cfg.loss,
            model.config().head
        )));
    }
    if model.input_spec() != data.input_spec() {
        return Err(Error::Config(format!(
            "model expects {:?} but the dataset provides {:?}",
            model.input_spec(),
            data.input_spec()
        )));
    }
    let splits = data.splits().clone();
    if splits.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let val_range = splits.val_or_train();
    let test_range = splits.test_or_val();
    let bs = cfg.batch_size;

    let started = Instant::now();
    let initial = evaluate(model, data, splits.train.clone(), cfg.loss, bs, knockout)?;
    let initial_val = evaluate(model, data, val_range.clone(), cfg.loss, bs, knockout)?;
    let mut report = RunReport {
        seed,
        model: model.config().clone(),
        train: cfg.clone(),
        dataset_fingerprint: data.fingerprint(),
        param_count: model.param_count(),
        initial_train_loss: initial.loss,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        final_train_loss: initial.loss,
        test_loss: f64::NAN,
        test_metric: Metric {
            name: cfg.loss.metric_name().into(),
            value: f64::NAN,
        },
        stopped_early: false,
        diverged: None,
        timings: Timings::default(),
    };
    let mut best_params = model.params().clone();
    let mut adam = Adam::new(cfg.adam());
    let mut stale = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        let shuffle = param_seed(seed, &format!("shuffle/{epoch}"));
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in batch_indices(splits.train.clone(), bs, Some(shuffle)) {
            match train_step(model, data, &idx, cfg, &mut adam, knockout) {
                Ok(l) => {
                    sum += l * idx.len() as f64;
                    count += idx.len();
                }
                Err(e) if is_divergence(&e) => {
                    report.diverged = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let val = match evaluate(model, data, val_range.clone(), cfg.loss, bs, knockout) {
            Ok(v) if v.loss.is_finite() => v,
            Ok(_) => {
                report.diverged = Some(format!("epoch {epoch}: validation loss is not finite"));
                break;
            }
            Err(e) if is_divergence(&e) => {
                report.diverged = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / count as f64,
            val_loss: val.loss,
        });
        if val.loss < report.best_val_loss {
            report.best_val_loss = val.loss;
            report.best_epoch = epoch;
            best_params = model.params().clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                report.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    if report.best_epoch == 0 {
        // Diverged during the first epoch: the initial parameters stand.
        report.best_val_loss = initial_val.loss;
    }
    model.set_params(best_params);
    report.final_train_loss = evaluate(model, data, splits.train.clone(), cfg.loss, bs, knockout)?.loss;
    report.timings.train_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let test = evaluate(model, data, test_range, cfg.loss, bs, knockout)?;
    report.timings.inference_seconds = started.elapsed().as_secs_f64();
    report.test_loss = test.loss;
    report.test_metric.value = test.metric;
    Ok(report)
}

/// A trained model together with its report.
pub struct SeedRun {
    pub model: Model,
    pub report: RunReport,
}

/// Builds a fresh model per seed and trains them in parallel. Results are
/// returned in seed order.
pub fn run_seeds(config: &ModelConfig, input: InputSpec, data: &dyn Dataset, cfg: &TrainConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let mut model = Model::new(config.clone(), input, seed)?;
            let report = train(&mut model, data, cfg, seed)?;
            Ok(SeedRun { model, report })
        })
        .collect()
}

/// Writes `report.jsonl`, `timings.json` and `model.ckpt` into `dir`.
pub fn write_run_dir(dir: &Path, run: &SeedRun) -> Result<()> {
    write_report(dir, &run.report)?;
    let extra = serde_json::json!({
        "dataset_fingerprint": run.report.dataset_fingerprint,
        "best_epoch": run.report.best_epoch,
        "train": run.report.train,
    });
    write_checkpoint(&dir.join(CHECKPOINT_FILE), &run.model, run.report.seed, extra)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, BatchInput, Splits, TargetKind};
    use crate::layers::BaseKind;
    use crate::model::{HeadKind, Variant};
    use crate::tensor::Tensor;

    /// `y = 1.5·x` over scalar inputs, for MLP bases.
    struct Line {
        xs: Vec<f64>,
        splits: Splits,
    }

    impl Line {
        fn new(n: usize) -> Self {
            Self {
                xs: (0..n).map(|i| (i as f64 / n as f64) * 2.0 - 1.0).collect(),
                splits: Splits {
                    train: 0..n,
                    val: 0..0,
                    test: 0..0,
                },
            }
        }
    }

    impl Dataset for Line {
        fn len(&self) -> usize {
            self.xs.len()
        }
        fn input_spec(&self) -> InputSpec {
            InputSpec::Dense { dim: 1 }
        }
        fn target_kind(&self) -> TargetKind {
            TargetKind::Regression
        }
        fn splits(&self) -> &Splits {
            &self.splits
        }
        fn batch(&self, idx: &[usize]) -> Result<Batch> {
            let x: Vec<f64> = idx.iter().map(|&i| self.xs[i]).collect();
            let y = x.iter().map(|v| 1.5 * v).collect();
            Ok(Batch {
                input: BatchInput::Dense(Tensor::matrix(idx.len(), 1, x)?),
                targets: Tensor::matrix(idx.len(), 1, y)?,
            })
        }
        fn fingerprint(&self) -> u64 {
            0
        }
    }

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            num_layers: 1,
            hidden: 4,
            base: BaseKind::Mlp,
            head: HeadKind::Regression,
            ..ModelConfig::new(Variant::Plain)
        };
        Model::new(cfg, InputSpec::Dense { dim: 1 }, seed).unwrap()
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.betas, c.adam_eps), (1e-3, (0.9, 0.999), 1e-8));
        assert_eq!((c.batch_size, c.early_stop_patience, c.seeds.len()), (32, 10, 5));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig { seeds: vec![], ..Default::default() },
            TrainConfig { early_stop_patience: 0, ..Default::default() },
            TrainConfig { lr: f64::NAN, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn patience_one_with_frozen_weights_stops_at_epoch_two() {
        let data = Line::new(16);
        let mut m = tiny_model(0);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 50,
            early_stop_patience: 1,
            ..Default::default()
        };
        let r = train(&mut m, &data, &cfg, 0).unwrap();
        assert_eq!(r.epochs.len(), 2);
        assert!(r.stopped_early);
        assert_eq!(r.best_epoch, 1);
    }

    #[test]
    fn loss_decreases_and_best_is_restored() {
        let data = Line::new(32);
        let mut m = tiny_model(3);
        let cfg = TrainConfig {
            lr: 1e-2,
            epochs: 60,
            batch_size: 8,
            ..Default::default()
        };
        let r = train(&mut m, &data, &cfg, 3).unwrap();
        assert!(r.final_train_loss < 0.5 * r.initial_train_loss);
        let best = r.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert!(r.best_val_loss <= best);
        let now = evaluate(&m, &data, 0..32, LossKind::Mse, 32, &KnockoutMask::none()).unwrap();
        assert_eq!(now.loss, r.best_val_loss);
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn head_and_loss_must_agree() {
        let data = Line::new(4);
        let mut m = tiny_model(0);
        let cfg = TrainConfig { loss: LossKind::BinaryCe, ..Default::default() };
        assert!(matches!(train(&mut m, &data, &cfg, 0), Err(Error::Config(_))));
    }
}
