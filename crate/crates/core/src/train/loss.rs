//! Batch-mean losses as fused tape ops, plus the matching evaluation
//! metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::HeadKind;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    BinaryCe,
    MulticlassCe,
}

impl LossKind {
    pub fn for_head(head: HeadKind) -> Self {
        match head {
            HeadKind::Regression => LossKind::Mse,
            HeadKind::BinaryClassification => LossKind::BinaryCe,
            HeadKind::Multiclass(_) => LossKind::MulticlassCe,
        }
    }

    pub fn compatible(&self, head: HeadKind) -> bool {
        *self == Self::for_head(head)
    }

    pub fn apply(&self, pred: &Var, targets: &Tensor) -> Result<Var> {
        match self {
            LossKind::Mse => mse_loss(pred, targets),
            LossKind::BinaryCe => binary_ce(pred, targets),
            LossKind::MulticlassCe => multiclass_ce(pred, targets),
        }
    }

    /// Name of the reported test metric.
    pub fn metric_name(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::BinaryCe | LossKind::MulticlassCe => "accuracy",
        }
    }

    /// Whether a larger metric is better.
    pub fn higher_is_better(&self) -> bool {
        !matches!(self, LossKind::Mse)
    }

    /// Sum (not mean) of the per-example metric over a batch, so callers can
    /// accumulate across batches.
    pub fn metric_sum(&self, pred: &Tensor, targets: &Tensor) -> Result<f64> {
        check_rows("metric", pred, targets)?;
        Ok(match self {
            LossKind::Mse => pred.data().iter().zip(targets.data()).map(|(p, y)| (p - y).powi(2)).sum(),
            LossKind::BinaryCe => {
                let labels = binary_labels(targets)?;
                pred.data()
                    .iter()
                    .zip(labels)
                    .filter(|(z, y)| usize::from(**z > 0.0) == *y)
                    .count() as f64
            }
            LossKind::MulticlassCe => {
                let k = pred.last_dim();
                let labels = class_labels(targets, k)?;
                pred.data()
                    .chunks(k)
                    .zip(labels)
                    .filter(|(row, y)| argmax(row) == *y)
                    .count() as f64
            }
        })
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn check_rows(op: &'static str, pred: &Tensor, targets: &Tensor) -> Result<()> {
    if pred.rank() != 2 || targets.shape() != [pred.shape()[0], 1] {
        return Err(Error::dim(
            op,
            format!("predictions {:?} vs targets {:?}", pred.shape(), targets.shape()),
        ));
    }
    Ok(())
}

fn binary_labels(targets: &Tensor) -> Result<Vec<usize>> {
    targets
        .data()
        .iter()
        .map(|&y| match y {
            y if y == 0.0 => Ok(0),
            y if y == 1.0 => Ok(1),
            y => Err(Error::Data(format!("binary label {y} is not 0 or 1"))),
        })
        .collect()
}

fn class_labels(targets: &Tensor, k: usize) -> Result<Vec<usize>> {
    targets
        .data()
        .iter()
        .map(|&y| {
            if y >= 0.0 && y.fract() == 0.0 && (y as usize) < k {
                Ok(y as usize)
            } else {
                Err(Error::Data(format!("class label {y} outside 0..{k}")))
            }
        })
        .collect()
}

/// Mean squared error over every element.
pub fn mse_loss(pred: &Var, targets: &Tensor) -> Result<Var> {
    let pv = pred.value();
    if pv.shape() != targets.shape() {
        return Err(Error::dim(
            "mse_loss",
            format!("predictions {:?} vs targets {:?}", pv.shape(), targets.shape()),
        ));
    }
    let y = targets.clone();
    let y2 = targets.clone();
    pred.tape().record(
        "mse_loss",
        &[pred],
        move |v| {
            let n = v[0].numel() as f64;
            let s: f64 = v[0].data().iter().zip(y.data()).map(|(p, t)| (p - t).powi(2)).sum();
            Ok(Tensor::scalar(s / n))
        },
        move |c| {
            let g = c.grad.item();
            let n = c.inputs[0].numel() as f64;
            vec![Some(c.inputs[0].zip_map(&y2, |p, t| g * 2.0 * (p - t) / n))]
        },
    )
}

/// Sigmoid cross-entropy on logits, `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn binary_ce(logits: &Var, targets: &Tensor) -> Result<Var> {
    check_rows("binary_ce", &logits.value(), targets)?;
    if logits.shape()[1] != 1 {
        return Err(Error::dim("binary_ce", format!("expected one logit per row, got {:?}", logits.shape())));
    }
    let labels: Vec<f64> = binary_labels(targets)?.into_iter().map(|l| l as f64).collect();
    let y2 = labels.clone();
    logits.tape().record(
        "binary_ce",
        &[logits],
        move |v| {
            let n = labels.len() as f64;
            let s: f64 = v[0]
                .data()
                .iter()
                .zip(&labels)
                .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                .sum();
            Ok(Tensor::scalar(s / n))
        },
        move |c| {
            let g = c.grad.item();
            let n = y2.len() as f64;
            let data = c.inputs[0]
                .data()
                .iter()
                .zip(&y2)
                .map(|(&z, &y)| g * (crate::autodiff::sigmoid(z) - y) / n)
                .collect();
            vec![Some(Tensor::from_parts(c.inputs[0].shape().to_vec(), data))]
        },
    )
}

/// Softmax cross-entropy over `[batch, k]` logits with integer labels.
pub fn multiclass_ce(logits: &Var, targets: &Tensor) -> Result<Var> {
    let lv = logits.value();
    check_rows("multiclass_ce", &lv, targets)?;
    let k = lv.last_dim();
    let labels = class_labels(targets, k)?;
    let l2 = labels.clone();
    logits.tape().record(
        "multiclass_ce",
        &[logits],
        move |v| {
            let b = labels.len() as f64;
            let s: f64 = v[0]
                .data()
                .chunks(k)
                .zip(&labels)
                .map(|(row, &y)| {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                    lse - row[y]
                })
                .sum();
            Ok(Tensor::scalar(s / b))
        },
        move |c| {
            let g = c.grad.item();
            let b = l2.len() as f64;
            let mut p = crate::autodiff::softmax_values(c.inputs[0], 1);
            for (row, &y) in p.data_mut().chunks_mut(k).zip(&l2) {
                row[y] -= 1.0;
                row.iter_mut().for_each(|v| *v *= g / b);
            }
            vec![Some(p)]
        },
    )
}
