//! Reference predictors used to calibrate what "learning" means on the
//! synthetic tasks.

use super::{Dataset, SeriesDataset, TokenDataset};
use crate::error::{Error, Result};

/// Solves `min ‖Xβ − y‖²` via the normal equations with partial pivoting.
/// All-zero columns are dropped (their coefficient is 0).
pub fn solve_least_squares(x: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let p = x.first().map_or(0, Vec::len);
    let mut ata = vec![vec![0.0; p]; p];
    let mut aty = vec![0.0; p];
    for (row, &t) in x.iter().zip(y) {
        for i in 0..p {
            aty[i] += row[i] * t;
            for j in 0..p {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let active: Vec<usize> = (0..p).filter(|&i| ata[i][i] > 1e-12).collect();
    let m = active.len();
    let mut a: Vec<Vec<f64>> = active
        .iter()
        .map(|&i| {
            let mut r: Vec<f64> = active.iter().map(|&j| ata[i][j]).collect();
            r.push(aty[i]);
            r
        })
        .collect();
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        if a[piv][col].abs() < 1e-12 {
            return Err(Error::Data("least-squares system is singular".into()));
        }
        a.swap(col, piv);
        for r in 0..m {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut beta = vec![0.0; p];
    for (k, &i) in active.iter().enumerate() {
        beta[i] = a[k][m] / a[k][k];
    }
    Ok(beta)
}

/// Fits `y ≈ β₀ + βᵀ x_last` on the training split using only the final
/// time step of each window and returns its MSE on the validation split
/// (or on the training split when there is no validation data).
pub fn last_step_least_squares_mse(ds: &SeriesDataset) -> Result<f64> {
    let dim = ds.input_dim();
    let features = |k: usize| {
        let ex = ds.example(k);
        let mut row = vec![1.0];
        row.extend_from_slice(&ex[ex.len() - dim..]);
        row
    };
    let splits = ds.splits();
    let x: Vec<Vec<f64>> = splits.train.clone().map(features).collect();
    let y: Vec<f64> = splits.train.clone().map(|k| ds.target(k)).collect();
    let beta = solve_least_squares(&x, &y)?;
    let eval = if splits.val.is_empty() { splits.train.clone() } else { splits.val.clone() };
    let n = eval.len() as f64;
    Ok(eval
        .map(|k| {
            let pred: f64 = features(k).iter().zip(&beta).map(|(a, b)| a * b).sum();
            (pred - ds.target(k)).powi(2)
        })
        .sum::<f64>()
        / n)
}

/// Accuracy of always predicting the training split's most frequent label,
/// measured over the whole dataset.
pub fn majority_class_accuracy(ds: &TokenDataset) -> f64 {
    let train = &ds.labels()[ds.splits().train.clone()];
    let ones = train.iter().filter(|&&l| l == 1).count();
    let majority = usize::from(ones * 2 > train.len());
    ds.labels().iter().filter(|&&l| l == majority).count() as f64 / ds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_long_memory, synth_token_task, LongMemoryOptions, TokenTaskOptions};

    #[test]
    fn recovers_exact_linear_model() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![1.0, i as f64, (i * i % 7) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 0.5 + 2.0 * r[1] - 0.25 * r[2]).collect();
        let b = solve_least_squares(&x, &y).unwrap();
        for (got, want) in b.iter().zip([0.5, 2.0, -0.25]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn last_step_oracle_cannot_see_the_key() {
        let ds = synth_long_memory(&LongMemoryOptions {
            num_examples: 2000,
            window: 24,
            lag: 12,
            noise: 0.05,
            seed: 3,
        })
        .unwrap();
        let val = &ds.targets()[ds.splits().val.clone()];
        let mean = val.iter().sum::<f64>() / val.len() as f64;
        let var = val.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / val.len() as f64;
        let mse = last_step_least_squares_mse(&ds).unwrap();
        // Independent of the target, so it does no better than the variance.
        assert!(mse > 0.95 * var && mse < 1.1 * var, "mse {mse} var {var}");
    }

    #[test]
    fn majority_baseline_near_half() {
        let ds = synth_token_task(&TokenTaskOptions {
            num_examples: 400,
            max_len: 12,
            vocab: 20,
            embed_dim: 4,
            seed: 1,
        })
        .unwrap();
        let acc = majority_class_accuracy(&ds);
        // Labels alternate, so the count is exact up to one example.
        assert!((acc - 0.5).abs() <= 1.0 / 400.0 + 1e-12);
    }
}
