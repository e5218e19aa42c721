//! Datasets, splits and mini-batching.
//!
//! Two concrete dataset shapes exist: [`SeriesDataset`] (dense windows of
//! real values predicting a scalar, from CSV files or the long-memory
//! generator) and [`TokenDataset`] (padded token sequences with class
//! labels). Both implement [`Dataset`].

mod cache;
mod oracle;
mod series;
mod tokens;

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use oracle::{last_step_least_squares_mse, majority_class_accuracy, solve_least_squares};
pub use series::{load_csv_series, synth_long_memory, CsvOptions, LongMemoryOptions, Normalization, SeriesDataset};
pub use tokens::{pattern_oracle_label, synth_token_task, TokenDataset, TokenTaskOptions, PAD_ID, PATTERN_A, PATTERN_B};

use crate::error::Result;
use crate::tensor::Tensor;

/// Shape of what a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// `[batch, time, dim]` windows (or `[batch, dim]` for MLP bases).
    Dense { dim: usize },
    /// `[batch, len]` token ids, embedded by a learnable table.
    Tokens { vocab: usize, embed_dim: usize, pad_id: usize },
}

/// What the targets mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Regression,
    Binary,
    Multiclass(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchInput {
    Dense(Tensor),
    Tokens { ids: Vec<usize>, batch: usize, len: usize },
}

impl BatchInput {
    pub fn batch_size(&self) -> usize {
        match self {
            BatchInput::Dense(t) => t.shape()[0],
            BatchInput::Tokens { batch, .. } => *batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: BatchInput,
    /// `[batch, 1]`: regression values, or class indices stored as `f64`.
    pub targets: Tensor,
}

/// Contiguous, ordered, disjoint example ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// Chronological `train_frac / val_frac / rest` split of `n` examples,
    /// keeping at least one training example.
    pub fn fractions(n: usize, train_frac: f64, val_frac: f64) -> Self {
        let n_train = ((n as f64 * train_frac).floor() as usize).clamp(1.min(n), n);
        let n_val = ((n as f64 * val_frac).floor() as usize).min(n - n_train);
        Self {
            train: 0..n_train,
            val: n_train..n_train + n_val,
            test: n_train + n_val..n,
        }
    }

    /// Validation range, or the training range when there is none.
    pub fn val_or_train(&self) -> Range<usize> {
        if self.val.is_empty() { self.train.clone() } else { self.val.clone() }
    }

    /// Test range, falling back like [`Splits::val_or_train`].
    pub fn test_or_val(&self) -> Range<usize> {
        if self.test.is_empty() { self.val_or_train() } else { self.test.clone() }
    }
}

pub trait Dataset: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn input_spec(&self) -> InputSpec;

    fn target_kind(&self) -> TargetKind;

    fn splits(&self) -> &Splits;

    /// Gathers the given examples into one batch.
    fn batch(&self, indices: &[usize]) -> Result<Batch>;

    /// Hash of every input and target value.
    fn fingerprint(&self) -> u64;
}

/// Partitions `indices` into batches of `batch_size`, shuffled with
/// `shuffle_seed` when given. The last batch may be partial.
pub fn batch_indices(indices: Range<usize>, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = indices.collect();
    if let Some(seed) = shuffle_seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Iterator of materialized batches over `indices`.
pub fn batches<'a>(
    dataset: &'a dyn Dataset,
    indices: Range<usize>,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> impl Iterator<Item = Result<Batch>> + 'a {
    batch_indices(indices, batch_size, shuffle_seed)
        .into_iter()
        .map(move |b| dataset.batch(&b))
}

pub(crate) fn fnv1a(h: &mut u64, bytes: &[u8]) {
    for b in bytes {
        *h ^= u64::from(*b);
        *h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
}

pub(crate) const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
