//! Synthetic token classification.
//!
//! Every sequence carries two planted tokens, [`PATTERN_A`] and
//! [`PATTERN_B`], among random filler ids. The label is 1 when A comes
//! before B and 0 otherwise. Sequences are left-padded with [`PAD_ID`] so
//! the final position always holds a real token.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fnv1a, Batch, BatchInput, Dataset, InputSpec, Splits, TargetKind, FNV_OFFSET};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const PATTERN_A: usize = 1;
pub const PATTERN_B: usize = 2;
const FIRST_FILLER: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenTaskOptions {
    pub num_examples: usize,
    pub max_len: usize,
    pub vocab: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_embed_dim() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDataset {
    /// `num_examples × max_len` ids.
    ids: Vec<usize>,
    labels: Vec<usize>,
    max_len: usize,
    vocab: usize,
    embed_dim: usize,
    splits: Splits,
}

impl TokenDataset {
    pub fn sequence(&self, k: usize) -> &[usize] {
        &self.ids[k * self.max_len..(k + 1) * self.max_len]
    }

    pub fn label(&self, k: usize) -> usize {
        self.labels[k]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }
}

/// Reads the label straight off the planted tokens.
pub fn pattern_oracle_label(seq: &[usize]) -> usize {
    let a = seq.iter().position(|&t| t == PATTERN_A);
    let b = seq.iter().position(|&t| t == PATTERN_B);
    match (a, b) {
        (Some(a), Some(b)) => usize::from(a < b),
        _ => 0,
    }
}

pub fn synth_token_task(opts: &TokenTaskOptions) -> Result<TokenDataset> {
    if opts.vocab <= FIRST_FILLER {
        return Err(Error::Config(format!(
            "vocab {} leaves no filler tokens after pad and the two pattern ids",
            opts.vocab
        )));
    }
    if opts.max_len < 2 {
        return Err(Error::Config("max_len must be at least 2 to hold both pattern tokens".into()));
    }
    if opts.num_examples == 0 {
        return Err(Error::Config("num_examples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let l = opts.max_len;
    let mut ids = Vec::with_capacity(opts.num_examples * l);
    let mut labels = Vec::with_capacity(opts.num_examples);
    for k in 0..opts.num_examples {
        let label = k % 2;
        let real = rng.gen_range((l / 2).max(2)..=l);
        let mut seq: Vec<usize> = (0..real).map(|_| rng.gen_range(FIRST_FILLER..opts.vocab)).collect();
        let mut pos = sample(&mut rng, real, 2).into_vec();
        pos.sort_unstable();
        let (first, second) = if label == 1 { (PATTERN_A, PATTERN_B) } else { (PATTERN_B, PATTERN_A) };
        seq[pos[0]] = first;
        seq[pos[1]] = second;
        ids.extend(std::iter::repeat(PAD_ID).take(l - real));
        ids.extend(seq);
        labels.push(label);
    }
    Ok(TokenDataset {
        ids,
        labels,
        max_len: l,
        vocab: opts.vocab,
        embed_dim: opts.embed_dim,
        splits: Splits::fractions(opts.num_examples, 0.7, 0.15),
    })
}

impl Dataset for TokenDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn input_spec(&self) -> InputSpec {
        InputSpec::Tokens {
            vocab: self.vocab,
            embed_dim: self.embed_dim,
            pad_id: PAD_ID,
        }
    }

    fn target_kind(&self) -> TargetKind {
        TargetKind::Binary
    }

    fn splits(&self) -> &Splits {
        &self.splits
    }

    fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut ids = Vec::with_capacity(indices.len() * self.max_len);
        let mut y = Vec::with_capacity(indices.len());
        for &k in indices {
            if k >= self.len() {
                return Err(Error::Data(format!("example {k} out of range ({} examples)", self.len())));
            }
            ids.extend_from_slice(self.sequence(k));
            y.push(self.labels[k] as f64);
        }
        Ok(Batch {
            input: BatchInput::Tokens {
                ids,
                batch: indices.len(),
                len: self.max_len,
            },
            targets: Tensor::new(vec![indices.len(), 1], y)?,
        })
    }

    fn fingerprint(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for v in self.ids.iter().chain(&self.labels) {
            fnv1a(&mut h, &(*v as u64).to_le_bytes());
        }
        h
    }
}
