//! Binary cache for [`SeriesDataset`].
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic   b"AILADSET"
//! version u32 (= 1)
//! window, input_dim, num_examples                      u64 × 3
//! train.start, train.end, val.start, val.end,
//! test.start, test.end                                 u64 × 6
//! features                                             u64
//! mean[features], std[features]                        f64
//! inputs[num_examples · window · input_dim]            f64
//! targets[num_examples]                                f64
//! input_end[num_examples], target_time[num_examples]   u64
//! ```

use std::fs;
use std::path::Path;

use super::{Normalization, SeriesDataset, Splits};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AILADSET";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Data("dataset cache is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Data("dataset cache value overflows usize".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("dataset cache size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl SeriesDataset {
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let s = &self.splits;
        for v in [
            self.window,
            self.input_dim,
            self.targets.len(),
            s.train.start,
            s.train.end,
            s.val.start,
            s.val.end,
            s.test.start,
            s.test.end,
            self.normalization.mean.len(),
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        let floats = self
            .normalization
            .mean
            .iter()
            .chain(&self.normalization.std)
            .chain(&self.inputs)
            .chain(&self.targets);
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.input_end.iter().chain(&self.target_time) {
            out.extend_from_slice(&(*v as u64).to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { buf: &buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data(format!("{} is not a dataset cache", path.display())));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Data(format!("unsupported dataset cache version {version}")));
        }
        let (window, input_dim, n) = (r.usize()?, r.usize()?, r.usize()?);
        let mut b = [0usize; 6];
        for v in &mut b {
            *v = r.usize()?;
        }
        let features = r.usize()?;
        let mean = r.f64s(features)?;
        let std = r.f64s(features)?;
        let inputs = r.f64s(n * window * input_dim)?;
        let targets = r.f64s(n)?;
        let mut idx = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            idx.push(r.usize()?);
        }
        if r.pos != buf.len() {
            return Err(Error::Data("trailing bytes in dataset cache".into()));
        }
        let target_time = idx.split_off(n);
        Ok(SeriesDataset {
            window,
            input_dim,
            inputs,
            targets,
            normalization: Normalization { mean, std },
            splits: Splits {
                train: b[0]..b[1],
                val: b[2]..b[3],
                test: b[4]..b[5],
            },
            input_end: idx,
            target_time,
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::data::{synth_long_memory, LongMemoryOptions, SeriesDataset};

    #[test]
    fn cache_round_trips_and_rejects_garbage() {
        let ds = synth_long_memory(&LongMemoryOptions {
            num_examples: 30,
            window: 6,
            lag: 2,
            noise: 0.1,
            seed: 2,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.bin");
        ds.write_cache(&p).unwrap();
        assert_eq!(SeriesDataset::read_cache(&p).unwrap(), ds);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(SeriesDataset::read_cache(&p).is_err());
    }
}
