//! Byte-level corpus handling.

use std::path::Path;

use rand::Rng;

use crate::error::{contract_err, Error, Result};

/// Raw bytes of a text file; each byte is one token.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
}

impl Corpus {
    /// Contiguous split: the first `train_fraction` of the bytes train, the
    /// rest validate.
    pub fn split(bytes: Vec<u8>, train_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
        }
        let cut = (bytes.len() as f64 * train_fraction).round() as usize;
        let mut train = bytes;
        let val = train.split_off(cut.min(train.len()));
        Ok(Self { train, val })
    }

    pub fn load(path: &Path, train_fraction: f64) -> Result<Self> {
        let bytes = read_text(path)?;
        Self::split(bytes, train_fraction)
    }
}

/// Reads a corpus file, reporting a missing or unreadable file as a
/// configuration problem that names the path.
pub fn read_text(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("cannot read corpus {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Config(format!("corpus {} is empty", path.display())));
    }
    Ok(bytes)
}

pub fn tokens(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// `batch` random windows of `seq + 1` bytes, returned as row-major inputs
/// and next-byte targets.
pub fn sample_batch<R: Rng + ?Sized>(data: &[u8], batch: usize, seq: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if data.len() < seq + 1 {
        return Err(contract_err!("training text of {} bytes is shorter than one window of {}", data.len(), seq + 1));
    }
    let mut x = Vec::with_capacity(batch * seq);
    let mut y = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let start = rng.random_range(0..=data.len() - seq - 1);
        let w = &data[start..start + seq + 1];
        x.extend(w[..seq].iter().map(|&b| b as usize));
        y.extend(w[1..].iter().map(|&b| b as usize));
    }
    Ok((x, y))
}

/// Start offsets of the non-overlapping full windows of `seq + 1` bytes
/// (stride `seq`).
pub fn eval_windows(len: usize, seq: usize) -> Vec<usize> {
    if len < seq + 1 {
        return Vec::new();
    }
    (0..(len - 1) / seq).map(|i| i * seq).collect()
}
