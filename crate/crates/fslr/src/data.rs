//! Deterministic desk-scale data sources.
//!
//! Three dataset kinds: synthetic Gaussian-cluster classification, a
//! byte-level character corpus, and the CIFAR-10 binary format read
//! bit-exact. Every dataset reserves a slice of itself for probe batches so
//! the measurement stream never overlaps the training stream.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Fraction of each dataset reserved for probe batches.
pub const PROBE_FRACTION: f64 = 0.1;

const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

#[derive(Debug, Clone)]
pub enum BatchInput {
    /// Dense features, shape [n, d].
    Dense(Tensor),
    /// Token ids, row-major [n, t].
    Tokens { ids: Vec<usize>, n: usize, t: usize },
}

impl BatchInput {
    pub fn rows(&self) -> usize {
        match self {
            BatchInput::Dense(t) => t.shape()[0],
            BatchInput::Tokens { n, .. } => *n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub input: BatchInput,
    /// Class ids, one per row (dense) or per token position (tokens).
    pub targets: Vec<usize>,
    pub id: u64,
}

#[derive(Debug)]
pub enum Dataset {
    Classification {
        /// [n, d] features.
        x: Tensor,
        y: Vec<usize>,
        classes: usize,
    },
    CharText {
        ids: Vec<usize>,
        vocab: usize,
        seq_len: usize,
    },
}

impl Dataset {
    /// Number of drawable items: samples, or valid sequence start offsets.
    pub fn len(&self) -> usize {
        match self {
            Dataset::Classification { y, .. } => y.len(),
            Dataset::CharText { ids, seq_len, .. } => {
                if ids.len() > *seq_len {
                    ids.len() - seq_len
                } else {
                    0
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            Dataset::Classification { classes, .. } => *classes,
            Dataset::CharText { vocab, .. } => *vocab,
        }
    }

    pub fn feature_dim(&self) -> Option<usize> {
        match self {
            Dataset::Classification { x, .. } => Some(x.shape()[1]),
            Dataset::CharText { .. } => None,
        }
    }
}

/// K Gaussian clusters with fixed means on a scaled, centered simplex and
/// unit covariance; labels are cluster ids. Deterministic per seed.
pub fn synthetic_classification(
    rng: &mut Rng,
    n: usize,
    d: usize,
    k: usize,
    separation: f64,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {k}")));
    }
    if k > d {
        return Err(Error::Config(format!(
            "simplex means need k <= d, got k={k}, d={d}"
        )));
    }
    let mut x = Tensor::zeros(&[n, d]);
    let mut y = Vec::with_capacity(n);
    let centroid = separation / k as f64;
    for i in 0..n {
        let label = rng.gen_range(k);
        y.push(label);
        let row = &mut x.data_mut()[i * d..(i + 1) * d];
        for (j, v) in row.iter_mut().enumerate() {
            let mut mean = if j < k { -centroid } else { 0.0 };
            if j == label {
                mean += separation;
            }
            *v = mean + rng.normal();
        }
    }
    Ok(Dataset::Classification { x, y, classes: k })
}

/// CIFAR-10 binary reader: 3073-byte records, label byte then R,G,B planes
/// of 32x32 row-major pixels, scaled to [0,1] and flattened to d=3072.
pub fn load_cifar10_bin(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar10(&bytes)
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Data(format!(
            "truncated CIFAR-10 record: {} bytes is not a multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut x = Tensor::zeros(&[n, CIFAR_PIXELS]);
    let mut y = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD_BYTES..(r + 1) * CIFAR_RECORD_BYTES];
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Data(format!("record {r}: label {label} >= 10")));
        }
        y.push(label);
        let row = &mut x.data_mut()[r * CIFAR_PIXELS..(r + 1) * CIFAR_PIXELS];
        for (j, v) in row.iter_mut().enumerate() {
            *v = rec[1 + j] as f64 / 255.0;
        }
    }
    Ok(Dataset::Classification { x, y, classes: 10 })
}

/// Character-level corpus over the distinct bytes of `text` (vocab <= 128).
pub fn char_text(text: &[u8], seq_len: usize) -> Result<Dataset> {
    if text.len() <= seq_len {
        return Err(Error::Data(format!(
            "text length {} must exceed seq_len {seq_len}",
            text.len()
        )));
    }
    let mut present = [false; 256];
    for &b in text {
        present[b as usize] = true;
    }
    let alphabet: Vec<usize> = (0..256).filter(|&b| present[b]).collect();
    if alphabet.len() > 128 {
        return Err(Error::Data(format!(
            "vocab overflow: {} distinct bytes > 128",
            alphabet.len()
        )));
    }
    let mut to_id = [0usize; 256];
    for (id, &b) in alphabet.iter().enumerate() {
        to_id[b] = id;
    }
    Ok(Dataset::CharText {
        ids: text.iter().map(|&b| to_id[b as usize]).collect(),
        vocab: alphabet.len(),
        seq_len,
    })
}

/// Deterministic synthetic corpus: space-separated words drawn from a fixed
/// lexicon, so next-character prediction is learnable at desk scale.
pub fn synthetic_text(rng: &mut Rng, len: usize) -> Vec<u8> {
    const WORDS: [&str; 24] = [
        "gradient", "tensor", "update", "layer", "width", "depth", "probe", "batch", "scale",
        "norm", "delta", "kernel", "matrix", "vector", "residual", "attention", "forward",
        "backward", "loss", "step", "seed", "trace", "logit", "momentum",
    ];
    let mut out = Vec::with_capacity(len + 16);
    while out.len() < len {
        out.extend_from_slice(WORDS[rng.gen_range(WORDS.len())].as_bytes());
        out.push(b' ');
    }
    out.truncate(len);
    out
}

/// Disjoint (train, probe) index partitions, shuffled per seed.
pub fn split_indices(dataset: &Dataset, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let len = dataset.len();
    let mut idx: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut idx);
    let n_probe = ((len as f64 * PROBE_FRACTION).ceil() as usize).min(len);
    let probe = idx[..n_probe].to_vec();
    let train = idx[n_probe..].to_vec();
    (train, probe)
}

/// Endless batch stream over a fixed index partition; order is reshuffled
/// each epoch from the stream's own rng.
pub struct BatchStream {
    data: Arc<Dataset>,
    indices: Vec<usize>,
    batch_size: usize,
    pos: usize,
    rng: Rng,
    next_id: u64,
}

impl BatchStream {
    pub fn new(data: Arc<Dataset>, indices: Vec<usize>, batch_size: usize, mut rng: Rng) -> Self {
        let mut indices = indices;
        rng.shuffle(&mut indices);
        BatchStream {
            data,
            indices,
            batch_size,
            pos: 0,
            rng,
            next_id: 0,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len() / self.batch_size.max(1)
    }

    /// Starting indices/offsets this stream can ever emit.
    pub fn index_set(&self) -> &[usize] {
        &self.indices
    }

    pub fn next_batch(&mut self) -> Option<Batch> {
        if self.indices.len() < self.batch_size || self.batch_size == 0 {
            return None;
        }
        if self.pos + self.batch_size > self.indices.len() {
            self.rng.shuffle(&mut self.indices);
            self.pos = 0;
        }
        let take = &self.indices[self.pos..self.pos + self.batch_size];
        let batch = assemble(&self.data, take, self.next_id);
        self.pos += self.batch_size;
        self.next_id += 1;
        Some(batch)
    }
}

fn assemble(data: &Dataset, take: &[usize], id: u64) -> Batch {
    match data {
        Dataset::Classification { x, y, .. } => {
            let d = x.shape()[1];
            let mut bx = Tensor::zeros(&[take.len(), d]);
            let mut by = Vec::with_capacity(take.len());
            for (r, &i) in take.iter().enumerate() {
                bx.data_mut()[r * d..(r + 1) * d].copy_from_slice(&x.data()[i * d..(i + 1) * d]);
                by.push(y[i]);
            }
            Batch {
                input: BatchInput::Dense(bx),
                targets: by,
                id,
            }
        }
        Dataset::CharText { ids, seq_len, .. } => {
            let t = *seq_len;
            let mut bids = Vec::with_capacity(take.len() * t);
            let mut by = Vec::with_capacity(take.len() * t);
            for &off in take {
                bids.extend_from_slice(&ids[off..off + t]);
                by.extend_from_slice(&ids[off + 1..off + t + 1]);
            }
            Batch {
                input: BatchInput::Tokens {
                    ids: bids,
                    n: take.len(),
                    t,
                },
                targets: by,
                id,
            }
        }
    }
}

/// Disjoint (train, probe) streams over one dataset.
pub fn make_streams(
    data: Arc<Dataset>,
    batch_size: usize,
    rng: &Rng,
) -> Result<(BatchStream, BatchStream)> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let (train_idx, probe_idx) = split_indices(&data, &mut rng.derive("partition", 0));
    if train_idx.len() < batch_size || probe_idx.len() < batch_size {
        return Err(Error::Data(format!(
            "dataset too small for batch size {batch_size}: {} train / {} probe items",
            train_idx.len(),
            probe_idx.len()
        )));
    }
    let train = BatchStream::new(
        Arc::clone(&data),
        train_idx,
        batch_size,
        rng.derive("train-order", 0),
    );
    let probe = BatchStream::new(data, probe_idx, batch_size, rng.derive("probe-order", 0));
    Ok((train, probe))
}

/// Character batch streams straight from raw text.
pub fn char_batches(
    text: &[u8],
    seq_len: usize,
    batch_size: usize,
    rng: &Rng,
) -> Result<(BatchStream, BatchStream)> {
    let data = Arc::new(char_text(text, seq_len)?);
    make_streams(data, batch_size, rng)
}
