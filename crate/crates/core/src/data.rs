//! Datasets: IDX (MNIST) ingestion and deterministic synthetic tasks.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::InputShape;
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Labelled examples stored contiguously, one `shape.example_len()` run each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: InputShape,
    pub classes: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

/// One mini-batch ready for the critic.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: InputShape, classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() || inputs.len() != labels.len() * shape.example_len() {
            return Err(Error::Data(format!(
                "{} input values do not hold {} examples of {}",
                inputs.len(),
                labels.len(),
                shape.example_len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset {
            shape,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let n = self.shape.example_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let n = self.shape.example_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        Batch {
            inputs: Tensor::new(self.shape.batch_shape(indices.len()), data).expect("sized batch"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive batches of at most `size` examples, in order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            shape: self.shape,
            classes: self.classes,
            inputs: b.inputs.into_data(),
            labels: b.labels,
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Splits off the last `n` examples.
    pub fn split_tail(&self, n: usize) -> (Dataset, Dataset) {
        let cut = self.len().saturating_sub(n);
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

/// Endless shuffled mini-batch stream; reshuffles at every epoch boundary.
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl BatchStream {
    pub fn new(len: usize, size: usize) -> Self {
        BatchStream {
            order: (0..len).collect(),
            pos: len,
            size: size.clamp(1, len.max(1)),
        }
    }

    pub fn next_indices<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        out
    }
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    what: &'a str,
}

impl IdxReader<'_> {
    fn u32_at(&self, offset: usize) -> Result<u32> {
        self.bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format {
                offset: offset as u64,
                message: format!("{}: header truncated ({} bytes)", self.what, self.bytes.len()),
            })
    }

    fn expect_len(&self, header: usize, payload: usize) -> Result<&[u8]> {
        let want = header + payload;
        if self.bytes.len() != want {
            return Err(Error::Format {
                offset: self.bytes.len().min(want) as u64,
                message: format!(
                    "{}: expected {want} bytes, found {}",
                    self.what,
                    self.bytes.len()
                ),
            });
        }
        Ok(&self.bytes[header..])
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses IDX image bytes into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let r = IdxReader { bytes, what: "images" };
    let magic = r.u32_at(0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format {
            offset: 0,
            message: format!("images: magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        });
    }
    let (n, rows, cols) = (r.u32_at(4)? as usize, r.u32_at(8)? as usize, r.u32_at(12)? as usize);
    let pixels = r.expect_len(16, n * rows * cols)?;
    Ok((n, rows, cols, pixels.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let r = IdxReader { bytes, what: "labels" };
    let magic = r.u32_at(0)?;
    if magic != IDX_LABELS {
        return Err(Error::Format {
            offset: 0,
            message: format!("labels: magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        });
    }
    let n = r.u32_at(4)? as usize;
    Ok(r.expect_len(8, n)?.to_vec())
}

/// Loads an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images)?)?;
    let raw_labels = parse_idx_labels(&read_file(labels)?)?;
    if raw_labels.len() != n {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            n,
            raw_labels.len()
        )));
    }
    if let Some(bad) = raw_labels.iter().find(|&&l| l > 9) {
        return Err(Error::Data(format!("digit label {bad} outside 0..9")));
    }
    let shape = InputShape::Image {
        height: rows,
        width: cols,
        channels: 1,
    };
    let inputs = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Dataset::new(shape, 10, inputs, raw_labels.iter().map(|&l| usize::from(l)).collect())
}

/// Train/test pair in the standard MNIST file layout under `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx_dataset(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx_dataset(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Labels from a planted linear teacher on a few informative features;
    /// the input also carries exact copies of those features and pure noise.
    RedundantFeatures,
    /// Parity of a binary sequence, bits encoded as ±1.
    SequenceParity,
}

/// A generated task and what is known about it by construction.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub train: Dataset,
    pub test: Dataset,
    /// Deterministic labels: a perfect classifier exists.
    pub bayes_accuracy: f64,
    /// `(copy, original)` feature index pairs, for the redundancy task.
    pub duplicated: Vec<(usize, usize)>,
}

pub const SYNTH_INFORMATIVE: usize = 4;
pub const SYNTH_COPIES: usize = 4;
pub const SYNTH_NOISE: usize = 8;
pub const SYNTH_CLASSES: usize = 3;
pub const PARITY_STEPS: usize = 4;

pub fn make_synthetic_task(kind: SyntheticKind, seed: u64, train: usize, test: usize) -> SyntheticTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SyntheticKind::RedundantFeatures => redundant_features(&mut rng, train, test),
        SyntheticKind::SequenceParity => sequence_parity(&mut rng, train, test),
    }
}

fn redundant_features(rng: &mut ChaCha8Rng, train: usize, test: usize) -> SyntheticTask {
    let width = SYNTH_INFORMATIVE + SYNTH_COPIES + SYNTH_NOISE;
    let teacher: Vec<Vec<f64>> = (0..SYNTH_CLASSES)
        .map(|_| (0..SYNTH_INFORMATIVE).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let duplicated: Vec<(usize, usize)> = (0..SYNTH_COPIES)
        .map(|k| (SYNTH_INFORMATIVE + k, k % SYNTH_INFORMATIVE))
        .collect();
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let mut inputs = Vec::with_capacity(n * width);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let informative: Vec<f64> = (0..SYNTH_INFORMATIVE).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scores: Vec<f64> = teacher
                .iter()
                .map(|w| w.iter().zip(&informative).map(|(a, b)| a * b).sum())
                .collect();
            let label = scores
                .iter()
                .enumerate()
                .fold(0, |best, (k, &s)| if s > scores[best] { k } else { best });
            inputs.extend_from_slice(&informative);
            inputs.extend(duplicated.iter().map(|&(_, src)| informative[src]));
            inputs.extend((0..SYNTH_NOISE).map(|_| rng.gen_range(-1.0..1.0)));
            labels.push(label);
        }
        let shape = InputShape::Vector { features: width };
        Dataset::new(shape, SYNTH_CLASSES, inputs, labels).expect("consistent synthetic data")
    };
    let train = make(train, rng);
    let test = make(test, rng);
    SyntheticTask {
        train,
        test,
        bayes_accuracy: 1.0,
        duplicated,
    }
}

fn sequence_parity(rng: &mut ChaCha8Rng, train: usize, test: usize) -> SyntheticTask {
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let mut inputs = Vec::with_capacity(n * PARITY_STEPS);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let bits: Vec<usize> = (0..PARITY_STEPS).map(|_| rng.gen_range(0..2)).collect();
            inputs.extend(bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }));
            labels.push(bits.iter().sum::<usize>() % 2);
        }
        let shape = InputShape::Sequence {
            steps: PARITY_STEPS,
            features: 1,
        };
        Dataset::new(shape, 2, inputs, labels).expect("consistent synthetic data")
    };
    let train = make(train, rng);
    let test = make(test, rng);
    SyntheticTask {
        train,
        test,
        bayes_accuracy: 1.0,
        duplicated: Vec::new(),
    }
}
