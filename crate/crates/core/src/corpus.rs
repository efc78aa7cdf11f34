//! Adversarial corpus files: paired clean/adversarial images with labels.
//!
//! Layout, little-endian:
//!
//! ```text
//! b"FLAC" | version u32 | dataset u8 | attack u8 | epsilon f32 | kappa f32
//! | iterations u32 | targeted u8 | target class u8 (255 = none)
//! | random start u8 | seed u64 | count u64
//! count × (clean 784 × f32 | adversarial 784 × f32 | label u8)
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::attacks::{AttackConfig, AttackKind};
use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::models::{IMAGE_SIDE, NUM_CLASSES};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FLAC";
const VERSION: u32 = 1;
const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
const RECORD_BYTES: usize = 2 * PIXELS * 4 + 1;
pub const HEADER_BYTES: usize = 4 + 4 + 1 + 1 + 4 + 4 + 4 + 1 + 1 + 1 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusHeader {
    pub dataset: DatasetKind,
    pub attack: AttackConfig,
    pub count: u64,
}

impl CorpusHeader {
    fn encode(&self) -> Vec<u8> {
        let a = &self.attack;
        let mut b = Vec::with_capacity(HEADER_BYTES);
        b.extend_from_slice(MAGIC);
        b.extend(VERSION.to_le_bytes());
        b.push(self.dataset.id());
        b.push(a.kind.id());
        b.extend(a.epsilon.to_le_bytes());
        b.extend(a.kappa.to_le_bytes());
        b.extend(a.iterations.to_le_bytes());
        b.push(a.targeted as u8);
        b.push(a.target_class.unwrap_or(255));
        b.push(a.random_start as u8);
        b.extend(a.seed.to_le_bytes());
        b.extend(self.count.to_le_bytes());
        b
    }

    fn decode(b: &[u8; HEADER_BYTES]) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("corpus header: {m}"));
        if &b[0..4] != MAGIC {
            return Err(bad("bad magic (not a corpus file)".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let f32_at = |i: usize| f32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dataset = DatasetKind::from_id(b[8]).ok_or_else(|| bad(format!("unknown dataset id {}", b[8])))?;
        let kind = AttackKind::from_id(b[9]).ok_or_else(|| bad(format!("unknown attack id {}", b[9])))?;
        let flag = |v: u8, what: &str| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(bad(format!("{what} flag is {v}"))),
        };
        let attack = AttackConfig {
            kind,
            epsilon: f32_at(10),
            kappa: f32_at(14),
            iterations: u32_at(18),
            targeted: flag(b[22], "targeted")?,
            target_class: (b[23] != 255).then_some(b[23]),
            random_start: flag(b[24], "random start")?,
            seed: u64_at(25),
        };
        attack.validate().map_err(|e| bad(e.to_string()))?;
        Ok(CorpusHeader {
            dataset,
            attack,
            count: u64_at(33),
        })
    }
}

/// Paired records held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialCorpus {
    pub header: CorpusHeader,
    clean: Vec<f32>,
    adversarial: Vec<f32>,
    labels: Vec<u8>,
}

/// A contiguous run of corpus records.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusBatch {
    /// Index of the first record.
    pub start: usize,
    pub clean: Tensor,
    pub adversarial: Tensor,
    pub labels: Vec<u8>,
}

impl CorpusBatch {
    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

fn check_record(index: usize, clean: &[f32], adv: &[f32], label: u8, epsilon: f32) -> Result<()> {
    let err = |m: String| Err(Error::Corpus { record: index, message: m });
    if label as usize >= NUM_CLASSES {
        return err(format!("label {label} out of range"));
    }
    for (&c, &a) in clean.iter().zip(adv) {
        if !(0.0..=1.0).contains(&c) || !(0.0..=1.0).contains(&a) {
            return err("pixel outside [0, 1]".into());
        }
        let d = (a as f64 - c as f64).abs();
        if d > epsilon as f64 {
            return err(format!("perturbation {d} exceeds epsilon {epsilon}"));
        }
    }
    Ok(())
}

impl AdversarialCorpus {
    /// Builds a corpus from `[N, 1, 28, 28]` tensors, checking every record.
    pub fn new(dataset: DatasetKind, attack: AttackConfig, clean: Tensor, adversarial: Tensor, labels: Vec<u8>) -> Result<Self> {
        let [n, c, h, w] = clean.dims4()?;
        if (c, h, w) != (1, IMAGE_SIDE, IMAGE_SIDE) || adversarial.shape() != clean.shape() || labels.len() != n {
            return Err(Error::Shape(format!(
                "corpus needs matching [N, 1, 28, 28] tensors and N labels, got {:?}, {:?}, {}",
                clean.shape(),
                adversarial.shape(),
                labels.len()
            )));
        }
        let corpus = AdversarialCorpus {
            header: CorpusHeader {
                dataset,
                attack,
                count: n as u64,
            },
            clean: clean.into_data(),
            adversarial: adversarial.into_data(),
            labels,
        };
        for i in 0..n {
            let (c, a) = corpus.record(i);
            check_record(i, c, a, corpus.labels[i], attack.epsilon)?;
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn record(&self, i: usize) -> (&[f32], &[f32]) {
        let r = i * PIXELS..(i + 1) * PIXELS;
        (&self.clean[r.clone()], &self.adversarial[r])
    }

    /// Records `start..end` as tensors.
    pub fn slice(&self, start: usize, end: usize) -> Result<CorpusBatch> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "record range {start}..{end} outside corpus of {}",
                self.len()
            )));
        }
        let shape = [end - start, 1, IMAGE_SIDE, IMAGE_SIDE];
        let r = start * PIXELS..end * PIXELS;
        Ok(CorpusBatch {
            start,
            clean: Tensor::new(&shape, self.clean[r.clone()].to_vec())?,
            adversarial: Tensor::new(&shape, self.adversarial[r].to_vec())?,
            labels: self.labels[start..end].to_vec(),
        })
    }

    /// Every record as one batch; `None` for an empty corpus.
    pub fn all(&self) -> Option<CorpusBatch> {
        (!self.is_empty()).then(|| self.slice(0, self.len()).expect("full range is valid"))
    }

    /// Consecutive batches of at most `batch_size` records.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = CorpusBatch> + '_ {
        let bs = batch_size.max(1);
        (0..self.len())
            .step_by(bs)
            .map(move |s| self.slice(s, (s + bs).min(self.len())).expect("in range"))
    }

    /// Records at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<CorpusBatch> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty record selection".into()));
        }
        let mut clean = Vec::with_capacity(indices.len() * PIXELS);
        let mut adv = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("record {i} outside corpus of {}", self.len())));
            }
            let (c, a) = self.record(i);
            clean.extend_from_slice(c);
            adv.extend_from_slice(a);
            labels.push(self.labels[i]);
        }
        let shape = [indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE];
        Ok(CorpusBatch {
            start: indices[0],
            clean: Tensor::new(&shape, clean)?,
            adversarial: Tensor::new(&shape, adv)?,
            labels,
        })
    }

    /// The first `n` records.
    pub fn head(&self, n: usize) -> AdversarialCorpus {
        let n = n.min(self.len());
        AdversarialCorpus {
            header: CorpusHeader {
                count: n as u64,
                ..self.header
            },
            clean: self.clean[..n * PIXELS].to_vec(),
            adversarial: self.adversarial[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

pub fn write_corpus(corpus: &AdversarialCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&corpus.header.encode()).map_err(io)?;
    for i in 0..corpus.len() {
        let (c, a) = corpus.record(i);
        for v in c.iter().chain(a) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&[corpus.labels[i]]).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Streaming reader that validates each record as it is decoded.
pub struct CorpusReader {
    path: PathBuf,
    reader: BufReader<fs::File>,
    header: CorpusHeader,
    next: usize,
}

impl CorpusReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let expected = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let mut reader = BufReader::new(file);
        let mut hb = [0u8; HEADER_BYTES];
        reader
            .read_exact(&mut hb)
            .map_err(|_| Error::Format(format!("{}: corpus header truncated", path.display())))?;
        let header = CorpusHeader::decode(&hb)?;
        let want = HEADER_BYTES as u64 + header.count * RECORD_BYTES as u64;
        if expected != want {
            return Err(Error::Format(format!(
                "{}: file is {expected} bytes, header with {} records implies {want}",
                path.display(),
                header.count
            )));
        }
        Ok(CorpusReader {
            path,
            reader,
            header,
            next: 0,
        })
    }

    pub fn header(&self) -> &CorpusHeader {
        &self.header
    }

    /// Decodes up to `batch_size` further records; `Ok(None)` at the end.
    pub fn next_batch(&mut self, batch_size: usize) -> Result<Option<CorpusBatch>> {
        let remaining = self.header.count as usize - self.next;
        let n = batch_size.max(1).min(remaining);
        if n == 0 {
            return Ok(None);
        }
        let mut buf = vec![0u8; RECORD_BYTES];
        let mut clean = Vec::with_capacity(n * PIXELS);
        let mut adv = Vec::with_capacity(n * PIXELS);
        let mut labels = Vec::with_capacity(n);
        for k in 0..n {
            self.reader.read_exact(&mut buf).map_err(|e| Error::io(&self.path, e))?;
            let floats: Vec<f32> = buf[..2 * PIXELS * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let label = buf[RECORD_BYTES - 1];
            check_record(self.next + k, &floats[..PIXELS], &floats[PIXELS..], label, self.header.attack.epsilon)?;
            clean.extend_from_slice(&floats[..PIXELS]);
            adv.extend_from_slice(&floats[PIXELS..]);
            labels.push(label);
        }
        let shape = [n, 1, IMAGE_SIDE, IMAGE_SIDE];
        let batch = CorpusBatch {
            start: self.next,
            clean: Tensor::new(&shape, clean)?,
            adversarial: Tensor::new(&shape, adv)?,
            labels,
        };
        self.next += n;
        Ok(Some(batch))
    }

    /// Iterator over the remaining records in batches.
    pub fn batches(self, batch_size: usize) -> CorpusBatches {
        CorpusBatches {
            reader: self,
            batch_size,
            failed: false,
        }
    }
}

pub struct CorpusBatches {
    reader: CorpusReader,
    batch_size: usize,
    failed: bool,
}

impl Iterator for CorpusBatches {
    type Item = Result<CorpusBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let r = self.reader.next_batch(self.batch_size).transpose();
        self.failed = matches!(r, Some(Err(_)));
        r
    }
}

/// Reads and validates a whole corpus file.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<AdversarialCorpus> {
    let mut reader = CorpusReader::open(path)?;
    let header = *reader.header();
    let n = header.count as usize;
    let mut corpus = AdversarialCorpus {
        header,
        clean: Vec::with_capacity(n * PIXELS),
        adversarial: Vec::with_capacity(n * PIXELS),
        labels: Vec::with_capacity(n),
    };
    while let Some(b) = reader.next_batch(1024)? {
        corpus.clean.extend(b.clean.into_data());
        corpus.adversarial.extend(b.adversarial.into_data());
        corpus.labels.extend(b.labels);
    }
    Ok(corpus)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
