//! MNIST (IDX) and CIFAR-10 (binary batch) loaders, normalized to
//! single-channel 28×28 images in [0, 1].

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::{IMAGE_SIDE, NUM_CLASSES};
use crate::ops::resize_bilinear;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn id(self) -> u8 {
        match self {
            DatasetKind::Mnist => 0,
            DatasetKind::Cifar10 => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(DatasetKind::Mnist),
            1 => Some(DatasetKind::Cifar10),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// Size of the published split.
    pub fn canonical_len(self, split: Split) -> usize {
        match (self, split) {
            (DatasetKind::Mnist, Split::Train) => 60_000,
            (DatasetKind::Cifar10, Split::Train) => 50_000,
            (_, Split::Test) => 10_000,
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset {other:?} (expected mnist or cifar10)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Labelled images, `[N, 1, 28, 28]` in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub split: Split,
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, split: Split, images: Tensor, labels: Vec<u8>) -> Result<Self> {
        let [n, c, h, w] = images.dims4()?;
        if (c, h, w) != (1, IMAGE_SIDE, IMAGE_SIDE) || n != labels.len() {
            return Err(Error::Format(format!(
                "dataset needs [N, 1, 28, 28] images with N labels, got {:?} and {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Format(format!("label {l} out of range")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("pixel outside [0, 1]".into()));
        }
        Ok(Dataset {
            kind,
            split,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Whether the split has its published size (false for subsets and
    /// substitute files).
    pub fn is_canonical_size(&self) -> bool {
        self.len() == self.kind.canonical_len(self.split)
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Keeps the first `per_class` items of every class, preserving the
    /// original order.
    pub fn subsample_per_class(&self, per_class: usize) -> Result<Dataset> {
        let mut seen = [0usize; NUM_CLASSES];
        let keep: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| {
                let c = &mut seen[l as usize];
                *c += 1;
                (*c <= per_class).then_some(i)
            })
            .collect();
        self.select(&keep)
    }

    /// The first `n` items.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let keep: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&keep)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Config("selection leaves an empty dataset".into()));
        }
        Ok(Dataset {
            kind: self.kind,
            split: self.split,
            images: self.images.gather_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// Reads `name`, or `name.gz` decompressed, from `dir`.
fn read_maybe_gz(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let plain = dir.join(name);
    if plain.exists() {
        return fs::read(&plain).map_err(|e| Error::io(plain, e));
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        let file = fs::File::open(&gz).map_err(|e| Error::io(&gz, e))?;
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(file)
            .read_to_end(&mut out)
            .map_err(|e| Error::io(&gz, e))?;
        return Ok(out);
    }
    Err(Error::io(
        plain,
        std::io::Error::new(std::io::ErrorKind::NotFound, "file not found (also tried .gz)"),
    ))
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;

/// Expected MNIST file names for a split: `(images, labels)`.
pub fn mnist_file_names(split: Split) -> (&'static str, &'static str) {
    match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
}

/// Parses IDX image and label payloads.
pub fn parse_mnist(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let fmt = |m: String| Error::Format(m);
    if images.len() < 16 {
        return Err(fmt("image file shorter than its 16-byte header".into()));
    }
    if labels.len() < 8 {
        return Err(fmt("label file shorter than its 8-byte header".into()));
    }
    let magic = be_u32(images, 0);
    if magic != MNIST_IMAGE_MAGIC {
        return Err(fmt(format!(
            "image file magic is {magic:#010x}, expected {MNIST_IMAGE_MAGIC:#010x}"
        )));
    }
    let magic = be_u32(labels, 0);
    if magic != MNIST_LABEL_MAGIC {
        return Err(fmt(format!(
            "label file magic is {magic:#010x}, expected {MNIST_LABEL_MAGIC:#010x}"
        )));
    }
    let (n, rows, cols) = (be_u32(images, 4) as usize, be_u32(images, 8) as usize, be_u32(images, 12) as usize);
    let nl = be_u32(labels, 4) as usize;
    if (rows, cols) != (IMAGE_SIDE, IMAGE_SIDE) {
        return Err(fmt(format!("images are {rows}x{cols}, expected 28x28")));
    }
    if n != nl {
        return Err(fmt(format!("image file holds {n} images but label file holds {nl} labels")));
    }
    let px = n * rows * cols;
    if images.len() - 16 != px {
        return Err(fmt(format!(
            "image payload is {} bytes, header promises {px}",
            images.len() - 16
        )));
    }
    if labels.len() - 8 != n {
        return Err(fmt(format!("label payload is {} bytes, header promises {n}", labels.len() - 8)));
    }
    let data = images[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(&[n.max(1), 1, rows, cols], data).map_err(|_| fmt("empty image file".into()))?;
    Dataset::new(DatasetKind::Mnist, split, images, labels[8..].to_vec())
}

pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (img, lab) = mnist_file_names(split);
    let images = read_maybe_gz(dir, img)?;
    let labels = read_maybe_gz(dir, lab)?;
    parse_mnist(&images, &labels, split).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", dir.display())),
        other => other,
    })
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

pub fn cifar_file_names(split: Split) -> Vec<String> {
    match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    }
}

/// Luma-weighted grayscale of one CIFAR record, resized to 28×28.
fn cifar_record_to_gray28(record: &[u8]) -> Result<Vec<f32>> {
    let plane = 32 * 32;
    let px = &record[1..];
    let gray: Vec<f64> = (0..plane)
        .map(|i| (0.299 * px[i] as f64 + 0.587 * px[plane + i] as f64 + 0.114 * px[2 * plane + i] as f64) / 255.0)
        .collect();
    let t = Tensor::new(&[1, 1, 32, 32], gray)?;
    let r = resize_bilinear(&t, IMAGE_SIDE, IMAGE_SIDE)?;
    Ok(r.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar10_gray28(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte CIFAR-10 records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        data.extend(cifar_record_to_gray28(rec)?);
    }
    Dataset::new(
        DatasetKind::Cifar10,
        split,
        Tensor::new(&[n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels,
    )
}

/// Directory holding the batch files: `dir` itself or its
/// `cifar-10-batches-bin` child.
fn cifar_root(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

pub fn load_cifar10_gray28(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let root = cifar_root(dir.as_ref());
    let mut bytes = Vec::new();
    for name in cifar_file_names(split) {
        let p = root.join(&name);
        let b = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if b.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                p.display(),
                b.len()
            )));
        }
        bytes.extend(b);
    }
    parse_cifar10_gray28(&bytes, split)
}

/// Loads a split of either dataset from its canonical directory layout.
pub fn load(kind: DatasetKind, dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => load_mnist(dir, split),
        DatasetKind::Cifar10 => load_cifar10_gray28(dir, split),
    }
}

/// Expected archive names and MD5 sums of the official distributions, for
/// users fetching the data by hand.
pub fn expected_files(kind: DatasetKind) -> Vec<(&'static str, &'static str)> {
    match kind {
        DatasetKind::Mnist => vec![
            ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
            ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
            ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
            ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
        ],
        DatasetKind::Cifar10 => vec![("cifar-10-binary.tar.gz", "c32a1d4ab5d03f1284b67883e8d87530")],
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::mnist_bytes;
    use super::*;

    #[test]
    fn mnist_scaling_and_shape() {
        let (img, lab) = mnist_bytes(12);
        let d = parse_mnist(&img, &lab, Split::Test).unwrap();
        assert_eq!(d.images.shape(), &[12, 1, 28, 28]);
        assert_eq!(d.images.data()[255], 1.0);
        assert_eq!(d.images.data()[0], 0.0);
        assert_eq!(d.class_histogram(), [2, 2, 1, 1, 1, 1, 1, 1, 1, 1]);
        assert!(!d.is_canonical_size());
    }

    #[test]
    fn mnist_bad_magic_names_expected() {
        let (img, mut lab) = mnist_bytes(2);
        lab[3] = 0x03;
        let err = parse_mnist(&img, &lab, Split::Test).unwrap_err().to_string();
        assert!(err.contains("0x00000801"), "{err}");
    }

    #[test]
    fn mnist_truncation_and_count_mismatch() {
        let (img, lab) = mnist_bytes(3);
        assert!(parse_mnist(&img[..img.len() - 1], &lab, Split::Test).is_err());
        let (_, lab2) = mnist_bytes(2);
        let err = parse_mnist(&img, &lab2, Split::Test).unwrap_err().to_string();
        assert!(err.contains("3 images") && err.contains("2 labels"), "{err}");
    }

    #[test]
    fn gzip_fallback() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = mnist_bytes(4);
        let (ni, nl) = mnist_file_names(Split::Train);
        for (name, bytes) in [(ni, &img), (nl, &lab)] {
            let f = fs::File::create(dir.path().join(format!("{name}.gz"))).unwrap();
            let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::fast());
            enc.write_all(bytes).unwrap();
            enc.finish().unwrap();
        }
        let d = load_mnist(dir.path(), Split::Train).unwrap();
        assert_eq!(d.len(), 4);
    }

    fn cifar_record(label: u8, r: u8, g: u8, b: u8) -> Vec<u8> {
        let mut v = vec![label];
        v.extend(std::iter::repeat_n(r, 1024));
        v.extend(std::iter::repeat_n(g, 1024));
        v.extend(std::iter::repeat_n(b, 1024));
        v
    }

    #[test]
    fn cifar_gray_records() {
        let mut bytes = cifar_record(3, 77, 77, 77);
        bytes.extend(cifar_record(9, 255, 0, 0));
        let d = parse_cifar10_gray28(&bytes, Split::Test).unwrap();
        assert_eq!(d.images.shape(), &[2, 1, 28, 28]);
        assert_eq!(d.labels, vec![3, 9]);
        assert!(d.images.item(0).iter().all(|&v| (v - 77.0 / 255.0).abs() < 1e-6));
        assert!(d.images.item(1).iter().all(|&v| (v - 0.299).abs() < 1e-6));
        assert!(parse_cifar10_gray28(&bytes[..bytes.len() - 1], Split::Test).is_err());
    }

    #[test]
    fn cifar_gray_is_monotone_for_gray_pixels() {
        let mut prev = -1.0;
        for v in 0..=255u8 {
            let d = parse_cifar10_gray28(&cifar_record(0, v, v, v), Split::Test).unwrap();
            let px = d.images.data()[100];
            assert!(px > prev && (0.0..=1.0).contains(&px));
            prev = px;
        }
    }

    #[test]
    fn cifar_missing_batch_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("data_batch_1.bin"), cifar_record(0, 1, 2, 3)).unwrap();
        let err = load_cifar10_gray28(dir.path(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
        assert!(err.to_string().contains("data_batch_2.bin"));
    }

    #[test]
    fn stratified_subsample_keeps_first_k() {
        let (img, lab) = mnist_bytes(40);
        let d = parse_mnist(&img, &lab, Split::Train).unwrap();
        let s = d.subsample_per_class(2).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(s.class_histogram(), [2; 10]);
        assert_eq!(s.images.item(0), d.images.item(0));
        assert_eq!(s.images.item(10), d.images.item(10));
    }
}
