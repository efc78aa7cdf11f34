//! Binary weight files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! b"FLWT" | version | input rank | input dims... | layer count
//! per layer: kind (u8) | a | b | kernel | stride | padding
//! per parameterized layer, in order: weight then bias as raw f32 LE
//! ```
//!
//! `a`/`b` are in/out channels for convolutions, in/out features for dense
//! layers, and zero otherwise.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FLWT";
const VERSION: u32 = 1;

fn encode(l: &LayerSpec) -> [u32; 6] {
    match *l {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => [1, in_channels as u32, out_channels as u32, kernel as u32, stride as u32, padding as u32],
        LayerSpec::ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => [2, in_channels as u32, out_channels as u32, kernel as u32, stride as u32, padding as u32],
        LayerSpec::MaxPool { kernel, stride } => [3, 0, 0, kernel as u32, stride as u32, 0],
        LayerSpec::Dense {
            in_features,
            out_features,
        } => [4, in_features as u32, out_features as u32, 0, 0, 0],
        LayerSpec::Relu => [5, 0, 0, 0, 0, 0],
        LayerSpec::Atan => [6, 0, 0, 0, 0, 0],
        LayerSpec::Sigmoid => [7, 0, 0, 0, 0, 0],
        LayerSpec::Flatten => [8, 0, 0, 0, 0, 0],
    }
}

fn decode(layer: usize, f: [u32; 6]) -> Result<LayerSpec> {
    let [kind, a, b, k, s, p] = f.map(|v| v as usize);
    Ok(match kind {
        1 => LayerSpec::conv(a, b, k, s, p),
        2 => LayerSpec::conv_transpose(a, b, k, s, p),
        3 => LayerSpec::pool(k, s),
        4 => LayerSpec::dense(a, b),
        5 => LayerSpec::Relu,
        6 => LayerSpec::Atan,
        7 => LayerSpec::Sigmoid,
        8 => LayerSpec::Flatten,
        other => {
            return Err(Error::Signature {
                layer,
                message: format!("unknown layer kind {other}"),
            })
        }
    })
}

pub fn save_weights(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let put = |v: u32, buf: &mut Vec<u8>| buf.extend_from_slice(&v.to_le_bytes());
    put(VERSION, &mut buf);
    put(model.input_shape.len() as u32, &mut buf);
    for &d in &model.input_shape {
        put(d as u32, &mut buf);
    }
    put(model.layers.len() as u32, &mut buf);
    for l in &model.layers {
        let f = encode(l);
        buf.push(f[0] as u8);
        for v in &f[1..] {
            put(*v, &mut buf);
        }
    }
    for t in model.params.iter().flatten() {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Reads a weight file, rebuilding the architecture it describes. Tap points
/// are not stored; use [`ModelGraph::load_params`] to fill a built model.
pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let header_err = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if r.take(4) != Some(MAGIC) {
        return Err(header_err("not a weight file (bad magic)"));
    }
    let version = r.u32().ok_or_else(|| header_err("truncated header"))?;
    if version != VERSION {
        return Err(header_err(&format!("unsupported version {version}")));
    }
    let rank = r.u32().ok_or_else(|| header_err("truncated header"))? as usize;
    if rank > 8 {
        return Err(header_err("implausible input rank"));
    }
    let input: Vec<usize> = (0..rank)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| header_err("truncated header"))?;
    let n = r.u32().ok_or_else(|| header_err("truncated header"))? as usize;
    let mut layers = Vec::with_capacity(n.min(1024));
    for i in 0..n {
        let kind = r.take(1).ok_or(Error::Truncated { layer: i })?[0] as u32;
        let mut f = [kind, 0, 0, 0, 0, 0];
        for slot in &mut f[1..] {
            *slot = r.u32().ok_or(Error::Truncated { layer: i })?;
        }
        layers.push(decode(i, f)?);
    }
    let mut model = ModelGraph::new(&input, layers, 0).map_err(|e| Error::Signature {
        layer: n,
        message: e.to_string(),
    })?;
    read_params(&mut r, &mut model)?;
    Ok(model)
}

fn read_params(r: &mut Reader<'_>, model: &mut ModelGraph) -> Result<()> {
    for (i, layer) in model.params.iter_mut().enumerate() {
        for t in layer.iter_mut() {
            let raw = r.take(t.len() * 4).ok_or(Error::Truncated { layer: i })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *t = Tensor::new(t.shape(), data)?;
        }
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last parameter blob",
            r.bytes.len() - r.pos
        )));
    }
    Ok(())
}

impl ModelGraph {
    /// Replaces this model's parameters with those stored at `path`, after
    /// checking that the stored layer signature matches this architecture.
    pub fn load_params(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let loaded = load_weights(path)?;
        if loaded.input_shape != self.input_shape {
            return Err(Error::Signature {
                layer: 0,
                message: format!(
                    "file expects input {:?}, model expects {:?}",
                    loaded.input_shape, self.input_shape
                ),
            });
        }
        for (i, (a, b)) in loaded.layers.iter().zip(&self.layers).enumerate() {
            if a != b {
                return Err(Error::Signature {
                    layer: i,
                    message: format!("file has {a:?}, model has {b:?}"),
                });
            }
        }
        if loaded.layers.len() != self.layers.len() {
            return Err(Error::Signature {
                layer: loaded.layers.len().min(self.layers.len()),
                message: format!(
                    "file has {} layers, model has {}",
                    loaded.layers.len(),
                    self.layers.len()
                ),
            });
        }
        self.params = loaded.params;
        Ok(())
    }
}
