//! Declarative feed-forward networks: the target classifier, the denoising
//! autoencoder and the frozen feature-tap loss network.

mod weights;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::{conv_out_extent, conv_transpose_out_extent, pool_out_extent};
use crate::tensor::{Scalar, Tensor};

pub use weights::{load_weights, save_weights};

/// One layer of a [`ModelGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Atan,
    Sigmoid,
    Flatten,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn conv_transpose(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn pool(kernel: usize, stride: usize) -> Self {
        LayerSpec::MaxPool { kernel, stride }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    /// Shapes of the layer's parameters: weight then bias.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels: c,
                out_channels: o,
                kernel: k,
                ..
            } => vec![vec![o, c, k, k], vec![o]],
            LayerSpec::ConvTranspose2d {
                in_channels: c,
                out_channels: o,
                kernel: k,
                ..
            } => vec![vec![c, o, k, k], vec![o]],
            LayerSpec::Dense {
                in_features: f,
                out_features: g,
            } => vec![vec![f, g], vec![g]],
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Per-item output shape (no batch axis) for a per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let chw = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(shape_err!("{what} expects a C×H×W input, got {input:?}")),
            }
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = chw("conv")?;
                if c != in_channels {
                    return Err(shape_err!("conv declares {in_channels} input channels, receives {c}"));
                }
                match (
                    conv_out_extent(h, kernel, stride, padding),
                    conv_out_extent(w, kernel, stride, padding),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                    _ => Err(shape_err!("conv kernel {kernel} does not fit {h}x{w} with padding {padding}")),
                }
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = chw("conv_transpose")?;
                if c != in_channels {
                    return Err(shape_err!(
                        "conv_transpose declares {in_channels} input channels, receives {c}"
                    ));
                }
                match (
                    conv_transpose_out_extent(h, kernel, stride, padding),
                    conv_transpose_out_extent(w, kernel, stride, padding),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                    _ => Err(shape_err!("conv_transpose on {h}x{w} yields a non-positive output")),
                }
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let (c, h, w) = chw("max_pool")?;
                match (pool_out_extent(h, kernel, stride), pool_out_extent(w, kernel, stride)) {
                    (Some(oh), Some(ow)) => Ok(vec![c, oh, ow]),
                    _ => Err(shape_err!("pool kernel {kernel} larger than {h}x{w}")),
                }
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => match *input {
                [f] if f == in_features => Ok(vec![out_features]),
                _ => Err(shape_err!("dense expects [{in_features}], receives {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu | LayerSpec::Atan | LayerSpec::Sigmoid => Ok(input.to_vec()),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            }
            | LayerSpec::ConvTranspose2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerSpec::Dense { in_features, .. } => in_features,
            _ => 1,
        }
    }
}

/// Parameters seen through a tape during one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    /// Parameters are recorded as leaves that accumulate gradients.
    Trainable,
    /// Parameters are constants; only the input path is differentiated.
    Frozen,
}

/// A named intermediate activation exported by [`ModelGraph::forward`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapPoint {
    pub name: String,
    /// Index of the layer whose output is exported.
    pub layer: usize,
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Var,
    pub taps: Vec<(String, Var)>,
    /// Parameter leaves, one list per layer (empty for parameter-free layers).
    pub params: Vec<Vec<Var>>,
}

impl ForwardPass {
    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Ordered layers, their parameters, and optional tap points.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T: Scalar = f32> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Vec<Tensor<T>>>,
    taps: Vec<TapPoint>,
}

impl<T: Scalar> ModelGraph<T> {
    /// Validates that `layers` chain from `input_shape` and initializes
    /// parameters with fan-in scaled uniform noise drawn from `seed`.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let shapes = Self::chain_shapes(input_shape, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .map(|l| {
                let fan = l.fan_in() as f64;
                let w_bound = (6.0 / fan).sqrt();
                let b_bound = 1.0 / fan.sqrt();
                l.param_shapes()
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let bound = if i == 0 { w_bound } else { b_bound };
                        Tensor::from_fn(s, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                    })
                    .collect()
            })
            .collect();
        Ok(ModelGraph {
            input_shape: input_shape.to_vec(),
            layers,
            shapes,
            params,
            taps: Vec::new(),
        })
    }

    fn chain_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
        let mut cur = input_shape.to_vec();
        let mut shapes = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            cur = l
                .output_shape(&cur)
                .map_err(|e| shape_err!("layer {i} ({l:?}): {e}"))?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Exports the output of `layer` under `name` on every forward pass.
    pub fn with_tap(mut self, name: &str, layer: usize) -> Result<Self> {
        if layer >= self.layers.len() {
            return Err(shape_err!("tap {name:?} at layer {layer} but model has {} layers", self.layers.len()));
        }
        self.taps.push(TapPoint {
            name: name.to_string(),
            layer,
        });
        Ok(self)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-item output shape of every layer.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(Vec::as_slice).unwrap_or(&self.input_shape)
    }

    pub fn taps(&self) -> &[TapPoint] {
        &self.taps
    }

    pub fn tap_shape(&self, name: &str) -> Option<&[usize]> {
        self.taps
            .iter()
            .find(|t| t.name == name)
            .map(|t| self.shapes[t.layer].as_slice())
    }

    pub fn params(&self) -> &[Vec<Tensor<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor<T>>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: ParamMode) -> Result<ForwardPass> {
        self.forward_layers(tape, x, 0..self.layers.len(), mode)
    }

    /// Runs only `range` of the layers; `x` must have the shape the first of
    /// them expects.
    pub fn forward_layers(&self, tape: &mut Tape<T>, x: Var, range: Range<usize>, mode: ParamMode) -> Result<ForwardPass> {
        let expected = if range.start == 0 {
            &self.input_shape
        } else {
            &self.shapes[range.start - 1]
        };
        let got = tape.value(x).shape();
        if got.len() != expected.len() + 1 || got[1..] != expected[..] {
            return Err(shape_err!("model expects [B, {expected:?}] input, got {got:?}"));
        }
        let trainable = mode == ParamMode::Trainable;
        let mut params = vec![Vec::new(); self.layers.len()];
        let mut taps = Vec::new();
        let mut h = x;
        for i in range {
            let p: Vec<Var> = self.params[i].iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
            h = match self.layers[i] {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let c = tape.conv2d(h, p[0], stride, padding)?;
                    tape.channel_bias(c, p[1])?
                }
                LayerSpec::ConvTranspose2d { stride, padding, .. } => {
                    let c = tape.conv_transpose2d(h, p[0], stride, padding)?;
                    tape.channel_bias(c, p[1])?
                }
                LayerSpec::MaxPool { kernel, stride } => tape.max_pool2d(h, kernel, stride)?,
                LayerSpec::Dense { .. } => tape.dense(h, p[0], p[1])?,
                LayerSpec::Relu => tape.relu(h),
                LayerSpec::Atan => tape.atan(h),
                LayerSpec::Sigmoid => tape.sigmoid(h),
                LayerSpec::Flatten => tape.flatten(h)?,
            };
            params[i] = p;
            for t in self.taps.iter().filter(|t| t.layer == i) {
                taps.push((t.name.clone(), h));
            }
        }
        Ok(ForwardPass { output: h, taps, params })
    }

    /// Inference without gradient bookkeeping.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, ParamMode::Frozen)?.output;
        Ok(tape.value(out).clone())
    }

    /// Content hash of every parameter, in layer order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.params.iter().flatten() {
            for v in t.data() {
                h.update(v.to_f64().unwrap().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Number of image classes in both supported datasets.
pub const NUM_CLASSES: usize = 10;

/// Side of the square single-channel images every network consumes.
pub const IMAGE_SIDE: usize = 28;

/// Side of the RGB image the loss network consumes.
pub const LOSS_NET_SIDE: usize = 32;

/// LeNet-style target classifier on 1×28×28 inputs, producing 10 logits.
pub fn build_classifier(seed: u64) -> Result<ModelGraph> {
    ModelGraph::new(
        &[1, IMAGE_SIDE, IMAGE_SIDE],
        vec![
            LayerSpec::conv(1, 20, 5, 1, 0),
            LayerSpec::pool(2, 2),
            LayerSpec::Relu,
            LayerSpec::conv(20, 50, 5, 1, 0),
            LayerSpec::pool(2, 2),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::dense(800, 500),
            LayerSpec::Relu,
            LayerSpec::dense(500, NUM_CLASSES),
        ],
        seed,
    )
}

/// Output nonlinearity of the autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderHead {
    /// Inverse tangent; the result is clamped to [0, 1] before reaching the
    /// classifier.
    #[default]
    Atan,
    Sigmoid,
}

/// Tap name of the autoencoder's 8×2×2 code.
pub const BOTTLENECK: &str = "bottleneck";

/// Layer index of the last encoder layer of [`build_autoencoder`].
pub const ENCODER_END: usize = 5;

/// Denoising autoencoder: two conv/relu/pool encoder stages down to 8×2×2 and
/// three transposed convolutions back up to 1×28×28.
pub fn build_autoencoder(seed: u64, head: DecoderHead) -> Result<ModelGraph> {
    let head_layer = match head {
        DecoderHead::Atan => LayerSpec::Atan,
        DecoderHead::Sigmoid => LayerSpec::Sigmoid,
    };
    ModelGraph::new(
        &[1, IMAGE_SIDE, IMAGE_SIDE],
        vec![
            LayerSpec::conv(1, 16, 3, 3, 1),
            LayerSpec::Relu,
            LayerSpec::pool(2, 2),
            LayerSpec::conv(16, 8, 3, 2, 1),
            LayerSpec::Relu,
            LayerSpec::pool(2, 1),
            LayerSpec::conv_transpose(8, 16, 3, 2, 0),
            LayerSpec::Relu,
            LayerSpec::conv_transpose(16, 8, 5, 3, 1),
            LayerSpec::Relu,
            LayerSpec::conv_transpose(8, 1, 2, 2, 1),
            head_layer,
        ],
        seed,
    )?
    .with_tap(BOTTLENECK, ENCODER_END)
}

/// Feature maps of the loss network compared by the denoiser objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureTap {
    /// Last stage before the final pooling: 512×2×2.
    Deep,
    /// 256×4×4.
    Middle,
    /// 128×8×8.
    Shallow,
}

impl FeatureTap {
    pub const ALL: [FeatureTap; 3] = [FeatureTap::Deep, FeatureTap::Middle, FeatureTap::Shallow];

    pub fn name(self) -> &'static str {
        match self {
            FeatureTap::Deep => "deep",
            FeatureTap::Middle => "middle",
            FeatureTap::Shallow => "shallow",
        }
    }

    /// Channels × height × width of the tap.
    pub fn shape(self) -> [usize; 3] {
        match self {
            FeatureTap::Deep => [512, 2, 2],
            FeatureTap::Middle => [256, 4, 4],
            FeatureTap::Shallow => [128, 8, 8],
        }
    }
}

/// Reduced VGG-style classifier on 3×32×32 inputs: one 3×3 conv + relu per
/// stage with 2×2 pooling between stages, taps at the relu outputs of the
/// last three stages, and a linear head used only for pretraining.
pub fn build_loss_network(seed: u64) -> Result<ModelGraph> {
    let widths = [3, 32, 64, 128, 256, 512];
    let mut layers = Vec::new();
    let mut taps = Vec::new();
    for stage in 0..5 {
        layers.push(LayerSpec::conv(widths[stage], widths[stage + 1], 3, 1, 1));
        layers.push(LayerSpec::Relu);
        let tap = match stage {
            2 => Some(FeatureTap::Shallow),
            3 => Some(FeatureTap::Middle),
            4 => Some(FeatureTap::Deep),
            _ => None,
        };
        if let Some(t) = tap {
            taps.push((t, layers.len() - 1));
        }
        layers.push(LayerSpec::pool(2, 2));
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::dense(512, NUM_CLASSES));

    let mut g = ModelGraph::new(&[3, LOSS_NET_SIDE, LOSS_NET_SIDE], layers, seed)?;
    for (t, layer) in taps {
        g = g.with_tap(t.name(), layer)?;
    }
    Ok(g)
}

/// Last layer index needed to produce every tap; feature extraction can stop
/// there.
pub fn last_tap_layer<T: Scalar>(g: &ModelGraph<T>) -> Option<usize> {
    g.taps().iter().map(|t| t.layer).max()
}

/// Maps `[B, 1, 28, 28]` images onto the loss network's `[B, 3, 32, 32]`
/// input: aligned-corner bilinear upsampling, then channel replication.
pub fn adapt_input<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let [_, c, _, _] = tape.value(x).dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("adapt_input expects one channel, got {c}")));
    }
    let up = tape.resize_bilinear(x, LOSS_NET_SIDE, LOSS_NET_SIDE)?;
    tape.repeat_channels(up, 3)
}

/// Tensor-level form of [`adapt_input`].
pub fn adapt_input_tensor<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = adapt_input(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_shapes_and_count() {
        let g = build_classifier(0).unwrap();
        assert_eq!(g.layer_shapes()[6], vec![800]);
        assert_eq!(g.output_shape(), &[10]);
        assert_eq!(
            g.param_count(),
            (20 * 25 + 20) + (50 * 20 * 25 + 50) + (800 * 500 + 500) + (500 * 10 + 10)
        );
        assert_eq!(g.param_count(), 431_080);
        let y = g.infer(&Tensor::full(&[2, 1, 28, 28], 0.5)).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
        assert!(y.all_finite());
    }

    #[test]
    fn autoencoder_chain() {
        let g = build_autoencoder(0, DecoderHead::Atan).unwrap();
        let spatial: Vec<usize> = g.layer_shapes().iter().map(|s| s[1]).collect();
        assert_eq!(spatial, vec![10, 10, 5, 3, 3, 2, 5, 5, 15, 15, 28, 28]);
        assert_eq!(g.tap_shape(BOTTLENECK), Some(&[8, 2, 2][..]));
        assert_eq!(g.output_shape(), &[1, 28, 28]);
    }

    #[test]
    fn loss_network_taps() {
        let g = build_loss_network(0).unwrap();
        for t in FeatureTap::ALL {
            assert_eq!(g.tap_shape(t.name()), Some(&t.shape()[..]), "{t:?}");
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 1, 28, 28], 0.25));
        let a = adapt_input(&mut tape, x).unwrap();
        let fp = g.forward(&mut tape, a, ParamMode::Frozen).unwrap();
        for t in FeatureTap::ALL {
            let s = t.shape();
            assert_eq!(tape.value(fp.tap(t.name()).unwrap()).shape(), &[3, s[0], s[1], s[2]]);
        }
    }

    #[test]
    fn chain_mismatch_rejected() {
        let err = ModelGraph::<f32>::new(&[1, 28, 28], vec![LayerSpec::conv(1, 4, 3, 1, 0), LayerSpec::conv(5, 4, 3, 1, 0)], 0)
            .unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn adapt_input_contract() {
        let c = Tensor::<f32>::full(&[1, 1, 28, 28], 0.5);
        let y = adapt_input_tensor(&c).unwrap();
        assert_eq!(y.shape(), &[1, 3, 32, 32]);
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));

        let x = Tensor::<f32>::from_fn(&[1, 1, 28, 28], |i| ((i * 7919) % 256) as f32 / 255.0);
        let y = adapt_input_tensor(&x).unwrap();
        let plane = 32 * 32;
        assert_eq!(y.data()[..plane], y.data()[plane..2 * plane]);
        assert_eq!(y.data()[..plane], y.data()[2 * plane..]);
        let (xd, yd) = (x.data(), y.data());
        assert_eq!(yd[0], xd[0]);
        assert_eq!(yd[31], xd[27]);
        assert_eq!(yd[31 * 32], xd[27 * 28]);
        assert_eq!(yd[plane - 1], xd[28 * 28 - 1]);
        assert!(yd.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = build_classifier(7).unwrap();
        let b = build_classifier(7).unwrap();
        let c = build_classifier(8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }
}
