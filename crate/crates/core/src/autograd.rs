//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Tape`]; node ids grow monotonically,
//! so walking ids downward is a reverse topological order and each node is
//! visited once per [`Tape::backward`] call.

use crate::error::{shape_err, Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    ConvTranspose2d { input: Var, kernel: Var, stride: usize, pad: usize },
    ChannelBias { input: Var, bias: Var },
    MaxPool { input: Var, argmax: Vec<u32> },
    Dense { input: Var, weight: Var, bias: Var },
    Relu(Var),
    Atan(Var),
    Sigmoid(Var),
    Reshape(Var),
    Resize(Var),
    RepeatChannels { input: Var, times: usize },
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SquaredError { a: Var, b: Var, scale: f64 },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } | Op::ConvTranspose2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ChannelBias { input, bias } => vec![*input, *bias],
            Op::MaxPool { input, .. } => vec![*input],
            Op::Dense { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Relu(a) | Op::Atan(a) | Op::Sigmoid(a) | Op::Reshape(a) | Op::Resize(a) | Op::Sum(a) | Op::Scale(a, _) => {
                vec![*a]
            }
            Op::RepeatChannels { input, .. } => vec![*input],
            Op::Add(a, b) => vec![*a, *b],
            Op::SquaredError { a, b, .. } => vec![*a, *b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records a computation and replays it backward.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn same_shape<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by every [`Tape::backward`] call so far.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op) -> Var {
        let rg = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(kernel), stride, pad)?;
        Ok(self.derived(y, Op::Conv2d { input, kernel, stride, pad }))
    }

    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv_transpose2d(self.value(input), self.value(kernel), stride, pad)?;
        Ok(self.derived(y, Op::ConvTranspose2d { input, kernel, stride, pad }))
    }

    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let y = ops::add_channel_bias(self.value(input), self.value(bias))?;
        Ok(self.derived(y, Op::ChannelBias { input, bias }))
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = ops::max_pool2d(self.value(input), kernel, stride)?;
        Ok(self.derived(y, Op::MaxPool { input, argmax }))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.derived(y, Op::Dense { input, weight, bias }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.derived(y, Op::Relu(a))
    }

    pub fn atan(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| v.atan());
        self.derived(y, Op::Atan(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        self.derived(y, Op::Sigmoid(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        Ok(self.derived(y, Op::Reshape(a)))
    }

    /// Collapses every axis after the first: `[B, ...] → [B, F]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = [t.batch(), t.item_len()];
        self.reshape(a, &shape)
    }

    /// Bilinear resize with aligned corners.
    pub fn resize_bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let y = ops::resize_bilinear(self.value(a), oh, ow)?;
        Ok(self.derived(y, Op::Resize(a)))
    }

    /// Tiles a single-channel `[B, 1, H, W]` image into `[B, times, H, W]`.
    pub fn repeat_channels(&mut self, input: Var, times: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4()?;
        if c != 1 || times == 0 {
            return Err(shape_err!("repeat_channels expects [B, 1, H, W] and times ≥ 1, got {c} channels"));
        }
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(b * times * h * w);
        for bi in 0..b {
            for _ in 0..times {
                data.extend_from_slice(&src[bi * h * w..][..h * w]);
            }
        }
        let y = Tensor::new(&[b, times, h, w], data)?;
        Ok(self.derived(y, Op::RepeatChannels { input, times }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut y = self.value(a).clone();
        for (u, v) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *u += *v;
        }
        Ok(self.derived(y, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cs = T::from_f64_lossy(c);
        let y = self.value(a).map(|v| v * cs);
        self.derived(y, Op::Scale(a, c))
    }

    /// Sum of all elements, accumulated in 64 bits.
    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(T::from_f64_lossy(self.value(a).sum_f64()));
        self.derived(y, Op::Sum(a))
    }

    /// `scale · Σ (a − b)²`.
    pub fn squared_error(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("squared_error", ta, tb)?;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| {
                let d = x.to_f64().unwrap() - y.to_f64().unwrap();
                d * d
            })
            .sum();
        let y = Tensor::scalar(T::from_f64_lossy(scale * s));
        Ok(self.derived(y, Op::SquaredError { a, b, scale }))
    }

    /// Mean of elementwise squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.squared_error(a, b, 1.0 / n as f64)
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [b, k] = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(shape_err!("{} labels for a batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let probs = ops::softmax_rows(self.value(logits))?;
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                // log-sum-exp form keeps extreme margins finite.
                let row = &self.value(logits).data()[r * k..][..k];
                let m = row.iter().map(|v| v.to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v.to_f64().unwrap() - m).exp()).sum::<f64>().ln();
                lse - row[l].to_f64().unwrap()
            })
            .sum::<f64>()
            / b as f64;
        let y = Tensor::scalar(T::from_f64_lossy(loss));
        Ok(self.derived(
            y,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagates from a scalar `loss`, adding into the stored gradient of
    /// every reachable node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            for (parent, pg) in self.local_grads(id, &g)? {
                add_into(&mut pending[parent.0], pg);
            }
            add_into(&mut self.nodes[id].grad, g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `id` for each parent needing a grad.
    fn local_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { input, kernel, stride, pad } => {
                let (dx, dk) = ops::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    stride,
                    pad,
                    self.needs(input),
                    self.needs(kernel),
                )?;
                out.extend(dx.map(|t| (input, t)));
                out.extend(dk.map(|t| (kernel, t)));
            }
            &Op::ConvTranspose2d { input, kernel, stride, pad } => {
                let (dx, dk) = ops::conv_transpose2d_backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    stride,
                    pad,
                    self.needs(input),
                    self.needs(kernel),
                )?;
                out.extend(dx.map(|t| (input, t)));
                out.extend(dk.map(|t| (kernel, t)));
            }
            &Op::ChannelBias { input, bias } => {
                if self.needs(bias) {
                    out.push((bias, ops::channel_bias_backward(g)?));
                }
                if self.needs(input) {
                    out.push((input, g.clone()));
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.needs(*input) {
                    out.push((*input, ops::max_pool2d_backward(g, argmax, self.value(*input).shape())?));
                }
            }
            &Op::Dense { input, weight, bias } => {
                let need_params = self.needs(weight) || self.needs(bias);
                let (dx, dw, db) =
                    ops::dense_backward(self.value(input), self.value(weight), g, self.needs(input), need_params)?;
                out.extend(dx.map(|t| (input, t)));
                if self.needs(weight) {
                    out.extend(dw.map(|t| (weight, t)));
                }
                if self.needs(bias) {
                    out.extend(db.map(|t| (bias, t)));
                }
            }
            &Op::Relu(a) => {
                let x = self.value(a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((a, Tensor::new(x.shape(), d)?));
            }
            &Op::Atan(a) => {
                let x = self.value(a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv / (T::one() + v * v))
                    .collect();
                out.push((a, Tensor::new(x.shape(), d)?));
            }
            &Op::Sigmoid(a) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                out.push((a, Tensor::new(node.value.shape(), d)?));
            }
            &Op::Reshape(a) => {
                out.push((a, g.clone().reshape(self.value(a).shape())?));
            }
            &Op::Resize(a) => {
                out.push((a, ops::resize_bilinear_backward(g, self.value(a).shape())?));
            }
            &Op::RepeatChannels { input, times } => {
                let shape = self.value(input).shape().to_vec();
                let plane = shape[2] * shape[3];
                let mut acc = vec![T::zero(); shape[0] * plane];
                for (bi, dst) in acc.chunks_mut(plane).enumerate() {
                    for c in 0..times {
                        for (d, s) in dst.iter_mut().zip(&g.data()[(bi * times + c) * plane..][..plane]) {
                            *d += *s;
                        }
                    }
                }
                out.push((input, Tensor::new(&shape, acc)?));
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    out.push((a, g.clone()));
                }
                if self.needs(b) {
                    out.push((b, g.clone()));
                }
            }
            &Op::Scale(a, c) => {
                let cs = T::from_f64_lossy(c);
                out.push((a, g.map(|v| v * cs)));
            }
            &Op::Sum(a) => {
                out.push((a, Tensor::full(self.value(a).shape(), g.data()[0])));
            }
            &Op::SquaredError { a, b, scale } => {
                let up = g.data()[0].to_f64().unwrap() * 2.0 * scale;
                let (ta, tb) = (self.value(a), self.value(b));
                let diff: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| x.to_f64().unwrap() - y.to_f64().unwrap())
                    .collect();
                if self.needs(a) {
                    let d = diff.iter().map(|d| T::from_f64_lossy(up * d)).collect();
                    out.push((a, Tensor::new(ta.shape(), d)?));
                }
                if self.needs(b) {
                    let d = diff.iter().map(|d| T::from_f64_lossy(-up * d)).collect();
                    out.push((b, Tensor::new(tb.shape(), d)?));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let t = self.value(*logits);
                let [b, k] = t.dims2()?;
                let up = g.data()[0].to_f64().unwrap() / b as f64;
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let onehot = if labels[i / k] == i % k { 1.0 } else { 0.0 };
                        T::from_f64_lossy(up * (p - onehot))
                    })
                    .collect();
                out.push((*logits, Tensor::new(t.shape(), d)?));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_against_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[1], vec![2.0]).unwrap(), true);
        let z = tape.constant(Tensor::zeros(&[1]));
        let l = tape.mse(x, z).unwrap();
        assert_eq!(tape.value(l).data(), &[4.0]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn mse_values() {
        let mut tape = Tape::<f64>::new();
        let mut mse = |a: Vec<f64>, b: Vec<f64>| {
            let a = tape.constant(Tensor::new(&[2], a).unwrap());
            let b = tape.constant(Tensor::new(&[2], b).unwrap());
            let l = tape.mse(a, b).unwrap();
            tape.value(l).data()[0]
        };
        assert_eq!(mse(vec![1.0, 1.0], vec![1.0, 1.0]), 0.0);
        assert_eq!(mse(vec![1.0, 1.0], vec![0.0, 0.0]), 1.0);
        assert_eq!(mse(vec![2.0, 0.0], vec![0.0, 0.0]), 2.0);
    }

    #[test]
    fn diamond_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.scale(x, 5.0);
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[10.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn activations() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = tape.leaf(Tensor::scalar(0.0), true);
        let a = tape.atan(z);
        assert_eq!(tape.value(a).data(), &[0.0]);
        tape.backward(a).unwrap();
        assert_eq!(tape.grad(z).unwrap().data(), &[1.0]);
    }

    fn ce(logits: Vec<f64>, label: usize) -> (f64, Vec<f64>) {
        let k = logits.len();
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::new(&[1, k], logits).unwrap(), true);
        let loss = tape.softmax_cross_entropy(l, &[label]).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(loss).data()[0], tape.grad(l).unwrap().data().to_vec())
    }

    #[test]
    fn cross_entropy_reference_values() {
        let (uniform, g) = ce(vec![0.0; 10], 3);
        assert!((uniform - 10f64.ln()).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);

        let mut margin = vec![0.0; 10];
        margin[7] = 100.0;
        let (l, g) = ce(margin, 7);
        assert!((0.0..1e-40).contains(&l));
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f32>::new();
        let l = tape.leaf(Tensor::zeros(&[1, 10]), true);
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[10]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn identity_layers() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 5, 5], |i| i as f64 * 0.1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = tape.conv2d(xv, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);
        let y = tape.conv_transpose2d(xv, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);

        let v = Tensor::<f64>::from_fn(&[1, 4], |i| i as f64 - 1.5);
        let xv = tape.constant(v.clone());
        let eye = tape.constant(Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
        let zero_b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.dense(xv, eye, zero_b).unwrap();
        assert_eq!(tape.value(y), &v);
        let zero_w = tape.constant(Tensor::zeros(&[4, 4]));
        let y = tape.dense(xv, zero_w, zero_b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_rejects_inner_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 800]));
        let w = tape.constant(Tensor::zeros(&[799, 500]));
        let b = tape.constant(Tensor::zeros(&[500]));
        assert!(tape.dense(x, w, b).is_err());
    }

    #[test]
    fn frozen_branches_get_no_grad() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 0.5), true);
        let k = tape.constant(Tensor::full(&[2, 1, 3, 3], 0.1));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(k).is_none());
    }
}
