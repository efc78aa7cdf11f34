//! Supervised training of the classifier and loss network, and feature-loss
//! training of the denoising autoencoder.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::corpus::AdversarialCorpus;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{adapt_input, last_tap_layer, ModelGraph, ParamMode, IMAGE_SIDE, LOSS_NET_SIDE};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", a.learning_rate)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 || a.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Percent correct; absent for the denoiser.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<EpochMetrics>,
}

impl History {
    pub fn push(&mut self, epoch: usize, split: &str, loss: f64, accuracy: Option<f64>) {
        log::info!(
            "epoch {epoch} {split}: loss {loss:.6}{}",
            accuracy.map(|a| format!(", accuracy {a:.2}%")).unwrap_or_default()
        );
        self.rows.push(EpochMetrics {
            epoch,
            split: split.to_string(),
            loss,
            accuracy,
        });
    }

    /// Losses of `split`, in epoch order.
    pub fn losses(&self, split: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.loss).collect()
    }

    /// Tab-separated `epoch split loss accuracy` lines with a header.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tsplit\tloss\taccuracy\n");
        for r in &self.rows {
            let acc = r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{}\t{}\t{:.8}\t{acc}", r.epoch, r.split, r.loss);
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut h = History::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("metrics line {}: {line:?}", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            h.rows.push(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad())?,
                split: f[1].to_string(),
                loss: f[2].parse().map_err(|_| bad())?,
                accuracy: match f[3] {
                    "-" => None,
                    a => Some(a.parse().map_err(|_| bad())?),
                },
            });
        }
        Ok(h)
    }
}

/// Sample order of one epoch: a seeded permutation, reproducible from
/// `(seed, epoch)` alone.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

/// Adam state plus the plumbing between a model's parameter store and the
/// parameter leaves of one forward pass.
struct Optimizer {
    cfg: AdamConfig,
    state: AdamState,
}

impl Optimizer {
    fn new(model: &ModelGraph, cfg: AdamConfig) -> Self {
        let params: Vec<&Tensor> = model.params().iter().flatten().collect();
        Optimizer {
            cfg,
            state: AdamState::new(&params),
        }
    }

    /// Applies one update; returns false if any parameter is no longer finite.
    fn step(&mut self, model: &mut ModelGraph, tape: &mut Tape, leaves: &[Vec<Var>]) -> Result<bool> {
        let grads: Vec<Tensor> = leaves
            .iter()
            .flatten()
            .map(|&v| {
                tape.take_grad(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().flatten().collect();
        adam_step(&mut params, &grad_refs, &mut self.state, &self.cfg)?;
        Ok(params.iter().all(|p| p.data().iter().all(|v| v.is_finite())))
    }
}

/// How images reach the network being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Feed {
    Direct,
    /// Through [`adapt_input`] (1×28×28 to 3×32×32).
    Adapted,
}

fn supervised(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig, feed: Feed) -> Result<History> {
    cfg.validate()?;
    let labels = data.labels_usize();
    let mut opt = Optimizer::new(model, cfg.adam);
    let mut history = History::default();
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.images.gather_batch(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let mut xv = tape.constant(x);
            if feed == Feed::Adapted {
                xv = adapt_input(&mut tape, xv)?;
            }
            let pass = model.forward(&mut tape, xv, ParamMode::Trainable)?;
            let loss = tape.softmax_cross_entropy(pass.output, &y)?;
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            loss_sum += lv * idx.len() as f64;
            let pred = tape.value(pass.output).argmax_rows()?;
            correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
            tape.backward(loss)?;
            if !opt.step(model, &mut tape, &pass.params)? {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
        }
        let n = data.len() as f64;
        history.push(epoch, "train", loss_sum / n, Some(100.0 * correct as f64 / n));
    }
    Ok(history)
}

/// Cross-entropy training of a 1×28×28 classifier.
pub fn train_classifier(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    supervised(model, data, cfg, Feed::Direct)
}

/// Pretrains the loss network on clean classification of adapted images.
pub fn train_loss_network(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    if model.input_shape() != [3, LOSS_NET_SIDE, LOSS_NET_SIDE] {
        return Err(Error::Shape(format!(
            "loss network must take 3×32×32 input, got {:?}",
            model.input_shape()
        )));
    }
    supervised(model, data, cfg, Feed::Adapted)
}

/// One weighted term of the feature loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TapWeight {
    pub tap: String,
    /// Per-image element count of the tap.
    pub elements: usize,
    pub coefficient: f64,
}

/// Coefficients of the feature loss: one per loss-network tap plus one for
/// the pixel reconstruction term.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLossWeights {
    pub taps: Vec<TapWeight>,
    pub pixel_elements: usize,
    pub pixel: f64,
}

impl FeatureLossWeights {
    /// Each coefficient is the reciprocal of the element count its term
    /// compares.
    pub fn reciprocal(taps: &[(&str, usize)], pixel_elements: usize) -> Result<Self> {
        if pixel_elements == 0 || taps.iter().any(|&(_, n)| n == 0) {
            return Err(Error::Config("feature-loss terms need positive element counts".into()));
        }
        Ok(FeatureLossWeights {
            taps: taps
                .iter()
                .map(|&(name, n)| TapWeight {
                    tap: name.to_string(),
                    elements: n,
                    coefficient: 1.0 / n as f64,
                })
                .collect(),
            pixel_elements,
            pixel: 1.0 / pixel_elements as f64,
        })
    }

    /// Reciprocal weights for every tap of `loss_net` and an image of
    /// `image_elements` values.
    pub fn for_loss_network<T: Scalar>(loss_net: &ModelGraph<T>, image_elements: usize) -> Result<Self> {
        let taps: Vec<(&str, usize)> = loss_net
            .taps()
            .iter()
            .map(|t| (t.name.as_str(), loss_net.tap_shape(&t.name).unwrap().iter().product()))
            .collect();
        if taps.is_empty() {
            return Err(Error::Config("loss network exports no taps".into()));
        }
        Self::reciprocal(&taps, image_elements)
    }

    /// Weights for the standard loss network on 28×28 images.
    pub fn standard<T: Scalar>(loss_net: &ModelGraph<T>) -> Result<Self> {
        Self::for_loss_network(loss_net, IMAGE_SIDE * IMAGE_SIDE)
    }

    pub fn coefficient(&self, tap: &str) -> Option<f64> {
        self.taps.iter().find(|t| t.tap == tap).map(|t| t.coefficient)
    }

    /// Rejects a loss network whose taps differ from this table.
    pub fn check<T: Scalar>(&self, loss_net: &ModelGraph<T>) -> Result<()> {
        for t in &self.taps {
            let shape = loss_net
                .tap_shape(&t.tap)
                .ok_or_else(|| Error::Config(format!("loss network has no tap {:?}", t.tap)))?;
            let n: usize = shape.iter().product();
            if n != t.elements {
                return Err(Error::Shape(format!(
                    "tap {:?} has {n} elements per image, weight table expects {}",
                    t.tap, t.elements
                )));
            }
        }
        Ok(())
    }
}

/// Feeds images to the loss network: unchanged when the shapes already
/// agree, through [`adapt_input`] for 1×28×28 images and a 3×32×32 network.
fn loss_net_input<T: Scalar>(tape: &mut Tape<T>, x: Var, loss_net: &ModelGraph<T>) -> Result<Var> {
    let item = &tape.value(x).shape()[1..];
    if item == loss_net.input_shape() {
        return Ok(x);
    }
    if item == [1, IMAGE_SIDE, IMAGE_SIDE] && loss_net.input_shape() == [3, LOSS_NET_SIDE, LOSS_NET_SIDE] {
        return adapt_input(tape, x);
    }
    Err(Error::Shape(format!(
        "images {item:?} cannot feed a loss network taking {:?}",
        loss_net.input_shape()
    )))
}

fn tap_vars<T: Scalar>(tape: &mut Tape<T>, x: Var, loss_net: &ModelGraph<T>, w: &FeatureLossWeights) -> Result<Vec<Var>> {
    let input = loss_net_input(tape, x, loss_net)?;
    let end = last_tap_layer(loss_net).ok_or_else(|| Error::Config("loss network exports no taps".into()))?;
    let pass = loss_net.forward_layers(tape, input, 0..end + 1, ParamMode::Frozen)?;
    w.taps
        .iter()
        .map(|t| pass.tap(&t.tap).ok_or_else(|| Error::Config(format!("loss network has no tap {:?}", t.tap))))
        .collect()
}

/// Loss-network activations of clean images, the fixed targets of the
/// feature loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTargets<T: Scalar = f32> {
    pub taps: Vec<Tensor<T>>,
}

pub fn feature_targets<T: Scalar>(loss_net: &ModelGraph<T>, w: &FeatureLossWeights, clean: &Tensor<T>) -> Result<FeatureTargets<T>> {
    w.check(loss_net)?;
    let mut tape = Tape::new();
    let x = tape.constant(clean.clone());
    let taps = tap_vars(&mut tape, x, loss_net, w)?;
    Ok(FeatureTargets {
        taps: taps.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// Records the feature loss of `denoised` against `clean` on `tape`:
/// coefficient-weighted sums of squared differences over each tap and over
/// the pixels, averaged over the batch.
pub fn feature_objective<T: Scalar>(
    tape: &mut Tape<T>,
    clean: Var,
    denoised: Var,
    targets: &FeatureTargets<T>,
    loss_net: &ModelGraph<T>,
    w: &FeatureLossWeights,
) -> Result<Var> {
    let (cs, ds) = (tape.value(clean).shape().to_vec(), tape.value(denoised).shape().to_vec());
    if cs != ds {
        return Err(Error::Shape(format!("clean {cs:?} and denoised {ds:?} differ")));
    }
    if cs[1..].iter().product::<usize>() != w.pixel_elements {
        return Err(Error::Shape(format!(
            "images have {} elements, weight table expects {}",
            cs[1..].iter().product::<usize>(),
            w.pixel_elements
        )));
    }
    let batch = cs[0] as f64;
    let feats = tap_vars(tape, denoised, loss_net, w)?;
    let mut total = tape.squared_error(clean, denoised, w.pixel / batch)?;
    for ((&f, target), tw) in feats.iter().zip(&targets.taps).zip(&w.taps) {
        let t = tape.constant(target.clone());
        let term = tape.squared_error(t, f, tw.coefficient / batch)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Value of the feature loss between two image batches.
pub fn feature_loss<T: Scalar>(clean: &Tensor<T>, denoised: &Tensor<T>, loss_net: &ModelGraph<T>, w: &FeatureLossWeights) -> Result<f64> {
    let targets = feature_targets(loss_net, w, clean)?;
    let mut tape = Tape::new();
    let c = tape.constant(clean.clone());
    let d = tape.constant(denoised.clone());
    let l = feature_objective(&mut tape, c, d, &targets, loss_net, w)?;
    Ok(tape.value(l).data()[0].to_f64().unwrap())
}

/// Gradient of [`feature_loss`] with respect to `denoised`.
pub fn feature_loss_grad<T: Scalar>(
    clean: &Tensor<T>,
    denoised: &Tensor<T>,
    loss_net: &ModelGraph<T>,
    w: &FeatureLossWeights,
) -> Result<Tensor<T>> {
    let targets = feature_targets(loss_net, w, clean)?;
    let mut tape = Tape::new();
    let c = tape.constant(clean.clone());
    let d = tape.leaf(denoised.clone(), true);
    let l = feature_objective(&mut tape, c, d, &targets, loss_net, w)?;
    tape.backward(l)?;
    Ok(tape.take_grad(d).expect("denoised requires grad"))
}

/// Above this many records the clean-image targets are recomputed per batch
/// instead of cached (each record caches roughly 57 KB).
pub const TARGET_CACHE_LIMIT: usize = 12_000;

/// Outcome of denoiser training.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserRun {
    pub history: History,
    pub loss_net_checksum_before: String,
    pub loss_net_checksum_after: String,
}

/// Trains `autoencoder` to map each adversarial image of `corpus` to the
/// loss-network features and pixels of its clean pair.
pub fn train_denoiser(
    autoencoder: &mut ModelGraph,
    corpus: &AdversarialCorpus,
    loss_net: &ModelGraph,
    w: &FeatureLossWeights,
    cfg: &TrainConfig,
) -> Result<DenoiserRun> {
    cfg.validate()?;
    w.check(loss_net)?;
    if corpus.is_empty() {
        return Err(Error::Config("cannot train a denoiser on an empty corpus".into()));
    }
    let before = loss_net.checksum();
    let cache: Option<Vec<FeatureTargets>> = if corpus.len() <= TARGET_CACHE_LIMIT {
        Some(
            corpus
                .batches(256)
                .map(|b| feature_targets(loss_net, w, &b.clean))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let cached = |idx: &[usize]| -> Result<FeatureTargets> {
        let cache = cache.as_ref().expect("cache present");
        let taps = (0..w.taps.len())
            .map(|k| {
                let parts: Vec<Tensor> = idx
                    .iter()
                    .map(|&i| {
                        let t = &cache[i / 256].taps[k];
                        let item = t.item(i % 256);
                        let mut shape = t.shape().to_vec();
                        shape[0] = 1;
                        Tensor::new(&shape, item.to_vec())
                    })
                    .collect::<Result<_>>()?;
                Tensor::concat_batch(&parts)
            })
            .collect::<Result<_>>()?;
        Ok(FeatureTargets { taps })
    };

    let mut opt = Optimizer::new(autoencoder, cfg.adam);
    let mut history = History::default();
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(corpus.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = corpus.gather(idx)?;
            let targets = match cache {
                Some(_) => cached(idx)?,
                None => feature_targets(loss_net, w, &batch.clean)?,
            };
            let mut tape = Tape::new();
            let clean = tape.constant(batch.clean);
            let adv = tape.constant(batch.adversarial);
            let pass = autoencoder.forward(&mut tape, adv, ParamMode::Trainable)?;
            let loss = feature_objective(&mut tape, clean, pass.output, &targets, loss_net, w)?;
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            loss_sum += lv * idx.len() as f64;
            tape.backward(loss)?;
            if !opt.step(autoencoder, &mut tape, &pass.params)? {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
        }
        history.push(epoch, "train", loss_sum / corpus.len() as f64, None);
    }
    Ok(DenoiserRun {
        history,
        loss_net_checksum_before: before,
        loss_net_checksum_after: loss_net.checksum(),
    })
}

/// Mean feature loss over `corpus` between clean images and either the
/// clamped denoiser output or, without a denoiser, the adversarial images
/// themselves.
pub fn mean_feature_loss(
    corpus: &AdversarialCorpus,
    denoiser: Option<&ModelGraph>,
    loss_net: &ModelGraph,
    w: &FeatureLossWeights,
) -> Result<f64> {
    let mut sum = 0.0;
    for b in corpus.batches(256) {
        let restored = match denoiser {
            Some(d) => d.infer(&b.adversarial)?.clamp01(),
            None => b.adversarial.clone(),
        };
        sum += feature_loss(&b.clean, &restored, loss_net, w)? * b.labels.len() as f64;
    }
    Ok(sum / corpus.len().max(1) as f64)
}
