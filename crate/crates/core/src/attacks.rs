//! L∞-bounded gradient-sign attacks against a frozen classifier.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Tape;
use crate::corpus::{write_corpus, AdversarialCorpus};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{ModelGraph, ParamMode, NUM_CLASSES};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

impl AttackKind {
    pub fn id(self) -> u8 {
        match self {
            AttackKind::Fgsm => 0,
            AttackKind::Pgd => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(AttackKind::Fgsm),
            1 => Some(AttackKind::Pgd),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(Error::Config(format!("unknown attack {other:?} (expected fgsm or pgd)"))),
        }
    }
}

/// Budget and schedule of one attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L∞ budget in pixel units.
    pub epsilon: f32,
    /// PGD step size; FGSM steps by `epsilon`.
    pub kappa: f32,
    pub iterations: u32,
    pub targeted: bool,
    pub target_class: Option<u8>,
    /// Start PGD from a uniform draw inside the budget.
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub const DEFAULT_EPSILON: f32 = 0.2;
    pub const DEFAULT_KAPPA: f32 = 0.1;
    pub const DEFAULT_ITERATIONS: u32 = 100;

    pub fn fgsm(epsilon: f32) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            kappa: epsilon,
            iterations: 1,
            targeted: false,
            target_class: None,
            random_start: false,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f32, kappa: f32, iterations: u32) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon,
            kappa,
            iterations,
            targeted: false,
            target_class: None,
            random_start: true,
            seed: 0,
        }
    }

    /// Settings used for every reported experiment.
    pub fn standard(kind: AttackKind) -> Self {
        match kind {
            AttackKind::Fgsm => Self::fgsm(Self::DEFAULT_EPSILON),
            AttackKind::Pgd => Self::pgd(Self::DEFAULT_EPSILON, Self::DEFAULT_KAPPA, Self::DEFAULT_ITERATIONS),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_target(mut self, class: u8) -> Self {
        self.targeted = true;
        self.target_class = Some(class);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        // Zero is accepted as a degenerate no-op budget.
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if self.kind == AttackKind::Pgd && !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be positive, got {}", self.kappa));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        match (self.targeted, self.target_class) {
            (true, None) => return bad("targeted attack needs a target class".into()),
            (_, Some(c)) if c as usize >= NUM_CLASSES => return bad(format!("target class {c} out of range")),
            _ => {}
        }
        Ok(())
    }
}

/// Gradient of the mean cross-entropy with respect to the input batch, and
/// the per-batch mean loss.
pub fn input_gradient(model: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let logits = model.forward(&mut tape, xv, ParamMode::Frozen)?.output;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss).data()[0] as f64;
    tape.backward(loss)?;
    let g = tape.take_grad(xv).expect("input leaf requires grad");
    Ok((g, value))
}

/// Per-sample cross-entropy of the model on `x`.
pub fn per_sample_loss(model: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let logits = model.infer(x)?;
    let probs = crate::ops::softmax_rows(&logits)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[i * NUM_CLASSES + y].max(f64::MIN_POSITIVE).ln())
        .collect())
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Box `[lo, hi]` of admissible values for a pixel whose clean value is
/// `x`: the intersection of [0, 1] with the ε-ball, narrowed by one ulp
/// where f32 rounding would otherwise put an endpoint outside the ball.
fn admissible(x: f32, epsilon: f32) -> (f32, f32) {
    let (xd, ed) = (x as f64, epsilon as f64);
    let mut lo = x - epsilon;
    if xd - lo as f64 > ed {
        lo = lo.next_up();
    }
    let mut hi = x + epsilon;
    if hi as f64 - xd > ed {
        hi = hi.next_down();
    }
    (lo.max(0.0), hi.min(1.0))
}

/// Projects `v` onto the admissible box around `clean`.
pub fn project(v: &mut [f32], clean: &[f32], epsilon: f32) {
    for (p, &x) in v.iter_mut().zip(clean) {
        let (lo, hi) = admissible(x, epsilon);
        *p = p.clamp(lo, hi);
    }
}

fn check_input(x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    if x.batch() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} labels",
            x.batch(),
            labels.len()
        )));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("attack input has pixels outside [0, 1]".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    Ok(())
}

/// Labels the loss is taken against and the direction (+1 ascend, -1
/// descend) of each step.
fn objective(labels: &[usize], cfg: &AttackConfig) -> (Vec<usize>, f32) {
    match cfg.target_class {
        Some(t) if cfg.targeted => (vec![t as usize; labels.len()], -1.0),
        _ => (labels.to_vec(), 1.0),
    }
}

/// One signed-gradient step of size `step` from `current`, projected around
/// `clean`.
fn signed_step(
    model: &ModelGraph,
    current: &Tensor,
    clean: &Tensor,
    labels: &[usize],
    direction: f32,
    step: f32,
    epsilon: f32,
) -> Result<Tensor> {
    let (g, _) = input_gradient(model, current, labels)?;
    let mut next = current.clone();
    for (p, &gv) in next.data_mut().iter_mut().zip(g.data()) {
        *p = (*p + direction * step * sign(gv)).clamp(0.0, 1.0);
    }
    project(next.data_mut(), clean.data(), epsilon);
    Ok(next)
}

/// Fast gradient sign method: one step of size ε along the loss gradient
/// sign (against it when targeted).
pub fn fgsm(model: &ModelGraph, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    check_input(x, labels, cfg)?;
    let (y, dir) = objective(labels, cfg);
    signed_step(model, x, x, &y, dir, cfg.epsilon, cfg.epsilon)
}

/// Projected gradient descent. Random starts are seeded from `cfg.seed` and
/// the sample's position `first_index + i`, so results do not depend on how
/// a dataset is split into batches.
pub fn pgd_indexed(
    model: &ModelGraph,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    first_index: usize,
) -> Result<Tensor> {
    check_input(x, labels, cfg)?;
    let (y, dir) = objective(labels, cfg);
    let mut cur = x.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        let per = x.item_len();
        for (i, item) in cur.data_mut().chunks_mut(per).enumerate() {
            let mut rng = sample_rng(cfg.seed, first_index + i);
            for p in item.iter_mut() {
                *p = (*p + rng.gen_range(-cfg.epsilon..=cfg.epsilon)).clamp(0.0, 1.0);
            }
        }
        project(cur.data_mut(), x.data(), cfg.epsilon);
    }
    for _ in 0..cfg.iterations {
        cur = signed_step(model, &cur, x, &y, dir, cfg.kappa, cfg.epsilon)?;
    }
    Ok(cur)
}

pub fn pgd(model: &ModelGraph, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    pgd_indexed(model, x, labels, cfg, 0)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Runs the configured attack on `x`.
pub fn attack(model: &ModelGraph, x: &Tensor, labels: &[usize], cfg: &AttackConfig, first_index: usize) -> Result<Tensor> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, labels, cfg),
        AttackKind::Pgd => pgd_indexed(model, x, labels, cfg, first_index),
    }
}

/// Batch size used when attacking whole datasets. Fixed so that results do
/// not depend on the number of worker threads.
pub const ATTACK_CHUNK: usize = 50;

/// Attacks every image of `images`, in parallel over fixed-size chunks.
pub fn attack_all(model: &ModelGraph, images: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let n = images.batch();
    let starts: Vec<usize> = (0..n).step_by(ATTACK_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let e = (s + ATTACK_CHUNK).min(n);
            attack(model, &images.slice_batch(s, e)?, &labels[s..e], cfg, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_batch(&parts)
}

/// Attacks a whole dataset split and persists the paired records.
pub fn generate_corpus(
    model: &ModelGraph,
    dataset: &Dataset,
    cfg: &AttackConfig,
    out_path: impl AsRef<Path>,
) -> Result<AdversarialCorpus> {
    if dataset.images.shape()[1..] != model.input_shape()[..] {
        return Err(Error::Shape(format!(
            "model expects {:?} images, dataset has {:?}",
            model.input_shape(),
            &dataset.images.shape()[1..]
        )));
    }
    let adversarial = attack_all(model, &dataset.images, &dataset.labels_usize(), cfg)?;
    let corpus = AdversarialCorpus::new(
        dataset.kind,
        *cfg,
        dataset.images.clone(),
        adversarial,
        dataset.labels.clone(),
    )?;
    write_corpus(&corpus, out_path)?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_classifier;

    fn batch(n: usize) -> (Tensor, Vec<usize>) {
        let x = Tensor::from_fn(&[n, 1, 28, 28], |i| ((i * 7919) % 1000) as f32 / 999.0);
        (x, (0..n).map(|i| i % 10).collect())
    }

    #[test]
    fn admissible_box_is_exact() {
        for &x in &[0.0f32, 0.1, 0.3, 0.7, 0.8, 0.95, 1.0, 0.123_456_7] {
            let (lo, hi) = admissible(x, 0.2);
            assert!((x as f64 - lo as f64) <= 0.2f32 as f64);
            assert!((hi as f64 - x as f64) <= 0.2f32 as f64);
            assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        }
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = build_classifier(1).unwrap();
        let (x, y) = batch(3);
        let adv = fgsm(&m, &x, &y, &AttackConfig::fgsm(0.0)).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn fgsm_delta_takes_sign_values() {
        let m = build_classifier(2).unwrap();
        let x = Tensor::full(&[2, 1, 28, 28], 0.5);
        let adv = fgsm(&m, &x, &[3, 4], &AttackConfig::fgsm(0.2)).unwrap();
        let e = 0.2f32;
        for (&a, &c) in adv.data().iter().zip(x.data()) {
            let d = a - c;
            assert!(d == 0.0 || (d.abs() - e).abs() < 1e-6, "delta {d}");
        }
    }

    #[test]
    fn rejects_out_of_range_input() {
        let m = build_classifier(2).unwrap();
        let x = Tensor::full(&[1, 1, 28, 28], 1.5);
        let err = fgsm(&m, &x, &[0], &AttackConfig::fgsm(0.2)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::standard(AttackKind::Pgd).validate().is_ok());
        let mut c = AttackConfig::fgsm(0.2);
        c.targeted = true;
        assert!(c.validate().is_err());
        assert!(AttackConfig::fgsm(1.5).validate().is_err());
        assert!(AttackConfig::pgd(0.2, 0.1, 0).validate().is_err());
        assert!(AttackConfig::pgd(0.2, 0.0, 3).validate().is_err());
    }

    #[test]
    fn single_pgd_step_matches_fgsm() {
        let m = build_classifier(5).unwrap();
        let (x, y) = batch(4);
        let mut p = AttackConfig::pgd(0.2, 0.3, 1);
        p.random_start = false;
        let a = pgd(&m, &x, &y, &p).unwrap();
        let b = fgsm(&m, &x, &y, &AttackConfig::fgsm(0.2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chunking_does_not_change_results() {
        let m = build_classifier(5).unwrap();
        let (x, y) = batch(ATTACK_CHUNK + 7);
        let cfg = AttackConfig::pgd(0.2, 0.1, 2).with_seed(9);
        let all = attack_all(&m, &x, &y, &cfg).unwrap();
        let tail = pgd_indexed(
            &m,
            &x.slice_batch(ATTACK_CHUNK, ATTACK_CHUNK + 7).unwrap(),
            &y[ATTACK_CHUNK..],
            &cfg,
            ATTACK_CHUNK,
        )
        .unwrap();
        assert_eq!(all.slice_batch(ATTACK_CHUNK, ATTACK_CHUNK + 7).unwrap(), tail);
    }
}
