//! Accuracy evaluation, the attack × defense experiment matrix, reports and
//! sample dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::attacks::{generate_corpus, AttackConfig, AttackKind};
use crate::corpus::{file_sha256, read_corpus, AdversarialCorpus};
use crate::data::{self, Dataset, DatasetKind, Split};
use crate::error::{Error, Result};
use crate::models::{
    build_autoencoder, build_classifier, build_loss_network, save_weights, DecoderHead, ModelGraph, IMAGE_SIDE,
};
use crate::tensor::Tensor;
use crate::trainer::{
    feature_targets, train_classifier, train_denoiser, train_loss_network, FeatureLossWeights, History, TrainConfig,
};

/// Correct predictions over a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn percent(&self) -> f64 {
        100.0 * self.correct as f64 / self.total.max(1) as f64
    }
}

/// Batch size of evaluation work items; fixed so the result does not depend
/// on the thread count.
pub const EVAL_CHUNK: usize = 250;

/// Classifier predictions on `x`; with a defense the classifier sees the
/// denoiser output clamped to [0, 1].
pub fn predict(classifier: &ModelGraph, x: &Tensor, defense: Option<&ModelGraph>) -> Result<Vec<usize>> {
    let n = x.batch();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let xb = x.slice_batch(s, (s + EVAL_CHUNK).min(n))?;
            let input = match defense {
                Some(d) => d.infer(&xb)?.clamp01(),
                None => xb,
            };
            classifier.infer(&input)?.argmax_rows()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

pub fn evaluate(classifier: &ModelGraph, x: &Tensor, labels: &[usize], defense: Option<&ModelGraph>) -> Result<Accuracy> {
    if x.batch() != labels.len() {
        return Err(Error::Shape(format!("{} images but {} labels", x.batch(), labels.len())));
    }
    if x.shape()[1..] != classifier.input_shape()[..] {
        return Err(Error::Shape(format!(
            "classifier expects {:?} images, got {:?}",
            classifier.input_shape(),
            &x.shape()[1..]
        )));
    }
    let pred = predict(classifier, x, defense)?;
    Ok(Accuracy {
        correct: pred.iter().zip(labels).filter(|(p, y)| p == y).count(),
        total: labels.len(),
    })
}

/// Accuracy on the adversarial half of a corpus.
pub fn evaluate_corpus(classifier: &ModelGraph, corpus: &AdversarialCorpus, defense: Option<&ModelGraph>) -> Result<Accuracy> {
    let b = corpus
        .all()
        .ok_or_else(|| Error::InvalidArgument("cannot evaluate on an empty corpus".into()))?;
    evaluate(classifier, &b.adversarial, &b.labels_usize(), defense)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defense {
    Unsecured,
    Denoiser,
}

impl Defense {
    pub fn name(self) -> &'static str {
        match self {
            Defense::Unsecured => "unsecured",
            Defense::Denoiser => "denoiser",
        }
    }
}

/// One (attack, defense) cell of the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub dataset: DatasetKind,
    /// `None` for clean inputs.
    pub attack: Option<AttackKind>,
    pub defense: Defense,
    pub correct: usize,
    pub samples: usize,
    pub epsilon: f32,
    pub kappa: f32,
    pub iterations: u32,
    pub seed: u64,
}

impl EvalRow {
    pub fn accuracy(&self) -> f64 {
        100.0 * self.correct as f64 / self.samples.max(1) as f64
    }

    pub fn attack_name(&self) -> &'static str {
        self.attack.map_or("none", AttackKind::name)
    }
}

/// Results of one experiment matrix with everything needed to recompute
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub version: String,
    pub rows: Vec<EvalRow>,
    pub config: Vec<(String, String)>,
    pub hashes: Vec<(String, String)>,
    pub wall_clock_seconds: f64,
}

impl EvalReport {
    pub fn row(&self, attack: Option<AttackKind>, defense: Defense) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.attack == attack && r.defense == defense)
    }

    /// Everything except the timing block.
    pub fn render_deterministic(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "featloss report (version {})", self.version);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<9} {:<7} {:<10} {:>9} {:>8}", "dataset", "attack", "defense", "accuracy", "samples");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<9} {:<7} {:<10} {:>9.1} {:>8}",
                r.dataset.name(),
                r.attack_name(),
                r.defense.name(),
                r.accuracy(),
                r.samples
            );
        }
        for r in &self.rows {
            let _ = writeln!(s, "\n[row]");
            let _ = writeln!(s, "dataset={}", r.dataset.name());
            let _ = writeln!(s, "attack={}", r.attack_name());
            let _ = writeln!(s, "defense={}", r.defense.name());
            let _ = writeln!(s, "accuracy={:.1}", r.accuracy());
            let _ = writeln!(s, "correct={}", r.correct);
            let _ = writeln!(s, "samples={}", r.samples);
            let _ = writeln!(s, "epsilon={}", r.epsilon);
            let _ = writeln!(s, "kappa={}", r.kappa);
            let _ = writeln!(s, "iterations={}", r.iterations);
            let _ = writeln!(s, "seed={}", r.seed);
        }
        for (title, pairs) in [("config", &self.config), ("hashes", &self.hashes)] {
            let _ = writeln!(s, "\n[{title}]");
            for (k, v) in pairs {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        s
    }

    pub fn render(&self) -> String {
        format!(
            "{}\n[timing]\nwall_clock_seconds={:.1}\n",
            self.render_deterministic(),
            self.wall_clock_seconds
        )
    }

    /// Reads back the key=value blocks of [`EvalReport::render`].
    pub fn parse(text: &str) -> Result<EvalReport> {
        let bad = |m: String| Error::Format(format!("report: {m}"));
        let version = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("featloss report (version "))
            .and_then(|l| l.strip_suffix(')'))
            .ok_or_else(|| bad("missing title line".into()))?
            .to_string();
        let mut blocks: Vec<(String, Vec<(String, String)>)> = Vec::new();
        for line in text.lines() {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                blocks.push((name.to_string(), Vec::new()));
            } else if let (Some((k, v)), Some(last)) = (line.split_once('='), blocks.last_mut()) {
                last.1.push((k.to_string(), v.to_string()));
            }
        }
        let mut report = EvalReport {
            version,
            rows: Vec::new(),
            config: Vec::new(),
            hashes: Vec::new(),
            wall_clock_seconds: 0.0,
        };
        for (name, pairs) in blocks {
            let get = |k: &str| {
                pairs
                    .iter()
                    .find(|(key, _)| key == k)
                    .map(|(_, v)| v.as_str())
                    .ok_or_else(|| bad(format!("[{name}] block lacks {k}")))
            };
            let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
            match name.as_str() {
                "row" => report.rows.push(EvalRow {
                    dataset: get("dataset")?.parse()?,
                    attack: match get("attack")? {
                        "none" => None,
                        a => Some(a.parse()?),
                    },
                    defense: match get("defense")? {
                        "unsecured" => Defense::Unsecured,
                        "denoiser" => Defense::Denoiser,
                        d => return Err(bad(format!("unknown defense {d}"))),
                    },
                    correct: num("correct")? as usize,
                    samples: num("samples")? as usize,
                    epsilon: num("epsilon")? as f32,
                    kappa: num("kappa")? as f32,
                    iterations: num("iterations")? as u32,
                    seed: num("seed")? as u64,
                }),
                "config" => report.config = pairs.clone(),
                "hashes" => report.hashes = pairs.clone(),
                "timing" => report.wall_clock_seconds = num("wall_clock_seconds")?,
                other => return Err(bad(format!("unknown block [{other}]"))),
            }
        }
        Ok(report)
    }
}

/// Which attack's training-split corpus the denoiser learns from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserCorpus {
    Pgd,
    Fgsm,
    /// Both corpora, concatenated.
    Mixed,
}

impl DenoiserCorpus {
    pub fn name(self) -> &'static str {
        match self {
            DenoiserCorpus::Pgd => "pgd",
            DenoiserCorpus::Fgsm => "fgsm",
            DenoiserCorpus::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for DenoiserCorpus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(DenoiserCorpus::Pgd),
            "fgsm" => Ok(DenoiserCorpus::Fgsm),
            "mixed" => Ok(DenoiserCorpus::Mixed),
            other => Err(Error::Config(format!("unknown denoiser corpus {other:?}"))),
        }
    }
}

/// Everything that determines an experiment's results.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Stratified subsets (first K per class); `None` keeps the whole split.
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    /// Training images attacked to build the denoiser corpus.
    pub corpus_per_class: Option<usize>,
    pub classifier: TrainConfig,
    pub loss_net: TrainConfig,
    pub denoiser: TrainConfig,
    pub fgsm: AttackConfig,
    pub pgd: AttackConfig,
    pub denoiser_corpus: DenoiserCorpus,
    pub head: DecoderHead,
}

impl ExperimentConfig {
    /// Paper settings for the attacks and optimizer, with the given data
    /// and output locations.
    pub fn new(dataset: DatasetKind, data_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        let train = |epochs| TrainConfig {
            epochs,
            seed,
            ..Default::default()
        };
        ExperimentConfig {
            dataset,
            data_dir: data_dir.into(),
            out_dir: out_dir.into(),
            seed,
            train_per_class: None,
            test_per_class: None,
            corpus_per_class: None,
            classifier: train(10),
            loss_net: train(2),
            denoiser: train(100),
            fgsm: AttackConfig::standard(AttackKind::Fgsm).with_seed(seed),
            pgd: AttackConfig::standard(AttackKind::Pgd).with_seed(seed),
            denoiser_corpus: DenoiserCorpus::Pgd,
            head: DecoderHead::Atan,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.loss_net.validate()?;
        self.denoiser.validate()?;
        self.fgsm.validate()?;
        self.pgd.validate()?;
        if self.fgsm.kind != AttackKind::Fgsm || self.pgd.kind != AttackKind::Pgd {
            return Err(Error::Config("attack settings are swapped".into()));
        }
        for k in [self.train_per_class, self.test_per_class, self.corpus_per_class].into_iter().flatten() {
            if k == 0 {
                return Err(Error::Config("per-class subset sizes must be positive".into()));
            }
        }
        Ok(())
    }

    /// Settings that affect results, as ordered key/value pairs.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let opt = |v: Option<usize>| v.map_or("all".to_string(), |k| k.to_string());
        let train = |t: &TrainConfig| {
            format!(
                "epochs={} batch={} lr={} decay={} betas={}/{} eps={} seed={}",
                t.epochs,
                t.batch_size,
                t.adam.learning_rate,
                t.adam.weight_decay,
                t.adam.beta1,
                t.adam.beta2,
                t.adam.epsilon,
                t.seed
            )
        };
        let attack = |a: &AttackConfig| {
            format!(
                "epsilon={} kappa={} iterations={} targeted={} target={} random_start={} seed={}",
                a.epsilon,
                a.kappa,
                a.iterations,
                a.targeted,
                a.target_class.map_or("none".to_string(), |c| c.to_string()),
                a.random_start,
                a.seed
            )
        };
        vec![
            ("dataset".into(), self.dataset.name().into()),
            ("seed".into(), self.seed.to_string()),
            ("train_per_class".into(), opt(self.train_per_class)),
            ("test_per_class".into(), opt(self.test_per_class)),
            ("corpus_per_class".into(), opt(self.corpus_per_class)),
            ("classifier".into(), train(&self.classifier)),
            ("loss_net".into(), train(&self.loss_net)),
            ("denoiser".into(), train(&self.denoiser)),
            ("fgsm".into(), attack(&self.fgsm)),
            ("pgd".into(), attack(&self.pgd)),
            ("denoiser_corpus".into(), self.denoiser_corpus.name().into()),
            ("decoder_head".into(), format!("{:?}", self.head).to_lowercase()),
        ]
    }

    pub fn artifacts(&self) -> ArtifactPaths {
        ArtifactPaths::new(&self.out_dir, self.dataset)
    }
}

/// Files written by the pipeline stages, under `<out>/<dataset>/`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactPaths {
    pub dir: PathBuf,
}

impl ArtifactPaths {
    pub fn new(out_dir: &Path, dataset: DatasetKind) -> Self {
        ArtifactPaths {
            dir: out_dir.join(dataset.name()),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.txt")
    }
    pub fn classifier(&self) -> PathBuf {
        self.dir.join("classifier.flwt")
    }
    pub fn loss_net(&self) -> PathBuf {
        self.dir.join("lossnet.flwt")
    }
    pub fn denoiser(&self) -> PathBuf {
        self.dir.join("denoiser.flwt")
    }
    pub fn metrics(&self, model: &str) -> PathBuf {
        self.dir.join(format!("{model}.metrics.tsv"))
    }
    pub fn corpus(&self, split: Split, attack: AttackKind) -> PathBuf {
        self.dir.join(format!("corpus-{}-{}.flac", split.name(), attack.name()))
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.txt")
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Directory holding a dataset's files: `<root>/<dataset name>` when it
/// exists, else `root` itself.
pub fn dataset_dir(root: &Path, kind: DatasetKind) -> PathBuf {
    let sub = root.join(kind.name());
    if sub.is_dir() {
        sub
    } else {
        root.to_path_buf()
    }
}

/// Loads a split and applies the configured stratified subset.
pub fn load_split(kind: DatasetKind, root: &Path, split: Split, per_class: Option<usize>) -> Result<Dataset> {
    let d = data::load(kind, dataset_dir(root, kind), split)?;
    if !d.is_canonical_size() {
        log::warn!(
            "{} {} split has {} images (published split: {})",
            kind.name(),
            split.name(),
            d.len(),
            kind.canonical_len(split)
        );
    }
    match per_class {
        Some(k) => d.subsample_per_class(k),
        None => Ok(d),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Records the configuration of an output directory, refusing to mix
/// artifacts from different configurations.
pub fn prepare_output_dir(cfg: &ExperimentConfig) -> Result<()> {
    let paths = cfg.artifacts();
    fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    let manifest: String = cfg.pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let p = paths.manifest();
    if p.exists() {
        let existing = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        if existing != manifest {
            return Err(Error::Config(format!(
                "{} holds artifacts of a different configuration; use another output directory",
                paths.dir.display()
            )));
        }
        return Ok(());
    }
    write_text(&p, &manifest)
}

/// Trains a model unless its weight file already exists.
fn trained_model(
    path: &Path,
    metrics: &Path,
    build: impl FnOnce() -> Result<ModelGraph>,
    train: impl FnOnce(&mut ModelGraph) -> Result<History>,
) -> Result<ModelGraph> {
    let mut model = build()?;
    if path.exists() {
        log::info!("reusing {}", path.display());
        model.load_params(path)?;
        return Ok(model);
    }
    let history = train(&mut model)?;
    write_text(metrics, &history.to_tsv())?;
    save_weights(&model, path)?;
    Ok(model)
}

pub fn classifier_stage(cfg: &ExperimentConfig, train: &Dataset) -> Result<ModelGraph> {
    let p = cfg.artifacts();
    trained_model(
        &p.classifier(),
        &p.metrics("classifier"),
        || build_classifier(cfg.seed),
        |m| train_classifier(m, train, &cfg.classifier),
    )
}

pub fn loss_net_stage(cfg: &ExperimentConfig, train: &Dataset) -> Result<ModelGraph> {
    let p = cfg.artifacts();
    trained_model(
        &p.loss_net(),
        &p.metrics("lossnet"),
        || build_loss_network(cfg.seed.wrapping_add(1)),
        |m| train_loss_network(m, train, &cfg.loss_net),
    )
}

/// Generates (or reuses) the corpus of `attack` on `data`.
pub fn corpus_stage(cfg: &ExperimentConfig, classifier: &ModelGraph, data: &Dataset, attack: &AttackConfig) -> Result<AdversarialCorpus> {
    let path = cfg.artifacts().corpus(data.split, attack.kind);
    if path.exists() {
        log::info!("reusing {}", path.display());
        let c = read_corpus(&path)?;
        if c.header.attack != *attack || c.len() != data.len() {
            return Err(Error::Config(format!("{} was generated with other settings", path.display())));
        }
        return Ok(c);
    }
    generate_corpus(classifier, data, attack, &path)
}

/// Concatenates corpora for mixed training. The header of the first is kept
/// with the largest budget of the two.
pub fn merge_corpora(a: &AdversarialCorpus, b: &AdversarialCorpus) -> Result<AdversarialCorpus> {
    let (x, y) = (a.all(), b.all());
    let (Some(x), Some(y)) = (x, y) else {
        return Err(Error::InvalidArgument("cannot merge an empty corpus".into()));
    };
    let mut attack = a.header.attack;
    attack.epsilon = attack.epsilon.max(b.header.attack.epsilon);
    AdversarialCorpus::new(
        a.header.dataset,
        attack,
        Tensor::concat_batch(&[x.clean, y.clean])?,
        Tensor::concat_batch(&[x.adversarial, y.adversarial])?,
        [x.labels, y.labels].concat(),
    )
}

pub fn denoiser_stage(cfg: &ExperimentConfig, corpus: &AdversarialCorpus, loss_net: &ModelGraph) -> Result<ModelGraph> {
    let p = cfg.artifacts();
    let weights = FeatureLossWeights::standard(loss_net)?;
    trained_model(
        &p.denoiser(),
        &p.metrics("denoiser"),
        || build_autoencoder(cfg.seed.wrapping_add(2), cfg.head),
        |m| {
            let run = train_denoiser(m, corpus, loss_net, &weights, &cfg.denoiser)?;
            if run.loss_net_checksum_before != run.loss_net_checksum_after {
                return Err(Error::InvalidArgument("loss network changed during denoiser training".into()));
            }
            Ok(run.history)
        },
    )
}

/// Runs every stage, reusing artifacts already present in the output
/// directory, and writes the report.
pub fn run_experiment_matrix(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let started = Instant::now();
    stage("config", cfg.validate())?;
    stage("config", prepare_output_dir(cfg))?;
    let paths = cfg.artifacts();

    let train = stage("load-train", load_split(cfg.dataset, &cfg.data_dir, Split::Train, cfg.train_per_class))?;
    let test = stage("load-test", load_split(cfg.dataset, &cfg.data_dir, Split::Test, cfg.test_per_class))?;
    let classifier = stage("train-classifier", classifier_stage(cfg, &train))?;
    let loss_net = stage("train-lossnet", loss_net_stage(cfg, &train))?;

    let attack_source = match cfg.corpus_per_class {
        Some(k) => stage("load-train", train.subsample_per_class(k))?,
        None => train.clone(),
    };
    let denoise_corpus = stage("gen-attack", {
        let pgd = || corpus_stage(cfg, &classifier, &attack_source, &cfg.pgd);
        let fgsm = || corpus_stage(cfg, &classifier, &attack_source, &cfg.fgsm);
        match cfg.denoiser_corpus {
            DenoiserCorpus::Pgd => pgd(),
            DenoiserCorpus::Fgsm => fgsm(),
            DenoiserCorpus::Mixed => pgd().and_then(|a| merge_corpora(&a, &fgsm()?)),
        }
    })?;
    let denoiser = stage("train-denoiser", denoiser_stage(cfg, &denoise_corpus, &loss_net))?;
    drop(denoise_corpus);

    let fgsm_test = stage("gen-attack", corpus_stage(cfg, &classifier, &test, &cfg.fgsm))?;
    let pgd_test = stage("gen-attack", corpus_stage(cfg, &classifier, &test, &cfg.pgd))?;

    let labels = test.labels_usize();
    let mut rows = Vec::new();
    let mut push = |attack: Option<&AttackConfig>, defense: Defense, acc: Accuracy| {
        rows.push(EvalRow {
            dataset: cfg.dataset,
            attack: attack.map(|a| a.kind),
            defense,
            correct: acc.correct,
            samples: acc.total,
            epsilon: attack.map_or(0.0, |a| a.epsilon),
            kappa: attack.map_or(0.0, |a| if a.kind == AttackKind::Fgsm { a.epsilon } else { a.kappa }),
            iterations: attack.map_or(0, |a| a.iterations),
            seed: cfg.seed,
        })
    };
    for defense in [Defense::Unsecured, Defense::Denoiser] {
        let d = (defense == Defense::Denoiser).then_some(&denoiser);
        push(None, defense, stage("evaluate", evaluate(&classifier, &test.images, &labels, d))?);
        push(Some(&cfg.fgsm), defense, stage("evaluate", evaluate_corpus(&classifier, &fgsm_test, d))?);
        push(Some(&cfg.pgd), defense, stage("evaluate", evaluate_corpus(&classifier, &pgd_test, d))?);
    }
    // Clean, FGSM, PGD; unsecured before defended within each.
    rows.sort_by_key(|r| (r.attack.map_or(0, |a| a.id() + 1), r.defense == Defense::Denoiser));

    let mut hashes = vec![
        ("classifier_weights".to_string(), classifier.checksum()),
        ("loss_net_weights".to_string(), loss_net.checksum()),
        ("denoiser_weights".to_string(), denoiser.checksum()),
    ];
    for (split, attack) in [
        (Split::Test, AttackKind::Fgsm),
        (Split::Test, AttackKind::Pgd),
        (Split::Train, AttackKind::Fgsm),
        (Split::Train, AttackKind::Pgd),
    ] {
        let p = paths.corpus(split, attack);
        if p.exists() {
            hashes.push((
                format!("corpus_{}_{}", split.name(), attack.name()),
                stage("report", file_sha256(&p))?,
            ));
        }
    }
    let mut config = cfg.pairs();
    config.push(("train_images".into(), train.len().to_string()));
    config.push(("test_images".into(), test.len().to_string()));
    config.push(("corpus_images".into(), attack_source.len().to_string()));

    let report = EvalReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        rows,
        config,
        hashes,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    stage("report", write_text(&paths.report(), &report.render()))?;
    Ok(report)
}

/// Writes a binary portable graymap; values are clamped to [0, 1] and
/// rounded to 8 bits.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    write_pgm_bytes(path, width, height, pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

fn write_pgm_bytes(path: &Path, width: usize, height: usize, bytes: impl Iterator<Item = u8>) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend(bytes);
    if buf.len() != format!("P5\n{width} {height}\n255\n").len() + width * height {
        return Err(Error::Shape(format!("graymap {width}x{height} got the wrong number of pixels")));
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses a binary graymap written by [`write_pgm`]: `(width, height, bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Format(format!("{}: not a binary graymap", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    let (w, h): (usize, usize) = (fields[1].parse().map_err(|_| bad())?, fields[2].parse().map_err(|_| bad())?);
    if fields[0] != "P5" || fields[3] != "255" || bytes.len() != pos + 1 + w * h {
        return Err(bad());
    }
    Ok((w, h, bytes[pos + 1..].to_vec()))
}

/// Gap between panels of a triptych, in pixels.
const GAP: usize = 2;

/// Writes, for the first `count` records, a clean | adversarial | denoised
/// triptych and a perturbation image whose gray level is |adv − clean|
/// rounded down. With a loss network, also writes feature-map grids of the
/// clean and denoised images. Returns the written paths.
pub fn dump_samples(
    corpus: &AdversarialCorpus,
    denoiser: &ModelGraph,
    out_dir: &Path,
    count: usize,
    loss_net: Option<&ModelGraph>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n = count.min(corpus.len());
    if n == 0 {
        return Ok(Vec::new());
    }
    let b = corpus.slice(0, n)?;
    let denoised = denoiser.infer(&b.adversarial)?.clamp01();
    let side = IMAGE_SIDE;
    let width = 3 * side + 2 * GAP;
    let mut written = Vec::new();
    for i in 0..n {
        let mut canvas = vec![1.0f32; width * side];
        for (panel, img) in [b.clean.item(i), b.adversarial.item(i), denoised.item(i)].iter().enumerate() {
            for r in 0..side {
                let at = r * width + panel * (side + GAP);
                canvas[at..at + side].copy_from_slice(&img[r * side..(r + 1) * side]);
            }
        }
        let p = out_dir.join(format!("sample-{i:04}-label{}.pgm", b.labels[i]));
        write_pgm(&p, width, side, &canvas)?;
        written.push(p);

        let delta = b
            .clean
            .item(i)
            .iter()
            .zip(b.adversarial.item(i))
            .map(|(&c, &a)| ((a as f64 - c as f64).abs() * 255.0).floor() as u8);
        let p = out_dir.join(format!("delta-{i:04}.pgm"));
        write_pgm_bytes(&p, side, side, delta)?;
        written.push(p);
    }
    if let Some(net) = loss_net {
        let w = FeatureLossWeights::standard(net)?;
        for (tag, images) in [("clean", &b.clean), ("denoised", &denoised)] {
            let feats = feature_targets(net, &w, &images.slice_batch(0, 1)?)?;
            for (tw, t) in w.taps.iter().zip(&feats.taps) {
                let p = out_dir.join(format!("features-{tag}-{}.pgm", tw.tap));
                write_feature_grid(&p, t)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// Tiles up to 64 channels of a `[1, C, H, W]` activation, each normalized
/// to its own range.
fn write_feature_grid(path: &Path, t: &Tensor) -> Result<()> {
    let [_, c, h, w] = t.dims4()?;
    let c = c.min(64);
    let cols = 8usize;
    let rows = c.div_ceil(cols);
    let (cw, ch) = (w + 1, h + 1);
    let (gw, gh) = (cols * cw, rows * ch);
    let mut grid = vec![0.0f32; gw * gh];
    for k in 0..c {
        let map = &t.data()[k * h * w..(k + 1) * h * w];
        let lo = map.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = map.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (r0, c0) = ((k / cols) * ch, (k % cols) * cw);
        for y in 0..h {
            for x in 0..w {
                grid[(r0 + y) * gw + c0 + x] = (map[y * w + x] - lo) / span;
            }
        }
    }
    write_pgm(path, gw, gh, &grid)
}
