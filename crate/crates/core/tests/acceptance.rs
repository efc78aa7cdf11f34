//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//!
//! The MNIST criteria train the full pipeline from scratch three times (one
//! desk-scale run, then a smaller run repeated for determinism), which takes
//! about 35 minutes on one core. Data comes from `$FEATLOSS_DATA` or `<workspace>/data`.
//! A criterion whose input data is absent prints `FAIL (blocked: ...)` and
//! does not fail the run unless `FEATLOSS_STRICT` is set; any criterion that
//! ran and missed its threshold fails the run.

mod common;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::gradcheck::{self, REL_TOL};
use featloss_core::attacks::{input_gradient, pgd, AttackConfig};
use featloss_core::corpus::{read_corpus, HEADER_BYTES};
use featloss_core::data::{self, Split};
use featloss_core::eval::{
    dump_samples, load_split, read_pgm, run_experiment_matrix, Defense, EvalReport, ExperimentConfig,
};
use featloss_core::models::{
    build_autoencoder, build_classifier, build_loss_network, load_weights, DecoderHead, LayerSpec, ModelGraph,
    ENCODER_END,
};
use featloss_core::trainer::{mean_feature_loss, train_denoiser, FeatureLossWeights, History, TrainConfig};
use featloss_core::{AttackKind, DatasetKind};

const EPSILON: f32 = 0.2;

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

use Outcome::{Blocked, Fail, Pass};

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

struct Tally {
    failed: usize,
    blocked: usize,
}

impl Tally {
    fn report(&mut self, label: &str, outcome: Outcome) {
        match outcome {
            Pass(d) => println!("{label}: PASS ({d})"),
            Fail(d) => {
                self.failed += 1;
                println!("{label}: FAIL ({d})");
            }
            Blocked(d) => {
                self.blocked += 1;
                println!("{label}: FAIL (blocked: {d})");
            }
        }
    }
}

fn data_root() -> PathBuf {
    std::env::var_os("FEATLOSS_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
            p.canonicalize().unwrap_or(p)
        })
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&p);
    p
}

/// Desk-scale configuration for the accuracy criteria.
fn desk_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(DatasetKind::Mnist, data_root(), out, 0);
    cfg.corpus_per_class = Some(300);
    cfg.denoiser.epochs = 100;
    cfg
}

/// Every stage and all six rows, with a smaller denoiser corpus and budget,
/// run twice for the determinism criterion.
fn repeat_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(DatasetKind::Mnist, data_root(), out, 7);
    cfg.corpus_per_class = Some(100);
    cfg.denoiser.epochs = 20;
    cfg
}

/// Weight files carry no tap points, so the loss network is rebuilt first.
fn load_loss_net(path: &Path) -> ModelGraph {
    let mut net = build_loss_network(0).unwrap();
    net.load_params(path).unwrap();
    net
}

fn mnist_present() -> bool {
    let dir = featloss_core::eval::dataset_dir(&data_root(), DatasetKind::Mnist);
    [Split::Train, Split::Test].iter().all(|&s| {
        let (img, lab) = data::mnist_file_names(s);
        [img, lab]
            .iter()
            .all(|f| dir.join(f).exists() || dir.join(format!("{f}.gz")).exists())
    })
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let results = gradcheck::run_all(20);
    let secs = t.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let bad: Vec<&str> = results.iter().filter(|r| r.1 > REL_TOL).map(|r| r.0).collect();
    check(
        bad.is_empty() && secs < 60.0,
        format!(
            "{} primitives x 20 trials, worst relative error {worst:.2e} (tol {REL_TOL:e}), {secs:.1}s{}",
            results.len(),
            if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(",")) }
        ),
    )
}

fn spatial(shape: &[usize]) -> usize {
    shape[shape.len() - 1]
}

fn criterion_2() -> Outcome {
    let ae = build_autoencoder(0, DecoderHead::Atan).unwrap();
    let shapes = ae.layer_shapes();
    let mut encoder = vec![28];
    let mut decoder = vec![spatial(&shapes[ENCODER_END])];
    for (i, s) in shapes.iter().enumerate() {
        let side = spatial(s);
        let chain = if i <= ENCODER_END { &mut encoder } else { &mut decoder };
        if chain.last() != Some(&side) {
            chain.push(side);
        }
    }
    let classifier = build_classifier(0).unwrap();
    let flatten = classifier
        .layers()
        .iter()
        .zip(classifier.layer_shapes())
        .find(|(l, _)| matches!(l, LayerSpec::Flatten))
        .map(|(_, s)| s[0]);
    let code = &shapes[ENCODER_END];
    check(
        encoder == [28, 10, 5, 3, 2] && decoder == [2, 5, 15, 28] && flatten == Some(800) && code == &[8, 2, 2],
        format!("encoder {encoder:?}, decoder {decoder:?}, code {code:?}, flatten width {flatten:?}"),
    )
}

fn criterion_3() -> Outcome {
    let net = build_loss_network(0).unwrap();
    let w = FeatureLossWeights::standard(&net).unwrap();
    // Values as printed, with the unit of their last printed digit.
    let printed = [(0.00048, 1e-5), (0.00024, 1e-5), (0.00012, 1e-5), (0.0013, 1e-4)];
    let exact = [1.0 / 2048.0, 1.0 / 4096.0, 1.0 / 8192.0, 1.0 / 784.0];
    let mut got: Vec<f64> = ["deep", "middle", "shallow"]
        .iter()
        .map(|t| w.coefficient(t).unwrap_or(f64::NAN))
        .collect();
    got.push(w.pixel);
    let exact_ok = got.iter().zip(exact).all(|(g, e)| *g == e);
    let printed_ok = got.iter().zip(printed).all(|(g, (p, unit))| (g - p).abs() < unit);
    check(
        exact_ok && printed_ok,
        format!(
            "coefficients {:?}, exact reciprocals: {exact_ok}, within one printed digit of 0.00048/0.00024/0.00012/0.0013: {printed_ok}",
            got
        ),
    )
}

/// Reads a corpus file without the library reader and returns
/// (records, worst |adv - clean|, pixels outside [0, 1], records over budget).
fn raw_budget(path: &Path, epsilon: f32) -> (usize, f64, usize, usize) {
    let bytes = fs::read(path).unwrap();
    let rec = 784 * 8 + 1;
    let body = &bytes[HEADER_BYTES..];
    assert_eq!(body.len() % rec, 0, "{}: ragged corpus", path.display());
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let (mut worst, mut outside, mut over) = (0.0f64, 0usize, 0usize);
    for r in body.chunks_exact(rec) {
        let mut rec_worst = 0.0f64;
        for k in 0..784 {
            let c = f(&r[4 * k..]);
            let a = f(&r[4 * (784 + k)..]);
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&c) {
                outside += 1;
            }
            rec_worst = rec_worst.max((a as f64 - c as f64).abs());
        }
        if rec_worst > epsilon as f64 {
            over += 1;
        }
        worst = worst.max(rec_worst);
    }
    (body.len() / rec, worst, outside, over)
}

fn criterion_4(cfg: &ExperimentConfig) -> Outcome {
    let paths = cfg.artifacts();
    let mut detail = String::new();
    let mut ok = true;
    for (kind, want_iters) in [(AttackKind::Fgsm, 1), (AttackKind::Pgd, 100)] {
        let p = paths.corpus(Split::Test, kind);
        let header = read_corpus(&p).unwrap().header;
        let (n, worst, outside, over) = raw_budget(&p, EPSILON);
        let a = header.attack;
        let settings = a.epsilon == EPSILON && a.iterations == want_iters && (kind == AttackKind::Fgsm || a.kappa == 0.1);
        ok &= n >= 1000 && worst <= EPSILON as f64 && outside == 0 && over == 0 && settings;
        let _ = write!(
            detail,
            "{}{}: {n} samples, max Linf {worst:.6}, {over} violations, {outside} pixels outside [0,1]",
            if detail.is_empty() { "" } else { "; " },
            kind.name()
        );
    }
    check(ok, detail)
}

fn criterion_5(report: &EvalReport, minutes: f64) -> Outcome {
    let acc = |a, d| report.row(a, d).unwrap().accuracy();
    let clean = acc(None, Defense::Unsecured);
    let fgsm = acc(Some(AttackKind::Fgsm), Defense::Unsecured);
    let pgd = acc(Some(AttackKind::Pgd), Defense::Unsecured);
    check(
        clean >= 98.0 && fgsm < 40.0 && pgd < 25.0 && minutes <= 30.0,
        format!("clean {clean:.1}% (need >= 98), FGSM {fgsm:.1}% (need < 40), PGD {pgd:.1}% (need < 25), pipeline {minutes:.1} min"),
    )
}

fn criterion_6(report: &EvalReport, denoiser_epochs: usize) -> Outcome {
    let acc = |a, d| report.row(Some(a), d).unwrap().accuracy();
    let (fu, fd) = (acc(AttackKind::Fgsm, Defense::Unsecured), acc(AttackKind::Fgsm, Defense::Denoiser));
    let (pu, pd) = (acc(AttackKind::Pgd, Defense::Unsecured), acc(AttackKind::Pgd, Defense::Denoiser));
    check(
        denoiser_epochs >= 20 && pd >= 60.0 && fd >= 70.0 && pd - pu >= 40.0 && fd - fu >= 40.0,
        format!(
            "defended PGD {pd:.1}% (+{:.1} over unsecured; need >= 60, +40), defended FGSM {fd:.1}% (+{:.1}; need >= 70, +40), {denoiser_epochs} denoiser epochs",
            pd - pu,
            fd - fu
        ),
    )
}

fn criterion_7(report: &EvalReport) -> Outcome {
    let u = report.row(None, Defense::Unsecured).unwrap().accuracy();
    let d = report.row(None, Defense::Denoiser).unwrap().accuracy();
    check(
        (u - d).abs() <= 5.0,
        format!("clean unsecured {u:.1}%, clean through denoiser {d:.1}%, gap {:.1} points (need <= 5)", u - d),
    )
}

fn criterion_8() -> Outcome {
    let root = data_root();
    let dir = featloss_core::eval::dataset_dir(&root, DatasetKind::Cifar10);
    let present = data::load(DatasetKind::Cifar10, &dir, Split::Test).is_ok();
    if !present {
        return Blocked(format!(
            "no CIFAR-10 binary batches under {}; the pipeline is exercised on a synthetic CIFAR-format fixture in tests/pipeline.rs",
            dir.display()
        ));
    }
    let out = scratch("cifar");
    let mut cfg = ExperimentConfig::new(DatasetKind::Cifar10, &root, &out, 0);
    cfg.train_per_class = Some(1000);
    cfg.test_per_class = Some(100);
    cfg.corpus_per_class = Some(300);
    cfg.denoiser.epochs = 100;
    match run_experiment_matrix(&cfg) {
        Err(e) => Fail(format!("matrix failed: {e}")),
        Ok(r) => {
            let u = r.row(Some(AttackKind::Pgd), Defense::Unsecured).unwrap().accuracy();
            let d = r.row(Some(AttackKind::Pgd), Defense::Denoiser).unwrap().accuracy();
            check(d - u >= 10.0, format!("PGD unsecured {u:.1}%, defended {d:.1}%, gap {:.1} (need >= 10)", d - u))
        }
    }
}

fn criterion_9(a: &ExperimentConfig, ra: &EvalReport, b: &ExperimentConfig, rb: &EvalReport) -> Outcome {
    let same_report = ra.render_deterministic() == rb.render_deterministic();
    let (pa, pb) = (a.artifacts(), b.artifacts());
    let mut files = vec![pa.classifier(), pa.loss_net(), pa.denoiser()];
    for (s, k) in [(Split::Train, AttackKind::Pgd), (Split::Test, AttackKind::Fgsm), (Split::Test, AttackKind::Pgd)] {
        files.push(pa.corpus(s, k));
    }
    let mut differing = Vec::new();
    for f in &files {
        let other = pb.classifier().with_file_name(f.file_name().unwrap());
        if fs::read(f).unwrap() != fs::read(&other).unwrap() {
            differing.push(f.file_name().unwrap().to_string_lossy().to_string());
        }
    }
    let checksums: Vec<bool> = [
        (pa.classifier(), pb.classifier()),
        (pa.loss_net(), pb.loss_net()),
        (pa.denoiser(), pb.denoiser()),
    ]
    .iter()
    .map(|(x, y)| load_weights(x).unwrap().checksum() == load_weights(y).unwrap().checksum())
    .collect();
    check(
        same_report && differing.is_empty() && checksums.iter().all(|&c| c),
        format!(
            "reports identical: {same_report}, {} artifact files compared, differing: {:?}, weight checksums equal: {checksums:?}",
            files.len(),
            differing
        ),
    )
}

fn criterion_10(cfg: &ExperimentConfig) -> Outcome {
    let paths = cfg.artifacts();
    let classifier = load_weights(paths.classifier()).unwrap();
    let loss_net = load_loss_net(&paths.loss_net());
    let corpus = read_corpus(paths.corpus(Split::Test, AttackKind::Pgd)).unwrap().head(256);
    let before = (classifier.checksum(), loss_net.checksum());
    let w = FeatureLossWeights::standard(&loss_net).unwrap();
    let mut ae = build_autoencoder(5, DecoderHead::Atan).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let run = train_denoiser(&mut ae, &corpus, &loss_net, &w, &tc).unwrap();
    let after = (classifier.checksum(), loss_net.checksum());
    check(
        before == after && run.loss_net_checksum_before == run.loss_net_checksum_after,
        format!("classifier {} -> {}, loss network {} -> {}", &before.0[..12], &after.0[..12], &before.1[..12], &after.1[..12]),
    )
}

/// Supporting properties measured on the trained run.
fn supporting(cfg: &ExperimentConfig, tally: &mut Tally) {
    let paths = cfg.artifacts();
    let classifier = load_weights(paths.classifier()).unwrap();
    let loss_net = load_loss_net(&paths.loss_net());
    let denoiser = load_weights(paths.denoiser()).unwrap();
    let history = |m: &str| History::from_tsv(&fs::read_to_string(paths.metrics(m)).unwrap()).unwrap().losses("train");

    let l = history("classifier");
    tally.report(
        "check classifier loss strictly decreases over the first 3 epochs",
        check(l[0] > l[1] && l[1] > l[2], format!("{:.4} {:.4} {:.4}", l[0], l[1], l[2])),
    );
    let l = history("denoiser");
    tally.report(
        "check denoiser objective non-increasing over the first 5 epochs",
        check(l[..5].windows(2).all(|p| p[1] <= p[0]), format!("{:?}", &l[..5])),
    );

    let test_pgd = read_corpus(paths.corpus(Split::Test, AttackKind::Pgd)).unwrap();
    let identity = mean_feature_loss(&test_pgd, None, &loss_net, &FeatureLossWeights::standard(&loss_net).unwrap()).unwrap();
    let denoised = mean_feature_loss(&test_pgd, Some(&denoiser), &loss_net, &FeatureLossWeights::standard(&loss_net).unwrap()).unwrap();
    tally.report(
        "check denoiser beats the identity map on the held-out PGD corpus",
        check(denoised < identity, format!("feature loss {denoised:.4} vs identity {identity:.4}")),
    );

    let train_pgd = read_corpus(paths.corpus(Split::Train, AttackKind::Pgd)).unwrap();
    let u = featloss_core::eval::evaluate_corpus(&classifier, &train_pgd, None).unwrap();
    let d = featloss_core::eval::evaluate_corpus(&classifier, &train_pgd, Some(&denoiser)).unwrap();
    tally.report(
        "check defense beats unsecured on its own training corpus",
        check(d.correct > u.correct, format!("{:.1}% vs {:.1}%", d.percent(), u.percent())),
    );

    let test = load_split(DatasetKind::Mnist, &cfg.data_dir, Split::Test, Some(26)).unwrap();
    let (x, y) = (test.images.slice_batch(0, 256).unwrap(), &test.labels_usize()[..256]);
    let means: Vec<f64> = (1..=10)
        .map(|k| {
            let adv = pgd(&classifier, &x, y, &AttackConfig::pgd(EPSILON, 0.1, k)).unwrap();
            input_gradient(&classifier, &adv, y).unwrap().1
        })
        .collect();
    tally.report(
        "check PGD mean loss non-decreasing for k = 1..10 over 256 samples",
        check(
            means.windows(2).all(|p| p[1] >= p[0] * (1.0 - 1e-6)),
            means.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" "),
        ),
    );

    let full_test = load_split(DatasetKind::Mnist, &cfg.data_dir, Split::Test, None).unwrap();
    let hist = full_test.class_histogram();
    let outcome = if full_test.is_canonical_size() {
        check(hist.iter().all(|&c| (892..=1135).contains(&c)), format!("{hist:?}"))
    } else {
        Blocked(format!("test split has {} images, not the published 10,000; histogram {hist:?}", full_test.len()))
    };
    tally.report("check MNIST test class histogram within [892, 1135]", outcome);

    let dest = scratch("samples");
    let written = dump_samples(&test_pgd, &denoiser, &dest, 10, Some(&loss_net)).unwrap();
    let triptychs: Vec<&PathBuf> = written
        .iter()
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("sample-"))
        .collect();
    let mut valid = true;
    for p in &triptychs {
        let (w, h, px) = read_pgm(p).unwrap();
        valid &= w == 3 * 28 + 4 && h == 28 && px.len() == w * h;
    }
    let delta_max = written
        .iter()
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("delta-"))
        .map(|p| read_pgm(p).unwrap().2.into_iter().max().unwrap_or(0))
        .max()
        .unwrap_or(0);
    tally.report(
        "check dump_samples writes 10 valid triptychs with perturbation <= epsilon",
        check(
            triptychs.len() == 10 && valid && delta_max as f64 <= 255.0 * EPSILON as f64,
            format!("{} triptychs, max perturbation level {delta_max}/255", triptychs.len()),
        ),
    );
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut tally = Tally { failed: 0, blocked: 0 };
    tally.report("criterion 1 gradient correctness", criterion_1());
    tally.report("criterion 2 shape fidelity", criterion_2());
    tally.report("criterion 3 coefficient rule", criterion_3());

    if mnist_present() {
        let cfg_a = desk_config(&scratch("run-a"));
        let t = Instant::now();
        let report_a = run_experiment_matrix(&cfg_a).expect("MNIST matrix, first run");
        let minutes = t.elapsed().as_secs_f64() / 60.0;
        print!("{}", report_a.render());
        tally.report("criterion 4 attack budget", criterion_4(&cfg_a));
        tally.report("criterion 5 attack potency", criterion_5(&report_a, minutes));
        tally.report("criterion 6 defense effect", criterion_6(&report_a, cfg_a.denoiser.epochs));
        tally.report("criterion 7 clean accuracy preserved", criterion_7(&report_a));
        tally.report("criterion 8 CIFAR-10 pipeline", criterion_8());
        let cfg_b = repeat_config(&scratch("run-b"));
        let report_b = run_experiment_matrix(&cfg_b).expect("MNIST matrix, repeat 1");
        let cfg_c = repeat_config(&scratch("run-c"));
        let report_c = run_experiment_matrix(&cfg_c).expect("MNIST matrix, repeat 2");
        tally.report("criterion 9 determinism", criterion_9(&cfg_b, &report_b, &cfg_c, &report_c));
        tally.report("criterion 10 frozen networks", criterion_10(&cfg_a));
        supporting(&cfg_a, &mut tally);
    } else {
        let why = format!("MNIST files not found under {}", data_root().display());
        for c in [
            "criterion 4 attack budget",
            "criterion 5 attack potency",
            "criterion 6 defense effect",
            "criterion 7 clean accuracy preserved",
        ] {
            tally.report(c, Blocked(why.clone()));
        }
        tally.report("criterion 8 CIFAR-10 pipeline", criterion_8());
        for c in ["criterion 9 determinism", "criterion 10 frozen networks"] {
            tally.report(c, Blocked(why.clone()));
        }
    }

    let strict = std::env::var_os("FEATLOSS_STRICT").is_some();
    println!(
        "acceptance: {} failed, {} blocked by missing data{}",
        tally.failed,
        tally.blocked,
        if strict { " (strict)" } else { "" }
    );
    if tally.failed > 0 || (strict && tally.blocked > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
