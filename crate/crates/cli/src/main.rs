use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use featloss_core::attacks::{AttackConfig, AttackKind};
use featloss_core::corpus::read_corpus;
use featloss_core::data::{self, DatasetKind, Split};
use featloss_core::eval::{
    classifier_stage, corpus_stage, denoiser_stage, dump_samples, evaluate, evaluate_corpus, load_split,
    loss_net_stage, merge_corpora, prepare_output_dir, run_experiment_matrix, DenoiserCorpus, ExperimentConfig,
};
use featloss_core::models::{build_autoencoder, build_classifier, build_loss_network, DecoderHead};
use featloss_core::{Error, ErrorClass};

#[derive(Parser, Debug)]
#[command(name = "featloss", version, about = "FGSM/PGD attacks and a feature-loss denoising defense")]
struct Cli {
    /// Worker threads for attacks and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log progress at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the target classifier on the clean training split.
    TrainClassifier(Pipeline),
    /// Pretrain the loss network that supplies feature taps.
    TrainLossnet(Pipeline),
    /// Attack a split with the trained classifier and store the corpus.
    GenAttack {
        #[command(flatten)]
        pipeline: Pipeline,
        #[arg(long, value_enum, default_value_t = AttackArg::Pgd)]
        attack: AttackArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Train the denoising autoencoder on the training-split corpus.
    TrainDenoiser(Pipeline),
    /// Print classifier accuracy on clean or attacked test images.
    Evaluate {
        #[command(flatten)]
        pipeline: Pipeline,
        #[arg(long, value_enum, default_value_t = EvalAttack::None)]
        attack: EvalAttack,
        /// Put the trained denoiser in front of the classifier.
        #[arg(long)]
        defended: bool,
    },
    /// Write clean/adversarial/denoised triptychs as graymaps.
    DumpSamples {
        #[command(flatten)]
        pipeline: Pipeline,
        #[arg(long, value_enum, default_value_t = AttackArg::Pgd)]
        attack: AttackArg,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Also write loss-network feature-map grids.
        #[arg(long)]
        features: bool,
        /// Destination (default: <out-dir>/<dataset>/samples).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Run (or resume) the full attack × defense matrix and write the report.
    Report(Pipeline),
    /// List the files each dataset needs, their checksums, and what is present.
    DataInfo {
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct Pipeline {
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = DatasetArg::Mnist)]
    dataset: DatasetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// L∞ budget of both attacks.
    #[arg(long, default_value_t = AttackConfig::DEFAULT_EPSILON)]
    epsilon: f32,
    /// PGD step size.
    #[arg(long, default_value_t = AttackConfig::DEFAULT_KAPPA)]
    kappa: f32,
    /// PGD iterations.
    #[arg(long, default_value_t = AttackConfig::DEFAULT_ITERATIONS)]
    iters: u32,
    /// Start PGD at the clean image instead of a random point in the ball.
    #[arg(long)]
    no_random_start: bool,
    /// Run targeted attacks toward this class.
    #[arg(long)]
    target_class: Option<u8>,
    /// Train on the first K images of each class.
    #[arg(long)]
    subset_per_class: Option<usize>,
    /// Evaluate on the first K test images of each class.
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Attack the first K training images of each class for the denoiser.
    #[arg(long)]
    corpus_per_class: Option<usize>,
    #[arg(long, default_value_t = 10)]
    classifier_epochs: usize,
    #[arg(long, default_value_t = 2)]
    lossnet_epochs: usize,
    #[arg(long, default_value_t = 100)]
    denoiser_epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, value_enum, default_value_t = CorpusArg::Pgd)]
    denoiser_corpus: CorpusArg,
    #[arg(long, value_enum, default_value_t = HeadArg::Atan)]
    head: HeadArg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DatasetArg {
    Mnist,
    Cifar10,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AttackArg {
    Fgsm,
    Pgd,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EvalAttack {
    None,
    Fgsm,
    Pgd,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Train,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CorpusArg {
    Pgd,
    Fgsm,
    Mixed,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum HeadArg {
    Atan,
    Sigmoid,
}

impl From<AttackArg> for AttackKind {
    fn from(a: AttackArg) -> Self {
        match a {
            AttackArg::Fgsm => AttackKind::Fgsm,
            AttackArg::Pgd => AttackKind::Pgd,
        }
    }
}

impl Pipeline {
    fn config(&self) -> ExperimentConfig {
        let dataset = match self.dataset {
            DatasetArg::Mnist => DatasetKind::Mnist,
            DatasetArg::Cifar10 => DatasetKind::Cifar10,
        };
        let mut cfg = ExperimentConfig::new(dataset, &self.data_dir, &self.out_dir, self.seed);
        cfg.train_per_class = self.subset_per_class;
        cfg.test_per_class = self.test_per_class;
        cfg.corpus_per_class = self.corpus_per_class;
        for (t, epochs) in [
            (&mut cfg.classifier, self.classifier_epochs),
            (&mut cfg.loss_net, self.lossnet_epochs),
            (&mut cfg.denoiser, self.denoiser_epochs),
        ] {
            t.epochs = epochs;
            t.batch_size = self.batch_size;
            t.adam.learning_rate = self.learning_rate;
            t.adam.weight_decay = self.weight_decay;
        }
        cfg.fgsm.epsilon = self.epsilon;
        cfg.fgsm.kappa = self.epsilon;
        cfg.pgd.epsilon = self.epsilon;
        cfg.pgd.kappa = self.kappa;
        cfg.pgd.iterations = self.iters;
        cfg.pgd.random_start = !self.no_random_start;
        if let Some(c) = self.target_class {
            cfg.fgsm = cfg.fgsm.with_target(c);
            cfg.pgd = cfg.pgd.with_target(c);
        }
        cfg.denoiser_corpus = match self.denoiser_corpus {
            CorpusArg::Pgd => DenoiserCorpus::Pgd,
            CorpusArg::Fgsm => DenoiserCorpus::Fgsm,
            CorpusArg::Mixed => DenoiserCorpus::Mixed,
        };
        cfg.head = match self.head {
            HeadArg::Atan => DecoderHead::Atan,
            HeadArg::Sigmoid => DecoderHead::Sigmoid,
        };
        cfg
    }
}

/// Validates the configuration and claims the output directory.
fn prepare(p: &Pipeline) -> Result<ExperimentConfig, Error> {
    let cfg = p.config();
    cfg.validate()?;
    prepare_output_dir(&cfg)?;
    Ok(cfg)
}

fn attack_cfg(cfg: &ExperimentConfig, kind: AttackKind) -> AttackConfig {
    match kind {
        AttackKind::Fgsm => cfg.fgsm,
        AttackKind::Pgd => cfg.pgd,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainClassifier(p) => {
            let cfg = prepare(&p)?;
            let train = load_split(cfg.dataset, &cfg.data_dir, Split::Train, cfg.train_per_class)?;
            let m = classifier_stage(&cfg, &train)?;
            println!("classifier {} ({})", cfg.artifacts().classifier().display(), m.checksum());
        }
        Command::TrainLossnet(p) => {
            let cfg = prepare(&p)?;
            let train = load_split(cfg.dataset, &cfg.data_dir, Split::Train, cfg.train_per_class)?;
            let m = loss_net_stage(&cfg, &train)?;
            println!("loss network {} ({})", cfg.artifacts().loss_net().display(), m.checksum());
        }
        Command::GenAttack { pipeline, attack, split } => {
            let cfg = prepare(&pipeline)?;
            let classifier = load_classifier(&cfg)?;
            let (split, per_class) = match split {
                SplitArg::Train => (Split::Train, cfg.corpus_per_class.or(cfg.train_per_class)),
                SplitArg::Test => (Split::Test, cfg.test_per_class),
            };
            let data = load_split(cfg.dataset, &cfg.data_dir, split, per_class)?;
            let kind = AttackKind::from(attack);
            let c = corpus_stage(&cfg, &classifier, &data, &attack_cfg(&cfg, kind))?;
            println!("{} records in {}", c.len(), cfg.artifacts().corpus(split, kind).display());
        }
        Command::TrainDenoiser(p) => {
            let cfg = prepare(&p)?;
            let loss_net = build_loss_network(0).and_then(|mut m| {
                m.load_params(cfg.artifacts().loss_net())?;
                Ok(m)
            })?;
            let corpus = match cfg.denoiser_corpus {
                DenoiserCorpus::Fgsm => read_corpus(cfg.artifacts().corpus(Split::Train, AttackKind::Fgsm))?,
                DenoiserCorpus::Pgd => read_corpus(cfg.artifacts().corpus(Split::Train, AttackKind::Pgd))?,
                DenoiserCorpus::Mixed => merge_corpora(
                    &read_corpus(cfg.artifacts().corpus(Split::Train, AttackKind::Pgd))?,
                    &read_corpus(cfg.artifacts().corpus(Split::Train, AttackKind::Fgsm))?,
                )?,
            };
            let m = denoiser_stage(&cfg, &corpus, &loss_net)?;
            println!("denoiser {} ({})", cfg.artifacts().denoiser().display(), m.checksum());
        }
        Command::Evaluate {
            pipeline,
            attack,
            defended,
        } => {
            let cfg = prepare(&pipeline)?;
            let classifier = load_classifier(&cfg)?;
            let denoiser = if defended { Some(load_denoiser(&cfg)?) } else { None };
            let acc = match attack {
                EvalAttack::None => {
                    let test = load_split(cfg.dataset, &cfg.data_dir, Split::Test, cfg.test_per_class)?;
                    evaluate(&classifier, &test.images, &test.labels_usize(), denoiser.as_ref())?
                }
                EvalAttack::Fgsm | EvalAttack::Pgd => {
                    let kind = if matches!(attack, EvalAttack::Fgsm) {
                        AttackKind::Fgsm
                    } else {
                        AttackKind::Pgd
                    };
                    let corpus = read_corpus(cfg.artifacts().corpus(Split::Test, kind))?;
                    evaluate_corpus(&classifier, &corpus, denoiser.as_ref())?
                }
            };
            println!(
                "accuracy {:.1}% ({}/{}) attack={:?} defense={}",
                acc.percent(),
                acc.correct,
                acc.total,
                attack,
                if defended { "denoiser" } else { "unsecured" }
            );
        }
        Command::DumpSamples {
            pipeline,
            attack,
            count,
            features,
            dest,
        } => {
            let cfg = prepare(&pipeline)?;
            let corpus = read_corpus(cfg.artifacts().corpus(Split::Test, attack.into()))?;
            let denoiser = load_denoiser(&cfg)?;
            let loss_net = if features {
                let mut m = build_loss_network(0)?;
                m.load_params(cfg.artifacts().loss_net())?;
                Some(m)
            } else {
                None
            };
            let dest = dest.unwrap_or_else(|| cfg.artifacts().dir.join("samples"));
            let files = dump_samples(&corpus, &denoiser, &dest, count, loss_net.as_ref())?;
            println!("wrote {} files to {}", files.len(), dest.display());
        }
        Command::Report(p) => {
            let cfg = p.config();
            let report = run_experiment_matrix(&cfg)?;
            print!("{}", report.render());
            println!("\nreport written to {}", cfg.artifacts().report().display());
        }
        Command::DataInfo { data_dir } => data_info(&data_dir),
    }
    Ok(())
}

fn load_classifier(cfg: &ExperimentConfig) -> Result<featloss_core::models::ModelGraph, Error> {
    let mut m = build_classifier(0)?;
    m.load_params(cfg.artifacts().classifier())?;
    Ok(m)
}

fn load_denoiser(cfg: &ExperimentConfig) -> Result<featloss_core::models::ModelGraph, Error> {
    let mut m = build_autoencoder(0, cfg.head)?;
    m.load_params(cfg.artifacts().denoiser())?;
    Ok(m)
}

fn data_info(dir: &std::path::Path) {
    println!("data directory: {}", dir.display());
    println!("nothing is downloaded; place the files below by hand.\n");
    for kind in [DatasetKind::Mnist, DatasetKind::Cifar10] {
        let sub = dir.join(kind.name());
        println!("{} -> {}", kind.name(), sub.display());
        for (name, md5) in data::expected_files(kind) {
            println!("  archive {name}  md5 {md5}");
        }
        let needed: Vec<String> = match kind {
            DatasetKind::Mnist => [Split::Train, Split::Test]
                .iter()
                .flat_map(|&s| {
                    let (a, b) = data::mnist_file_names(s);
                    [a.to_string(), b.to_string()]
                })
                .collect(),
            DatasetKind::Cifar10 => [Split::Train, Split::Test]
                .iter()
                .flat_map(|&s| data::cifar_file_names(s))
                .map(|f| format!("cifar-10-batches-bin/{f}"))
                .collect(),
        };
        for f in needed {
            let base = f.rsplit('/').next().unwrap_or(&f);
            let present = [sub.join(&f), sub.join(format!("{f}.gz")), sub.join(base)]
                .iter()
                .any(|p| p.exists());
            println!("  {:<8} {f}", if present { "present" } else { "missing" });
        }
        println!();
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Internal => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
