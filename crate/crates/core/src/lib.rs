//! Adversarial attacks (FGSM, PGD) against a small CNN and a denoising
//! autoencoder defense trained with feature losses from a frozen loss
//! network, on a self-contained reverse-mode autodiff engine.

pub mod attacks;
pub mod autograd;
pub mod corpus;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use attacks::{AttackConfig, AttackKind};
pub use autograd::{Tape, Var};
pub use corpus::{AdversarialCorpus, CorpusBatch};
pub use data::{Dataset, DatasetKind, Split};
pub use error::{Error, ErrorClass, Result};
pub use eval::{EvalReport, ExperimentConfig};
pub use tensor::{Scalar, Tensor};
pub use trainer::{FeatureLossWeights, TrainConfig};
