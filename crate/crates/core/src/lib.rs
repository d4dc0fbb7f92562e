//! Cross-modal association between independently trained variational
//! auto-encoders.
//!
//! Each modality gets its own VAE and latent space ([`vae`]). Trainable
//! associators translate a latent code of one modality into a Gaussian over
//! the latent space of another ([`associator`]). Training runs in two phases
//! ([`training`]): every auto-encoder is first fit on unpaired data of its own
//! modality, then the auto-encoders are frozen and only the associators are
//! fit on (possibly few) class-correlated pairs. Generated samples are scored
//! by recognition networks trained on original data ([`eval`]).
//!
//! Everything runs on a small define-by-run reverse-mode differentiation
//! engine over `f64` tensors ([`autodiff`]).

pub mod associator;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod nets;
pub mod rng;
pub mod selfcheck;
pub mod tensor;
pub mod training;
pub mod vae;

pub use associator::{AssociationPath, Associator, PathMode};
pub use autodiff::{Gradients, OpKind, Optimizer, OptimizerKind, Param, Parameterized, Tape, Var};
pub use data::{Dataset, LabelMap, SyntheticSpec, Transform};
pub use error::{Error, Result};
pub use eval::{MetricsRow, RecognitionNet, ScenarioSpec};
pub use tensor::Tensor;
pub use training::{ModelRegistry, PhaseReport, TrainConfig};
pub use vae::{GaussianParams, LossWeights, ModalityAutoEncoder, ReconMode};
