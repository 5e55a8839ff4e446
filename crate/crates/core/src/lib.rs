//! FCC-GAN laboratory: a small differentiable tensor engine, builders for the
//! CNN and FCC-GAN generator/discriminator stacks, adversarial training with
//! the standard and Wasserstein objectives, and classifier-based scoring.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod archive;
pub mod autograd;
pub mod data;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod train;

pub use arch::{
    build_ablation, build_discriminator, build_generator, init_parameters, ArchitectureConfig,
    DatasetKind, FeatureShape, LayerSpec, ModelSpec, Network, Variant,
};
pub use archive::Archive;
pub use autograd::{Activation, BatchNormState, BnMode, Tape, Var};
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use metrics::{EvalClassifier, GaussianStats, ScoreReport};
pub use objectives::{GeneratorLoss, Objective};
pub use optim::{clip_weights, Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::{AnyTensor, ConvGeometry, DType, Element, Real, Tensor};
pub use train::{sample, train, Checkpoint, Event, LossLog, LossRow, TrainConfig, Trainer};
