//! Autoencoder-based low-rank filter sharing (ALF) for convolutional networks.
//!
//! Each ALF layer replaces a `K×K×Ci×Co` convolution by `C_code` shared code
//! filters followed by a point-wise expansion back to `Co` channels. The code
//! filters come from a filter autoencoder trained jointly with the task, and a
//! periodic mask schedule prunes code channels during training. After training
//! the masked channels are physically removed and the model is written to a
//! compact container.
//!
//! Module map:
//!
//! - [`tensor`], [`ops`], [`autodiff`], [`gradcheck`]: dense tensors, convolution
//!   kernels and a reverse-mode tape.
//! - [`block`]: the ALF layer.
//! - [`factorizer`]: the mask schedule.
//! - [`cost`]: parameter and MAC accounting.
//! - [`model`], [`trainer`]: classifiers and the joint training loop.
//! - [`deploy`]: compaction and the `ALF1` container.
//! - [`data`], [`config`]: datasets and run configuration.

pub mod autodiff;
pub mod block;
pub mod config;
pub mod cost;
pub mod data;
pub mod deploy;
pub mod error;
pub mod factorizer;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use block::{decode_filters, AlfBlock};
pub use config::{DatasetConfig, DatasetKind, RunConfig};
pub use cost::{code_max, gain_ratio, layer_cost, CostEntry, CostReport, LayerDesc, LayerKind};
pub use data::{synth_teacher, Dataset, SyntheticTeacher, TeacherSpec};
pub use deploy::{compact, deploy, DeployedAlf, DeployedLayer, DeployedModel};
pub use error::{AlfError, Result};
pub use factorizer::{compute_importances, FactorizerState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use model::{Architecture, InputSpec, Layer, LayerSpec, Model};
pub use ops::{activation, conv2d_fast, conv2d_naive, pointwise_conv};
pub use tensor::{Activation, ConvGeometry, Layout, Real, Tensor4};
pub use trainer::{combined_loss, evaluate, Checkpoint, Classifier, EpochRecord, Metrics, OptimizerKind, Trainer, TrainingConfig};
