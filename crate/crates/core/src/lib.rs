//! Two-stage anomaly detection with multi-scale Hopfield memories.
//!
//! Stage 1 trains a convolutional encoder and one memory of normal
//! prototypes per feature scale with a memory-gated contrastive loss.
//! Stage 2 scores images from the deviation between each feature map and
//! its recollection, either directly by its norm (one-class) or through
//! small heads trained on a few labeled anomalies (semi-supervised).

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detect;
pub mod encoder;
mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod optim;
pub mod rng;
pub mod train;

pub use anomem_autodiff as autodiff;
pub use anomem_autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};

pub use augment::AugmentPolicy;
pub use checkpoint::{Checkpoint, Container};
pub use config::{ExperimentConfig, Mode, VarianceMode};
pub use data::{gen_synthetic, make_one_vs_all_split, LabeledImageSet, ProtocolSplit, SyntheticSpec};
pub use detect::{AnomalyScore, Detector, ScaleHead};
pub use encoder::{EncoderSpec, EncoderState};
pub use eval::{auroc, linear_probe, sweep, EvalReport, SweepAxis};
pub use memory::{BoundMemory, HopfieldMemory};
pub use train::{train_stage1, train_stage2, EpochRecord};
