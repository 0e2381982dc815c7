//! Unsupervised infrared/visible image fusion with a dual-branch multi-scale
//! autoencoder, cross-modal feature mapping, a variance-gated SSIM loss and
//! a suite of objective fusion metrics.

pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod image_io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod reference;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use fusion::FusionRule;
pub use image_io::{load_image, save_image, Image, ImagePair, PairDataset};
pub use loss::{LossGate, SsimParams};
pub use metrics::{evaluate_all, Metric, MetricReport};
pub use network::{ArchConfig, FusionNet};
pub use train::{infer_fuse, load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, TrainLog};
