//! BCAF: bidirectional cross-attention fusion of high-resolution RGB and
//! low-resolution hyperspectral imagery for semantic segmentation.
//!
//! The crate provides the full pipeline: spectral grouping and tokenization,
//! windowed-attention RGB and HSI backbones, localized bidirectional
//! cross-attention fusion with spectral SE pooling and gated modality fusion,
//! a shared U-Net-like decoder, class-imbalance-aware losses, IoU metrics,
//! a synthetic co-registered RGB-HSI data harness, the two-phase training
//! protocol, and benchmarking/ablation tooling. Everything runs on the CPU in
//! f64 with a small tape-based reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod grouping;
pub mod hsi_backbone;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rgb_backbone;
pub mod schedule;
pub mod swin;
pub mod train;
pub mod util;

pub use error::{BcafError, Result};
