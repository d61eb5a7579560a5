//! due — deep learning of unknown equations.
//!
//! Learns flow maps of unknown ODEs/PDEs from trajectory data: reverse-mode
//! autodiff, the ResNet/gResNet/OSG-Net/dual-OSG-Net/PiT architecture family,
//! dataset rearrangement, synthetic benchmark generators, modal projection,
//! training, and recursive rollout.

pub mod autodiff;
pub mod config;
pub mod datasets;
pub mod error;
pub mod linalg;
pub mod modal;
pub mod networks;
pub mod rollout;
pub mod simulate;
pub mod tensor;
pub mod training;

pub use error::{DueError, Result};
pub use tensor::Tensor;
