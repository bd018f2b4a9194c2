//! Semi-supervised multimodal alignment on a small reverse-mode engine.
//!
//! The crate provides the distribution-matching objectives (multi-kernel MMD
//! and the semantic density distribution loss), the CLIP-style and
//! self-supervised contrastive losses, a two-stream MLP model with Adam
//! training, a synthetic two-modality data generator and the soft-Parzen
//! batch representativeness study.

pub mod data;
pub mod error;
pub mod grad;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod par;
pub mod sampling;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
