//! ViT teacher/student distillation for hash-based image retrieval.
//!
//! The crate trains a large "teacher" Vision Transformer and distills it into
//! a compact student whose class token is mapped to a short continuous hash
//! feature; sign quantization turns that feature into a ternary code used for
//! Hamming-distance retrieval. Training combines a supervised contrastive
//! loss, a Hamming-relaxed triplet loss, hierarchical teacher/student feature
//! alignment, and a patch-masked mix augmentation.
//!
//! Modules map one-to-one onto the moving parts:
//! - [`tensor`]: reverse-mode autodiff tape (f64, sequential, reproducible)
//! - [`vit`]: configurable ViT encoder with per-layer outputs and prefix freezing
//! - [`hash`]: hash head and ternary sign quantization + code file format
//! - [`distill`]: high-level + window-weighted low-level alignment losses
//! - [`objectives`]: contrastive / triplet losses and total-loss composition
//! - [`augment`]: patch-masked mix augmentation with scheduled strength
//! - [`data`]: dataset scan/split/preprocess and a synthetic generator
//! - [`retrieval`]: ternary-code index and MAP / P@k / R@k / PR metrics
//! - [`trainer`]: config-driven teacher/student training and evaluation

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod hash;
pub mod objectives;
pub mod retrieval;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
