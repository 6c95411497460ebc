//! Cross-model mutual learning for exemplar-based semantic segmentation.
//!
//! Two identically-shaped UNets are trained from a single annotated exemplar,
//! a copy-paste synthetic dataset derived from it, and a pool of unlabeled
//! images. Each network's confident predictions on a weakly perturbed view
//! supervise the *other* network's predictions on strongly perturbed images
//! and on channel-dropped encoder features.

pub mod datamodel;
pub mod error;
pub mod evalmetrics;
pub mod objective;
pub mod perturbation;
pub mod rng;
pub mod segnet;
pub mod synthesis;
pub mod tensor;
pub mod toybench;
pub mod trainer;

pub use error::{Error, Result};
