//! Few-shot scene-adaptive crowd density regression.
//!
//! A small convolutional density estimator is pretrained on a pool of
//! camera scenes, then meta-trained (MAML with second-order gradients, or
//! Reptile) so that a handful of labeled images from an unseen scene adapt
//! it in a few SGD steps.

pub mod autodiff;
pub mod density;
pub mod error;
pub mod eval;
pub mod metatrain;
pub mod nn;
mod par;
pub mod pgm;
pub mod scenes;

pub use error::{Error, Result};
