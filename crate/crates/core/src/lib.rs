//! Weakly supervised phrase grounding by contrastive learning.
//!
//! A word-region attention model is trained to maximize an InfoNCE lower bound
//! on the mutual information between an image's region features and each
//! contextualized caption word. Negatives come from other images in the batch
//! and from captions where one noun is swapped for a plausible but untrue
//! alternative.

pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod math;
pub mod mi;
pub mod negcap;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
