//! Self-supervised change detection between co-registered 3D scan pairs.
//!
//! Training uses only pairs without change. Synthetic changes are produced by
//! swapping super-pixels of a scan with a perturbed variational auto-encoder
//! reconstruction ([`supermix`]), and a siamese 3D U-net ([`detector`]) learns
//! to localise them under a focal Tversky objective ([`losses`]). Inference
//! thresholds the change probability, extracts connected blobs
//! ([`inference`]), and scores them lesion-wise ([`evaluation`]).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod losses;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod supermix;
pub mod superpixel;
pub mod training;
pub mod vae;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{ChangeLabel, ScanPair, Volume, VolumeRole};
