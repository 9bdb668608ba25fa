//! Test-time training for cross-domain embedding retrieval.
//!
//! A pretrained encoder is adapted to an unlabeled, distribution-shifted
//! query set with one of three self-supervised objectives (rotation
//! prediction, jigsaw permutation classification, Barlow Twins) and then
//! evaluated with mAP@k / Prec@k retrieval protocols on a synthetic
//! multi-domain benchmark.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod imaging;
pub mod model;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
