// SPDX-License-Identifier: Apache-2.0

//! Ranking-based deep cross-modal hashing.
//!
//! Two modality encoders (image-side `X`, text-side `Y`) are trained so that
//! the signs of their outputs form binary codes living in a shared Hamming
//! space. Training minimizes a similarity-weighted cross-modal triplet
//! ranking loss plus a quantization penalty, alternating between the two
//! encoders and a closed-form update of the shared code matrix `B`.
//!
//! Module map:
//!
//! - [`data`]: feature/label matrices, the RDMX file format, splits, label
//!   masking and a seeded synthetic generator.
//! - [`similarity`]: semi-supervised semantic similarity and binned ranking
//!   lists.
//! - [`encoder`]: feed-forward encoders with explicit backpropagation.
//! - [`objective`]: relaxed Hamming margins, the weighted triplet loss and
//!   its gradients with respect to the continuous codes.
//! - [`trainer`]: triplet sampling and the alternating optimization loop.
//! - [`retrieval`]: packed codes, Hamming distance and exact top-k search.
//! - [`eval`]: average precision, MAP and the ablation harness.
//! - [`gradcheck`]: finite-difference check of the analytic gradients.
//! - [`cli`]: the `rdcmh` command-line entry point.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objective;
pub mod retrieval;
pub mod similarity;
pub mod trainer;

pub(crate) mod seed;

pub use error::{Error, Result};
