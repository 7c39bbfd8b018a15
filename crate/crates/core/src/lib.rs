//! Core library for learning a discrete codebook over ground-pressure map
//! sequences and generating new sequences from activity descriptions.
//!
//! The pipeline, end to end:
//!
//! 1. [`data`] synthesizes or loads pressure-map sequences (`PSEQ1` files plus
//!    a JSON manifest) and handles normalization and train/test/val splitting.
//! 2. [`codec`] compresses normalized sequences into short latent sequences,
//!    snaps each latent to the nearest entry of a learned codebook, and
//!    decodes back to pressure maps.
//! 3. [`embed`] turns description strings into fixed-width unit vectors,
//!    either via a deterministic offline provider or a remote HTTP service.
//! 4. [`generator`] is a text-conditioned autoregressive model over codebook
//!    indices terminated by an `END` token; decoded through the frozen codec
//!    it maps text to pressure sequences.
//! 5. [`metrics`] scores generated data (Fréchet distance, R², binarized R²,
//!    macro F1) and [`har`] runs the downstream activity-recognition
//!    experiments on synthetic vs. real-proxy training sets.
//!
//! Everything is seeded and single-threaded per run: the same configuration
//! produces bit-identical artifacts.

pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod embed;
pub mod generator;
pub mod har;
pub mod metrics;
pub mod nn;
