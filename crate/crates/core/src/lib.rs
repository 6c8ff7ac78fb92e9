//! Vertebra centroid localization on 3D volumes.
//!
//! The pipeline has three stages:
//!
//! 1. a small 3D convolutional encoder-decoder with deep supervision regresses
//!    one Gaussian heatmap per vertebra ([`net`]),
//! 2. chain-structured message passing over the per-vertebra probability maps
//!    repairs missing responses and suppresses remote false positives
//!    ([`message`]),
//! 3. an l1 sparse fit against a dictionary of training shapes snaps the
//!    centroid chain onto a plausible spine ([`sparse`]).
//!
//! [`synth`] generates the synthetic spine volumes the desk-scale pipeline
//! trains and evaluates on, [`eval`] scores predictions, and [`pipeline`]
//! wires the stages together behind the CLI.
//!
//! All randomness is seeded; every stage is a pure function of its inputs and
//! a seed. With the `parallel` feature (default) the inner loops run on rayon
//! and produce results identical to the sequential fallback.

pub mod config;
pub mod eval;
pub mod heatmap;
pub mod io;
pub mod labels;
pub mod landmarks;
pub mod message;
pub mod net;
pub mod pipeline;
pub mod plot;
pub mod sparse;
pub mod synth;
pub mod volume;

pub(crate) mod par;
pub(crate) mod rng;
