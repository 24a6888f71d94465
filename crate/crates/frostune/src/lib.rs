//! Adaptive layer-freezing for desk-scale fine-tuning.
//!
//! `frostune` trains small dense networks while *watching them converge*:
//! layers whose accumulated gradient norms stop changing are frozen
//! front-to-back, their activations are cached so frozen prefixes are never
//! recomputed, and an analytic cluster model plans how a distributed job
//! should repack itself as freezing frees memory and gradient traffic.
//!
//! The crate splits into five independently usable pieces:
//!
//! - [`nn`]: a dense-MLP engine with exact hand-written gradients, partial
//!   forward/backward, and analytic FLOP accounting.
//! - [`freeze`]: the online gradient-norm freezing test and its percentile
//!   decision rule.
//! - [`svcca`]: activation-similarity scoring used as an offline oracle for
//!   what the freezing test *should* have done.
//! - [`cache`]: a two-tier (memory/disk) store for frozen-prefix activations
//!   with strict capacity accounting.
//! - [`distsim`]: an alpha-beta communication model and two packing planners
//!   for distributed fine-tuning under freezing.
//!
//! The [`harness`] module ties them into reproducible experiments behind the
//! `frostune` CLI; see the book under `book/` for a guided tour.

pub mod cache;
pub mod distsim;
mod error;
pub mod freeze;
pub mod harness;
pub mod matrix;
pub mod nn;
pub mod svcca;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use nn::{Activation, FlopCount, ForwardTrace, GradientSet, Layer, LayerGrads, Model};
