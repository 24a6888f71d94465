//! Experiment orchestration: configuration, synthetic data, the training
//! loop, cluster scenario sweeps, and report generation.
//!
//! The pieces in this module tie the lower-level engines together into
//! runnable experiments:
//!
//! * [`config`] — flat `key = value` run configuration with strict
//!   validation and command-line overrides.
//! * [`data`] — seeded synthetic classification tasks (Gaussian blobs)
//!   plus the related-but-shifted distribution used for pretraining.
//! * [`train`] — the fine-tuning loop: freezing decisions, activation
//!   caching, flop and simulated-time accounting, and checkpointing.
//! * [`scenario`] — cluster scenario files and packing-strategy sweeps.
//! * [`report`] — CSV/JSON emission and post-hoc schedule comparison.

pub mod config;
pub mod data;
pub mod report;
pub mod scenario;
pub mod train;
