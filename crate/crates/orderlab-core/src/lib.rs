//! Continual semi-supervised meta-learning on synthetic task streams.
//!
//! The crate implements, end to end:
//! - a dense-network kernel with hand-written backward passes ([`nn`]),
//! - evolving episodic task streams with OOD contamination and a
//!   reservoir-sampled episode memory ([`stream`], [`memory`]),
//! - the semi-supervised prototypical core ([`proto`]),
//! - distance-threshold OOD gating of unlabeled data ([`ood`]),
//! - variational mutual-information bounds with learned decoder/critic ([`mi`]),
//! - exact discrete optimal transport and the feature-drift loss ([`ot`]),
//! - the full training loop plus sequential / replay / joint baselines
//!   ([`trainer`]),
//! - experiment orchestration, sweeps and metric persistence
//!   ([`config`], [`experiment`]).

pub mod error;
pub mod mat;
pub mod memory;
pub mod mi;
pub mod nn;
pub mod ood;
pub mod proto;
pub mod rng;
pub mod stream;

pub use error::{Error, Result};
pub use mat::Mat;
