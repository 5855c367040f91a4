//! Desk-scale testbed for measuring site leakage in learned representations.
//!
//! The crate implements the full protocol end to end: multi-site contrastive
//! pretraining, an adversarial variant that confuses a site classifier through
//! gradient reversal, frozen-encoder linear transfer with source-validation
//! model selection, post-hoc linear probes that quantify how decodable the
//! acquisition site is from frozen features, and multi-seed aggregation into
//! report tables.
//!
//! Start from the `examples/` directory for runnable walkthroughs of each
//! capability, or use the `leakbench` binary for the file-based workflow.

pub mod autodiff;
pub mod selftest;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
