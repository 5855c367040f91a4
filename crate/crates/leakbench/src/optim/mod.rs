//! Optimization: AdamW for neural training and the deterministic convex
//! solver behind the leakage probes.

pub mod adamw;
pub mod logreg;

pub use adamw::{AdamW, AdamWConfig};
pub use logreg::{
    fit_multinomial_logreg, probe_accuracy, probe_predict, ProbeFit, ProbeSolverConfig,
};
