//! Variational inference for mixture models and LDA topic models with
//! L-sparse responsibilities: each observation's posterior over clusters is
//! constrained to at most L non-zero entries, which shrinks the local and
//! summary steps from O(K) to O(L) work per observation while optimizing the
//! same objective exactly under the sparsity constraint.
//!
//! The crate provides the full training stack — exponential-family posteriors,
//! top-L selection, dense/sparse local steps for mixtures and topic models,
//! stochastic (SVI) and memoized (MVI) minibatch drivers — plus dataset
//! ingestion, heldout scoring, and benchmarking.

pub mod config;
pub mod counters;
pub mod data;
pub mod error;
pub mod eval;
pub mod expfam;
pub mod init;
pub mod lda;
pub mod linalg;
pub mod mixture;
pub mod resp;
pub mod selection;
pub mod snapshot;
pub mod special;
pub mod train;

pub use error::{Error, Result};
