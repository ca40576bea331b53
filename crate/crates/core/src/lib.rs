//! Kernel-machine detection of higher-order interactions (HOI) across
//! multi-view data.
//!
//! Three feature views measured on the same subjects (e.g. genotypes,
//! imaging summaries, methylation) are turned into seven Gram matrices:
//! one per view, three pairwise Hadamard products, and the triple
//! Hadamard product. A linear mixed model with one variance component
//! per Gram matrix is fitted by restricted maximum likelihood, and two
//! score tests are provided: an overall test for any effect, and a test
//! for the three-way interaction component carried by the triple-product
//! kernel. Comparison methods (principal-component interaction
//! regressions and a SKAT-style variance-component test), a simulation
//! harness, and correlation-graph network metrics round out the toolkit.

// Validation guards are written `!(x > 0.0)` on purpose: unlike
// `x <= 0.0`, the negated form also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod dataio;
pub mod kernels;
pub mod mixed_model;
pub mod netmetrics;
pub mod numerics;
pub mod scan;
pub mod score_tests;
pub mod simgen;

/// Library-wide error type.
///
/// `Invalid` covers rejected inputs (bad shapes, unparseable files,
/// out-of-range values); `Numerical` covers failures of the numerical
/// routines themselves (factorization breakdown, no converged fit).
/// The CLI maps `Invalid` to exit code 2 and everything else to 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI should use for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) => 2,
            _ => 1,
        }
    }
}
