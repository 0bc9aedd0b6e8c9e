//! Widthwise scaling analysis of abc-parametrized multilayer perceptrons.
//!
//! An abc-parametrization assigns width exponents to an MLP: `a_l` scales each
//! weight multiplier (`W^l = n^{-a_l} w^l`), `b_l` the init variance
//! (`w^l ~ N(0, n^{-2 b_l})`), and `c` the SGD learning rate (`eta n^{-c}`).
//! This crate classifies such parametrizations exactly (stability,
//! nontriviality, feature-learning vs kernel regime) and simulates their SGD
//! training dynamics three ways:
//!
//! - [`mlp`]: finite-width networks with a hand-rolled backward pass, plus the
//!   probes (coordinate sizes, feature kernel, empirical NTK) used to test the
//!   infinite-width predictions;
//! - [`linlim`], [`particle`], [`wick`]: infinite-width limits — the exact
//!   coefficient-space shallow linear limit, a Monte-Carlo particle engine for
//!   the general shallow and depth-2 limits, and an exact Gaussian-moment
//!   engine for polynomial activations;
//! - [`kernelgd`]: kernel-regime machinery (limit kernels, kernel gradient
//!   descent);
//! - [`tasks`]: desk-scale drivers (first-order MAML, CBOW Word2Vec, transfer
//!   triviality) that exercise the feature-learning vs kernel dichotomy.
//!
//! The `abclim` binary exposes the experiments as subcommands; see the README.

pub mod abc;
pub mod config;
pub mod experiments;
pub mod kernelgd;
pub mod linlim;
pub mod mlp;
pub mod particle;
pub mod tasks;
pub mod util;
pub mod wick;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("MFP is defined only for 1 hidden layer (got L = {0})")]
    MfpRequiresDepthOne(usize),
    #[error("unknown parametrization name `{0}` (expected SP, NTP, MFP, or MUP)")]
    UnknownParamName(String),
    #[error("layer index {index} out of range 1..={max}")]
    LayerOutOfRange { index: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty vector")]
    EmptyVector,
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
    #[error("covariance not positive semidefinite after jitter; min eigenvalue {0:.3e}")]
    NotPsd(f64),
    #[error("monomial degree {degree} exceeds cap {cap}")]
    DegreeCap { degree: usize, cap: usize },
    #[error("term count {terms} exceeds cap {cap}")]
    TermCap { terms: usize, cap: usize },
    #[error("step count {steps} exceeds exact-engine cap {cap}")]
    StepCap { steps: usize, cap: usize },
    #[error("basis variable count {vars} exceeds cap {cap}")]
    VarCap { vars: usize, cap: usize },
    #[error("parametrization is not in kernel regime (regime = {0})")]
    NotKernelRegime(String),
    #[error("input not in kernel table")]
    MissingKernelInput,
    #[error("token {token} out of vocabulary range 0..{vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
