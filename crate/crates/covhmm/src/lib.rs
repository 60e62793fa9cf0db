//! Covariate-conditioned hidden Markov model classifier for variable-length
//! postoperative temperature sequences.
//!
//! Two class-conditional HMMs (complication / non-complication) are trained
//! by Baum-Welch EM. Each patient's initial-state distribution and transition
//! matrix are resolved from their time-invariant covariates through
//! multinomial-logit links, so the chain is constant within a sequence but
//! varies across patients. New sequences are labeled by the Bayesian
//! posterior over the two models, which doubles as a prefix-based real-time
//! risk score.
//!
//! Module map:
//!
//! - [`hmm`] — scaled forward-backward, likelihood, and Viterbi decoding
//! - [`link`] — multinomial-logit links and weighted maximum-likelihood fits
//! - [`train`] — Baum-Welch EM over a labeled sequence collection
//! - [`classify`] — two-model posterior and streaming risk scores
//! - [`ingest`] — binning, imputation, oversampling, file formats
//! - [`eval`] — cross-validation, metrics, early-classification sweeps
//! - [`synth`] — seeded synthetic-data generation from known parameters

pub mod classify;
pub mod error;
pub mod eval;
pub mod hmm;
pub mod ingest;
pub mod link;
mod seeding;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
