//! Desk-scale laboratory for editing factual memories in a small
//! decoder-only transformer.
//!
//! The crate builds a multi-query-attention decoder from scratch and
//! implements the full editing workflow on top of it:
//!
//! * [`memit`]: least-squares edits of the MLP output matrices in a set of
//!   critical layers,
//! * [`probe`]: per-head logistic probes separating true from edited
//!   completions and the top-K head selection,
//! * [`memat`]: optimized head-output corrections at the selected heads,
//!   their reuse across edit sets, and the mean-activation baseline,
//! * [`eval`]: success, magnitude and accuracy metrics, cross-lingual
//!   stratified analysis, head-count sweeps and scaling curves,
//! * [`dataset`]: synthetic bilingual counterfactual corpora, a word-level
//!   tokenizer and pretraining.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod autodiff;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod memat;
pub mod memit;
pub mod model;
pub mod optim;
pub mod probe;

pub use error::{Error, Result};
