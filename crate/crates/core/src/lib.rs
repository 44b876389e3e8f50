//! Recurrent-state souping for a minimal selective state-space model.
//!
//! Documents are encoded independently into fixed-size per-layer recurrent
//! states, the states are merged with a commutative pooling operator, and
//! answers are decoded conditioned on the pooled state. The crate covers the
//! full loop: the model and its hand-written backward passes, state pooling,
//! synthetic retrieval/QA task generators, the four finetuning regimes,
//! persistent state caching, and extractive-QA evaluation.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod parallel;
pub mod soup;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
