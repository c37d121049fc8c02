//! Entropy minimization for tiny autoregressive language models.
//!
//! The crate trains small decoder-only transformers on synthetic, verifiable
//! tasks and then post-trains them by minimising the per-token entropy of
//! their own generations on a single selected prompt. Around that objective
//! it provides variance-based prompt selection, temperature sampling and
//! greedy decoding, and instrumentation for the skewness of the flattened
//! logits distribution.

pub mod analysis;
pub mod error;
pub mod generation;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod selection;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
