//! RetGen at desk scale: a dense document retriever and a grounded
//! autoregressive generator trained jointly on the language-model signal,
//! with mixture-of-experts multi-document decoding, retriever correction,
//! MMI reranking, and an evaluation harness.

pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod retriever;
pub mod trainer;
pub mod util;
pub mod text;

pub use error::{CoreError, Result};
