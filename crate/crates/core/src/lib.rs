//! Robustness-aware multi-modal masked reconstruction pre-training on a
//! synthetic paired image/text corpus.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod corruption;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
