//! A desk-scale lab for extending the context window of small decoder
//! transformers: RoPE decoder with explicit positional indices, base-change and
//! interpolation extension, drift diagnostics between an original and an
//! extended model, skipped-position sampling, and a trainer that combines
//! long-text language modelling with short-text and short-to-long distillation.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod drift;
pub mod error;
pub mod eval;
pub mod model;
pub mod positions;
pub mod rope;
pub mod run;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
