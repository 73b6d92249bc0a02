//! Speaker-conditioned streaming keyword spotting.
//!
//! An SVDF encoder/decoder detector whose encoder output is modulated by
//! FiLM projections of a speaker embedding, with a synthetic corpus
//! generator, a trainer that supports robust embedding dropout, and EER/DET
//! evaluation stratified by speaker group.

pub mod archive;
pub mod cli;
pub mod data;
pub mod eval;
pub mod error;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod selftest;
pub mod speaker;
pub mod train;

pub use error::{KwsError, Result};
