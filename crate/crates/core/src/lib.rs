//! Multivariate mixed survival models for the genetic analysis of
//! longevity: pseudo-data expansion, penalized quasi-likelihood fitting
//! on sparse mixed-model equations, and heritability decomposition.

pub mod cli;
pub mod error;
pub mod expand;
pub mod genetics;
pub mod inference;
pub mod model;
pub mod nonparam;
pub mod par;
pub mod pedigree;
pub mod report;
pub mod simulate;
pub mod sparse;

pub use error::{Error, Result};
