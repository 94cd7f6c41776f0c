//! Pairwise text ranking: a shared encoder, a context-aggregating head trained
//! with a margin ranking loss, list ranking by round-robin tournament, and an
//! absolute classifier baseline for comparison.

pub mod baseline;
pub mod canonical;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalrank;
pub mod gradcheck;
pub mod nn;
pub mod pairgen;
pub mod rankhead;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
