//! Desk-scale laboratory for cross-domain image harmonization.
//!
//! The crate builds a styled synthetic corpus in two families ("rendered"
//! with public style labels, "real-like" with sealed ones), constructs
//! composite/ground-truth pairs by foreground exchange, and trains a
//! three-stage harmonization network with adversarial feature alignment and
//! style supervision on top of a from-scratch reverse-mode differentiation
//! engine. Everything is deterministic given seeds.

pub mod charmnet;
pub mod compositegen;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod seeds;
pub mod synthscene;
pub mod trainer;

pub use error::{Error, Result};
