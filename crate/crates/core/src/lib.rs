//! Maneuver-anchored trajectory prediction for vehicles at roundabouts.

pub mod anchors;
mod bytes;
pub mod dataset;
pub mod diffnum;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod maneuvers;
pub mod net;
pub mod par;
pub mod plot;
pub mod synth;
pub mod train;
pub mod trajkit;
pub mod zones;

pub use error::{Error, Result};
