//! Dual-stream (image + pseudo-depth) attention regressor for articulated
//! body meshes, with a coupling-flow residual likelihood term, silhouette and
//! masked-token refinement, and a synthetic capsule-body data generator.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod embedding;
pub mod params;
pub mod encoder;
pub mod flow;
pub mod heads;
pub mod objective;
pub mod harness;
