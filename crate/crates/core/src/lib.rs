//! Multi-intent entity resolution.
//!
//! Builds per-intent labeled pair benchmarks, embeds candidate pairs, trains
//! baseline matchers, links the per-intent pair representations into a
//! multiplex graph and trains a relation-aware GraphSAGE model over it, then
//! scores every method with multi-intent metrics.

pub mod benchmark;
pub mod embedding;
pub mod error;
pub mod flexer;
pub mod graph;
pub mod io;
pub mod matchers;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;

pub use error::{Error, ErrorKind, Result};
