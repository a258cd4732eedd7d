//! Temporal knowledge graph modeling: joint event-time densities and
//! evolving link structure over a stream of timestamped triples.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod plot;
pub mod report;
pub mod optim;
pub mod store;
pub mod synthetic;
pub mod trainer;
pub mod structure_head;
pub mod tape;
pub mod time_head;

pub use error::{Result, TkgError};
