//! Deep ice-layer thickness prediction from shallow-layer radargram traces.
//!
//! The pipeline: traced layer boundaries (JSON Lines) become thickness
//! records, each record becomes a temporal sequence of partitioned spatial
//! graphs, and a spatio-temporal graph transformer is trained to predict the
//! thickness of the deeper layers from the shallow ones. Training, metrics,
//! ablation and sensitivity experiments are all driven by the `layercast`
//! binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod report;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
