//! Cross-sample feature aggregation for skeleton action recognition.
//!
//! Skeleton sequences are encoded by a spatio-temporal graph backbone; a
//! lightweight head splits each encoding into a spatial (performer) and
//! temporal (action) component and recombines components drawn from
//! different samples.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod head;
pub mod ingest;
pub mod mi;
pub mod model;
pub mod objective;
pub mod oneshot;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use scalar::Scalar;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
