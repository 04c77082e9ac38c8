//! Discrete-token compression for electron-microscopy frames.
//!
//! Frames are encoded by a vector-quantized autoencoder into integer token
//! grids, stored in compact `.emvq` containers, and decoded either directly
//! from the top tokens or with bottom tokens predicted by a transformer prior.

pub mod autonets;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod model;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod pixeldata;
pub mod prior;
pub mod quantizer;
pub mod synth;
pub mod tokenstream;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{ModelKind, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use pixeldata::Frame;
