//! Joint forecasting of pedestrian trajectories and head orientations.
//!
//! An LSTM per pedestrian consumes its positions (the *tracklet*) and gaze
//! anchor points (the *vislet*), pools the hidden states of neighbours inside
//! its view frustum, and emits a 4-D Gaussian over the next position and
//! anchor. The covariance is produced through a Log-Cholesky factor so it is
//! positive definite for any network output.
//!
//! Modules, bottom-up:
//!
//! * [`tensor`]: dense matrices, seeded RNG, reverse-mode gradient tape
//! * [`geometry`]: vislets, view frustum, social pooling grid
//! * [`network`]: model weights, forward pass, likelihood heads, checkpoints
//! * [`training`]: RMSProp loop, clipping, gradient checking, config files
//! * [`data`]: TSV annotations, downsampling, windows, synthetic scenes
//! * [`evaluation`]: MAD / FAD / angular error, sweeps, gaze statistics

pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Pedestrian identifier as it appears in annotation files.
pub type AgentId = u32;

pub use data::{AgentTrack, RawAnnotation, Scene, Window};
pub use geometry::{AgentState, FrustumSpec, PoolingGrid, PoolingMode, VisletPoint};
pub use network::{ModelConfig, ModelVariant, ModelWeights};
pub use tensor::{DenseMatrix, RngState};
pub use training::TrainConfig;
