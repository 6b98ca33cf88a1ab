//! CNN6-style encoder, MLP blocks, the four side networks and the siamese
//! comparator.

mod config;
mod network;

pub use config::{EncoderConfig, ModelConfig, Variant};
pub use network::{batch_specs, sidecar_path, Model, SideOutput, MIN_FRAMES};
