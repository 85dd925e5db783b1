//! ResNet-IBN embedding network.

mod config;
mod resnet;

pub use config::{BlockKind, ModelConfig, Preset, GEM_P_INIT, GEM_P_MAX, GEM_P_MIN};
pub use resnet::{output_extent, ForwardOutput, ForwardVars, ResNetIbn, MIN_FRAMES};
