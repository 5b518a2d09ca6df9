//! Conformer layers and the cascaded streaming encoder.

pub mod adapter;
pub mod config;
pub mod encoder;
pub mod frontend;
pub mod layer;

pub use adapter::{residual_adapter_forward, ResidualAdapter};
pub use config::{
    AdapterConfig, ConformerLayerConfig, EncoderConfig, FrontendConfig, MoeConfig, MoePlacement,
    MoeResidual, MoeSelector, StackConfig,
};
pub use encoder::{
    build_encoder, encoder_forward, Encoder, EncoderMode, EncoderModel, EncoderOutput, MoeTrace,
};
pub use frontend::{frame_stack, spec_augment, SpecAugConfig};
pub use layer::{conformer_layer_forward, ConformerLayer, FfnPosition};
