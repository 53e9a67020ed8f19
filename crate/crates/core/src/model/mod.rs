//! The recognition network: configuration, parameters, input preparation,
//! forward pass and checkpoints.

pub mod checkpoint;
mod config;
mod input;
mod net;
mod params;

pub(crate) use config::parse;
pub use config::{FusionMode, ModelConfig, ENCODER_BLOCKS};
pub use input::{crop, prepare_inputs, resize_bilinear, BoundingBox};
pub use net::{
    argmax, pool_target, target_cell, tokenize_context, untokenize, Crtnet, ForwardGraph,
    Prediction, PreparedInput,
};
pub use params::{check_layout, encoder_prefix, init_params, BoundParams, ParamStore, Stream};
