//! The place-recognition network: PointOE, self-attention, NetVLAD, head.

mod config;
mod forward;
mod params;

pub use config::{ModelConfig, CONFIG_KEYS};
pub use forward::{
    descriptor, head, netvlad, oe_unit, pointoe, pointwise_mlp, self_attention, AttentionVars,
    GlobalDescriptor, ParamVars, SoeNet,
};
pub use params::{stage_prefix, tensor_specs, ModelParams, TensorSpec};

#[cfg(test)]
mod tests;
