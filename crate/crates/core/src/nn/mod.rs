//! Policy/value network layers with hand-written backward passes.

pub mod conv;
pub mod gemm;
pub mod layers;
pub mod network;
pub mod params;

pub use conv::{
    conv_backward_bias, conv_backward_data, conv_backward_filter, conv_forward, ConvImpl, ConvLayer,
};
pub use network::{ForwardCache, LayerSpec, Network, NetworkSpec};
pub use params::{ModelParams, ParamSet};
