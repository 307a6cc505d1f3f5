//! Minimal CPU training engine for 3D encoder-decoder networks: explicit
//! forward/backward per layer, GEMM-lowered convolutions, Adam.

mod adam;
mod conv;
mod direct;
mod layers;
mod param;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use conv::{Conv3d, ConvTranspose3d};
pub use layers::{
    leaky_relu_backward, leaky_relu_inplace, max_pool, max_pool_backward, sigmoid, sigmoid_backward,
    softmax_backward, softmax_channels, InstanceNorm, NormCache, PoolCache, LEAKY_SLOPE,
};
pub use param::{Param, Parameters};
pub use tensor::Tensor;
