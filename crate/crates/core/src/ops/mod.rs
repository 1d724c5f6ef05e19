//! Dense tensor primitives every network component is built from.

mod activation;
mod conv;
mod linear;
mod norm;
mod pool;

pub use activation::{
    add, concat_channels, leaky_relu, mul, relu, sigmoid, sigmoid_scalar, slice_channels, softmax,
    DEFAULT_LEAKY_SLOPE,
};
pub(crate) use activation::{add_in_place, softmax_slice};
pub use conv::{conv2d, depthwise_separable_conv, ConvLayer, ConvSpec, SeparableConv};
pub(crate) use conv::{conv2d_raw, sgemm, sgemm_bt};
pub use linear::Linear;
pub use norm::{batchnorm_infer, layernorm, BatchNorm};
pub use pool::{adaptive_avg_pool, bilinear_resize, global_avg_pool, maxpool2d};
