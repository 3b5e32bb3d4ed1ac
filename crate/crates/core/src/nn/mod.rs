//! Layer primitives with hand-written backward passes.

pub mod batchnorm;
pub mod conv;
pub mod counter;
pub mod gradcheck;
pub mod layers;

pub use batchnorm::{
    batchnorm2d_backward, batchnorm2d_forward, batchnorm2d_forward_mapped, BatchNorm2dParams, BnCache,
    BnGrads, BnMode, ChannelMap,
};
pub use conv::{conv2d_backward, conv2d_forward, Conv2dGrads, Conv2dParams};
pub use counter::MacCounter;
pub use gradcheck::{finite_diff_check, numeric_gradient, relative_error};
pub use layers::{
    global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward,
    maxpool2d_backward, maxpool2d_forward, relu_backward, relu_forward, softmax_backward,
    softmax_forward, tanh_backward, tanh_forward, LinearGrads, LinearParams, PoolSpec,
};
