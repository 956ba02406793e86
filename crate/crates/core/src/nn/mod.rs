//! Dense tensors and the layer kernels the segmentation network is built
//! from, each with an analytic backward pass.

mod activation;
mod adam;
mod conv;
mod loss;
mod norm;
mod tensor;

use std::collections::BTreeMap;

pub use activation::{
    apply_channel_mask, center_crop, center_crop_backward, concat_channels, maxpool2x2_backward, maxpool2x2_forward,
    pixel_softmax, relu_backward, relu_forward,
};
pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2};
pub use conv::{conv2d_backward, conv2d_forward, deconv2x2_backward, deconv2x2_forward, ConvGrads};
pub use loss::{cross_entropy_loss, cross_entropy_sum, softmax_cross_entropy_backward};
pub use norm::{
    group_norm_backward, group_norm_forward, group_norm_forward_cached, GroupNormCache, GroupNormGrads, GROUP_NORM_EPS,
};
pub use tensor::{Scalar, Tensor};

/// Named parameter (or gradient) tensors, ordered by name.
pub type ParamSet<T = f32> = BTreeMap<String, Tensor<T>>;
