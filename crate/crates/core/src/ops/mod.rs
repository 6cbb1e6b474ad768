//! Primitive tensor kernels. Every op is a pure function of its inputs; the
//! `*_backward` companions compute vector-Jacobian products and are driven
//! by [`crate::graph::Graph`].

pub mod activation;
pub mod conv;
pub mod misc;
pub mod norm;
pub mod resize;
pub mod softmax;

pub use activation::{activation, activation_backward, Activation};
pub use conv::{conv2d, conv2d_backward, pad_for_same, ConvGrads, ConvSpec};
pub use misc::{
    add, concat_channels, dropout, global_avg_pool, global_avg_pool_backward, scale_channels,
    scale_channels_backward, split_channels,
};
pub use norm::{batch_norm, batch_norm_backward, update_running_stats, BnSaved, Mode, BN_EPSILON, BN_MOMENTUM};
pub use resize::{bilinear_resize, bilinear_resize_backward};
pub use softmax::{argmax_channels, cross_entropy, softmax_channels, softmax_channels_backward, CrossEntropy, LabelMap};
