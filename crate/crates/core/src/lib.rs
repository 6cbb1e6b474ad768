//! Dual atrous separable convolution (DAS-Conv) semantic segmentation.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`ops`], [`graph`]: NCHW tensors, primitive kernels and a
//!   reverse-mode tape.
//! * [`das_conv`], [`backbone`], [`aspp`], [`head`], [`model`]: the network.
//! * [`data`], [`train`], [`metrics`], [`audit`]: preprocessing, training,
//!   evaluation and complexity accounting.

pub mod aspp;
pub mod audit;
pub mod backbone;
pub mod data;
pub mod das_conv;
pub mod dast;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{build_model, Model, ModelConfig, SkipSource};
pub use tensor::{Element, Shape4, Tensor4};
