//! Weakly supervised multi-label classification and localization.
//!
//! An adaptive DenseNet produces stride-16 feature maps, a 1×1 bridging
//! convolution turns them into `M` sub-maps per class, class-wise pooling
//! averages those into one heatmap per class, and spatial pooling reduces
//! each heatmap to a class score. Heatmaps are thresholded into bounding
//! boxes, so localization comes out of image-level labels alone.
//!
//! Everything runs on a small define-by-run autograd engine ([`autograd`])
//! with hand-written backward passes for every operator.

// Negated comparisons are how NaN is rejected in validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod data;
pub mod densenet;
pub mod error;
pub mod gradcheck;
pub mod localize;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod params;
pub mod tensor;
pub mod train;
pub mod wsl;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
