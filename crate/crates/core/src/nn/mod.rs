//! Neural operators with forward and backward passes: convolution with
//! dilation, pooling, batch normalization, dropout and channel concatenation.

mod batchnorm;
mod concat;
mod conv;
mod dropout;
pub(crate) mod gemm;
mod pool;

pub use batchnorm::{batch_norm, BatchNormSpec, BatchStats, RunningStats};
pub use concat::concat_channels;
pub use conv::{conv2d, conv_output_size, dilate_equivalence_oracle, dilate_kernel, Conv2dSpec};
pub use dropout::dropout;
pub use pool::{avg_pool2d, max_pool2d, max_pool2d_padded, upsample_nearest};

/// Whether layers use batch statistics and stochastic regularization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
