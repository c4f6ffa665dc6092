//! Forward and backward numeric kernels.

mod conv;
mod elementwise;
mod loss;

pub(crate) use conv::ConvGeometry;
pub use conv::{conv2d, conv2d_backward, conv2d_masked, conv_output_len, ConvGrads};
pub(crate) use elementwise::add_assign;
pub use elementwise::{
    add, maxpool2x2, maxpool2x2_backward, relu, relu_backward, upsample_nearest2x,
    upsample_nearest2x_backward,
};
pub use loss::softmax_ce_loss;

#[cfg(test)]
mod gradcheck;
#[cfg(test)]
pub(crate) mod testing;
