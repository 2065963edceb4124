//! Minimal dense linear-algebra and differentiable-kernel layer.
//!
//! Pure functions over immutable inputs; safe to share across threads.
//! Backward passes for the composite fusion/scoring pipeline are hand-written
//! in `matcher` and validated against [`finite_diff_grad`].

mod adam;
mod fd;
mod mat;
mod ops;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use fd::{finite_diff_grad, max_relative_error, relative_error};
pub use mat::{Grad, Mat};
pub use ops::{
    cosine, cosine_clamped, dot, matmul, matmul_transpose_a, matmul_transpose_b, norm,
    sdp_attention, softmax_rows, COSINE_NORM_EPS,
};

pub(crate) use ops::{softmax_row_in_place, softmax_rows_backward};
