//! Convolution operators built on a BLIS-style blocked GEMM.
//!
//! Three interchangeable back-ends compute the same convolution:
//!
//! - [`conv_direct`]: the seven-loop reference nest.
//! - [`conv_im2col_gemm`]: explicit im2col into a `(k_h·k_w·c_i) × (h_o·w_o·b)`
//!   matrix followed by [`gemm`].
//! - [`conv_gemm`]: the fused operator. The im2col transform happens inside the
//!   packing of the `Bc` buffer, so the unrolled matrix never exists.
//!
//! The [`sim`] module drives these kernels over whole CNN models.

pub mod conv;
pub mod convgemm;
mod error;
pub mod gemm;
pub mod scratch;
pub mod sim;
pub mod team;
pub mod tensor;

pub use conv::{conv_direct, conv_im2col_gemm, im2col, im2col_workspace_bytes};
pub use convgemm::{conv_gemm, decompose_col, decompose_row, pack_b_im2col, Im2colSource};
pub use error::{ConvError, Result};
pub use gemm::{gemm, pack_a, pack_b, zero_matrix, BlockingParams, GemmStats, PackingSource};
pub use tensor::{
    filters_as_matrix, gemm_dims, output_as_matrix, output_dims, ConvParams, Element, GemmDims, MatMut, MatRef, Matrix,
    Tensor4,
};
