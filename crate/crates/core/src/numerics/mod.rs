//! Dense tensors and the small linear-algebra kernels everything else sits on.

mod linalg;
mod scalar;
mod svd;
mod tensor;

pub use linalg::{cosine_similarity, frobenius_norm, gemm, least_squares_lowrank, matmul};
pub use scalar::Scalar;
pub use svd::{svd, SvdResult};
pub use tensor::Tensor;
