//! Dense tensors, value-level kernels, and the reverse-mode tape.

mod kernels;
mod tape;
mod tensor;

pub use kernels::{
    batchnorm, dot, l2_normalize, matmul, normalize_rows_in_place, softmax, BatchNormState,
    BatchStats, Mode, BN_EPS, BN_MOMENTUM,
};
pub use tape::{Fault, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use kernels::{absorb_stats, gemm, weighted_log_ratio};

/// Cosine similarity matrix between the rows of `a` (n×d) and `b` (m×d).
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> crate::Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(crate::error::shape_err("cosine_matrix", a.shape(), b.shape()));
    }
    let d = a.cols();
    let mut an = a.data().to_vec();
    let mut bn = b.data().to_vec();
    normalize_rows_in_place(&mut an, d, 1e-12);
    normalize_rows_in_place(&mut bn, d, 1e-12);
    let (n, m) = (a.rows(), b.rows());
    let mut out = vec![0.0; n * m];
    gemm(n, d, m, &an, false, &bn, true, &mut out, false);
    Ok(Tensor::from_parts(vec![n, m], out))
}
