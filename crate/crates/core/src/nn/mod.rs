//! Differentiable building blocks for the CRNN.
//!
//! Every operation is a pair of free functions: a forward pass and an exact
//! analytic backward pass. There is no graph tape; the model composes the
//! backward functions in reverse order itself.
//!
//! All functions are generic over [`Real`], so the same code runs in 64-bit
//! precision for gradient verification and 32-bit for training/inference.

mod conv;
pub mod gradcheck;
mod linear;
mod lstm;
mod norm;
mod pool;
mod softmax;
mod tensor;

pub use conv::{conv2d, conv2d_backward, conv_output_size, Conv2dGrads};
pub use linear::{linear, linear_backward, LinearGrads};
pub use lstm::{bilstm, bilstm_backward, BiLstmCache, BiLstmGrads, LstmGrads, LstmWeights};
pub use norm::{group_norm, group_norm_backward, GroupNormCache, GroupNormGrads};
pub use pool::{maxpool2d, maxpool2d_backward, pool_output_size, PoolCache};
pub use softmax::{log_softmax, log_softmax_backward, relu_backward, relu_inplace};
pub use tensor::{ParamTensor, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::Shape(msg.into())
}

/// Row-major GEMM: `c = a' * b' (+ c if accumulate)` where `a'` is `[m, k]` and
/// `b'` is `[k, n]`. With `a_trans` the slice `a` holds `[k, m]`; with
/// `b_trans` the slice `b` holds `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    a_trans: bool,
    b: &[R],
    b_trans: bool,
    c: &mut [R],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: a too short");
    assert!(b.len() >= k * n, "gemm: b too short");
    assert!(c.len() >= m * n, "gemm: c too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = R::zero());
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { R::one() } else { R::zero() };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            R::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
