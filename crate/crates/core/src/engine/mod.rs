//! Minimal differentiable tensor engine for the fixed op set the NCA needs.
//!
//! Forward kernels live in [`ops`] and operate on plain [`Tensor`]s; the
//! [`Tape`] records the same kernels together with their adjoints so that
//! gradients can be pulled back through an unrolled rollout.

mod linalg;
mod meter;
pub mod ops;
mod tape;
mod tensor;

pub use meter::LiveMeter;
pub use ops::ResampleMode;
pub use tape::{Gradients, Tape, TapeMode, Var};
pub use tensor::Tensor;

use std::fmt::Debug;

use num_traits::Float;

/// Floating-point element type. `f32` is used for training and inference,
/// `f64` for gradient checking.
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static {
    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                linalg::check_extent(m, k, a.len(), rsa, csa);
                linalg::check_extent(k, n, b.len(), rsb, csb);
                linalg::check_extent(m, n, c.len(), rsc, csc);
                // SAFETY: the extents of all three operands were checked above.
                unsafe {
                    $gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc)
                }
            }

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Errors raised at engine op boundaries.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("value of node {0} was released and is no longer available")]
    Released(usize),
    #[error("backward is unavailable on an accounting-only tape")]
    AccountingOnly,
}

pub type Result<T> = std::result::Result<T, EngineError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(EngineError::Shape { op, detail: detail.into() })
}
