//! Floating-point element type shared by every numerical routine in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type of tensors, losses and model parameters.
///
/// Anything implementing [`Float`] can serve; `f32` and `f64` route matrix
/// products through a blocked GEMM kernel, other types fall back to the
/// naive triple loop in [`Scalar::gemm`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64`; constants in the code base are
    /// always representable.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant not representable")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("count not representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c (m×n) = op(a) · op(b)`, adding into `c` when `accumulate` is set.
    ///
    /// `a` is stored row-major as m×k, or as k×m when `a_t` is set; `b`
    /// likewise as k×n or n×k.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    ) {
        check_gemm_dims(m, k, n, a, b, c);
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = Self::zero());
        }
        for i in 0..m {
            for p in 0..k {
                let av = if a_t { a[p * m + i] } else { a[i * k + p] };
                if av == Self::zero() {
                    continue;
                }
                let row = &mut c[i * n..(i + 1) * n];
                for (j, cv) in row.iter_mut().enumerate() {
                    let bv = if b_t { b[j * k + p] } else { b[p * n + j] };
                    *cv += av * bv;
                }
            }
        }
    }
}

#[inline]
fn check_gemm_dims<T>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &[T]) {
    assert!(a.len() >= m * k, "gemm: lhs has {} elements, need {}", a.len(), m * k);
    assert!(b.len() >= k * n, "gemm: rhs has {} elements, need {}", b.len(), k * n);
    assert!(c.len() >= m * n, "gemm: out has {} elements, need {}", c.len(), m * n);
}

#[inline]
fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // stored matrix is rows×cols (logical); transposed storage is cols×rows
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! blas_like_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                check_gemm_dims(m, k, n, a, b, c);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: dimensions and strides describe regions inside the
                // checked slice lengths above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
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
        }
    };
}

blas_like_scalar!(f32, matrixmultiply::sgemm);
blas_like_scalar!(f64, matrixmultiply::dgemm);
