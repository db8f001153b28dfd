//! Scalar abstraction and the dense kernels shared by the model's forward
//! and backward passes.
//!
//! Everything operates on row-major slices. Matrix products go through
//! `matrixmultiply`; the rest are plain loops. The model is generic over
//! [`Real`] so the same code trains in `f32` and gradient-checks in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * a * b + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Strides and dimensions must address memory inside the given slices;
    /// callers go through [`matmul`], which checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Transposition flag for [`matmul`] operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// `c (m×n) = alpha · op(a) (m×k) · op(b) (k×n) + beta · c`.
///
/// `a` is stored row-major as m×k when `ta == Op::N` and as k×m when
/// `ta == Op::T`; likewise for `b`. With `beta == 0` the prior contents of
/// `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn matmul<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    ta: Op,
    b: &[F],
    tb: Op,
    beta: F,
    c: &mut [F],
) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    assert_eq!(c.len(), m * n, "output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == F::ZERO {
            c.fill(F::ZERO);
        } else {
            c.iter_mut().for_each(|x| *x *= beta);
        }
        return;
    }
    let (rsa, csa) = match ta {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: lengths were checked above against the shapes the strides describe.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
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

/// `y = x · w + b` for `n` rows.
pub fn linear_forward<F: Real>(
    x: &[F],
    n: usize,
    d_in: usize,
    w: &[F],
    b: Option<&[F]>,
    d_out: usize,
    y: &mut [F],
) {
    matmul(n, d_in, d_out, F::ONE, x, Op::N, w, Op::N, F::ZERO, y);
    if let Some(b) = b {
        for row in y.chunks_exact_mut(d_out) {
            for (v, &bi) in row.iter_mut().zip(b) {
                *v += bi;
            }
        }
    }
}

/// Gradient of [`linear_forward`]. Parameter gradients and `dx` (when
/// given) are accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Real>(
    x: &[F],
    dy: &[F],
    n: usize,
    d_in: usize,
    d_out: usize,
    w: &[F],
    dw: &mut [F],
    db: Option<&mut [F]>,
    dx: Option<&mut [F]>,
) {
    matmul(d_in, n, d_out, F::ONE, x, Op::T, dy, Op::N, F::ONE, dw);
    if let Some(db) = db {
        for row in dy.chunks_exact(d_out) {
            for (g, &v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    if let Some(dx) = dx {
        matmul(n, d_out, d_in, F::ONE, dy, Op::N, w, Op::T, F::ONE, dx);
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Saved statistics for the layer-norm backward pass.
#[derive(Debug, Clone, Default)]
pub struct NormCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn layer_norm_forward<F: Real>(
    x: &[F],
    d: usize,
    gain: &[F],
    bias: &[F],
    y: &mut [F],
    cache: Option<&mut NormCache<F>>,
) {
    let n = x.len() / d;
    let eps = F::from_f64(LN_EPS);
    let inv_d = F::from_f64(1.0 / d as f64);
    let mut cache = cache;
    if let Some(c) = cache.as_deref_mut() {
        c.xhat.resize(x.len(), F::ZERO);
        c.rstd.resize(n, F::ZERO);
    }
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row
            .iter()
            .map(|&v| {
                let c = v - mean;
                c * c
            })
            .sum::<F>()
            * inv_d;
        let rstd = F::ONE / (var + eps).sqrt();
        let out = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            let xh = (row[i] - mean) * rstd;
            out[i] = xh * gain[i] + bias[i];
        }
        if let Some(c) = cache.as_deref_mut() {
            c.rstd[r] = rstd;
            for i in 0..d {
                c.xhat[r * d + i] = (row[i] - mean) * rstd;
            }
        }
    }
}

/// Accumulates into `dgain`, `dbias`, and `dx`.
pub fn layer_norm_backward<F: Real>(
    dy: &[F],
    d: usize,
    gain: &[F],
    cache: &NormCache<F>,
    dgain: &mut [F],
    dbias: &mut [F],
    dx: &mut [F],
) {
    let n = dy.len() / d;
    let inv_d = F::from_f64(1.0 / d as f64);
    let mut dxhat = vec![F::ZERO; d];
    for r in 0..n {
        let g = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = F::ZERO;
        let mut mean_dxhat_xhat = F::ZERO;
        for i in 0..d {
            dgain[i] += g[i] * xh[i];
            dbias[i] += g[i];
            dxhat[i] = g[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rstd = cache.rstd[r];
        let out = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            out[i] += rstd * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_forward<F: Real>(x: &[F], y: &mut [F]) {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    for (o, &v) in y.iter_mut().zip(x) {
        let t = (c * (v + a * v * v * v)).tanh();
        *o = half * v * (F::ONE + t);
    }
}

/// `dx = dy · gelu'(x)`, overwriting `dx`.
pub fn gelu_backward<F: Real>(x: &[F], dy: &[F], dx: &mut [F]) {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let three_a = F::from_f64(3.0 * GELU_A);
    let half = F::from_f64(0.5);
    for ((o, &v), &g) in dx.iter_mut().zip(x).zip(dy) {
        let t = (c * (v + a * v * v * v)).tanh();
        let dt = (F::ONE - t * t) * c * (F::ONE + three_a * v * v);
        *o = g * (half * (F::ONE + t) + half * v * dt);
    }
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<F: Real>(v: &mut [F]) {
    let mut max = v[0];
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::ZERO;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = F::ONE / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// `log(sum(exp(v)))` accumulated in `f64`.
pub fn log_sum_exp<F: Real>(v: &[F]) -> f64 {
    let max = v.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|x| (x.to_f64() - max).exp()).sum();
    max + s.ln()
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut s = F::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub fn add_assign<F: Real>(y: &mut [F], x: &[F]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += v;
    }
}
