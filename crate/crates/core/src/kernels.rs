//! Scalar kernels shared by the autodiff tape and the latency harness.
//!
//! Everything here works on flat row-major slices. Sharing one implementation
//! between the differentiable ops and the benchmark strategies is what makes
//! the naive benchmark path bit-identical to the expert forward.

use num_traits::Float;
use std::cmp::Ordering;
use std::fmt::Debug;

/// Floating-point element type with a dense GEMM backend.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    /// `C = alpha * A * B + beta * C` with arbitrary element strides.
    ///
    /// # Safety
    /// Strides and extents must describe in-bounds views of the pointed-to
    /// buffers, and `c` must not alias `a` or `b`.
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

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(
            m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc,
        );
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(
            m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc,
        );
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Row-major GEMM: `C[m×n] = op(A) · op(B) + beta · C`.
///
/// `A` is stored `m×k` (or `k×m` when `trans_a`), `B` is stored `k×n`
/// (or `n×k` when `trans_b`). Panics if a buffer is too short.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: A too short");
    assert!(b.len() >= k * n, "gemm: B too short");
    assert!(c.len() >= m * n, "gemm: C too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents checked above; strides describe the row-major storage.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU (the GPT-2 variant).
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    T::from_f64(0.5) * x * (T::one() + gelu_tanh(x))
}

/// The `tanh(√(2/π)(x + 0.044715x³))` factor of [`gelu`], via one `exp`.
#[inline]
pub fn gelu_tanh<T: Real>(x: T) -> T {
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    let two = T::from_f64(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

/// Derivative of [`gelu`] given `t = gelu_tanh(x)`.
#[inline]
pub fn gelu_grad_from(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_from(x, gelu_tanh(x))
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Number of retained units for an active fraction, `ceil(fraction · width)`
/// clamped to `[1, width]`.
///
/// A small slack absorbs representation error so that e.g. `0.1 · 30`
/// yields 3 rather than 4.
pub fn active_count(fraction: f64, width: usize) -> usize {
    let raw = (fraction * width as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(width.max(1))
}

/// Strict total order used by every top-k selection: larger value first,
/// lower index wins ties.
#[inline]
fn rank_order<T: Real>(row: &[T], a: usize, b: usize) -> Ordering {
    row[b]
        .partial_cmp(&row[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` largest entries of `row`, ascending by index.
///
/// Ties are broken toward the lowest index, so the result is a pure function
/// of the values.
pub fn top_k_indices<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    top_k_into(row, k, &mut idx);
    idx
}

/// Same as [`top_k_indices`] reusing a scratch buffer; on return `scratch`
/// holds exactly the selected indices in ascending order.
pub fn top_k_into<T: Real>(row: &[T], k: usize, scratch: &mut Vec<usize>) {
    let k = k.min(row.len());
    scratch.clear();
    scratch.extend(0..row.len());
    if k == 0 {
        scratch.clear();
        return;
    }
    if k < row.len() {
        scratch.select_nth_unstable_by(k - 1, |&a, &b| rank_order(row, a, b));
        scratch.truncate(k);
    }
    scratch.sort_unstable();
}

/// Keeps the `k` largest entries of each row of a `rows × width` buffer at
/// their original values and zeroes the rest.
pub fn top_k_mask_rows<T: Real>(values: &[T], width: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); values.len()];
    let mut scratch = Vec::with_capacity(width);
    for (src, dst) in values.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        top_k_into(src, k, &mut scratch);
        for &j in &scratch {
            dst[j] = src[j];
        }
    }
    out
}

/// Row-wise softmax of a `rows × width` buffer with max subtraction.
pub fn softmax_rows(values: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (src, dst) in values.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        let inv = 1.0 / sum;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    out
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Eight independent accumulators let the compiler keep the reduction in
    // vector registers.
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    let s0 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let s1 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    s0 + s1 + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Transposes a `rows × cols` row-major buffer.
pub fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}
