//! CPU latency study of the masked FFN forward pass.
//!
//! Three strategies compute `y = W2 (Act(W1 x) ⊙ m)` for every token:
//!
//! * `naive` materializes the full hidden layer, applies the mask in a
//!   separate pass and runs a second full matmul.
//! * `masked-dense` keeps both full-shape matmuls but folds activation and
//!   mask into one in-place pass between them.
//! * `fused` visits only the retained hidden units of each token, computing
//!   the activation, the mask product and the `W2` accumulation in a single
//!   traversal over cache-sized blocks of units.

use std::hint::black_box;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::experts::Activation;
use crate::kernels::{self, active_count, gemm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Naive,
    Fused,
    MaskedDense,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Naive, Strategy::Fused, Strategy::MaskedDense];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Fused => "fused",
            Strategy::MaskedDense => "masked-dense",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (expected naive, fused or masked-dense)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub d_in: usize,
    pub d_ff: usize,
    pub d_out: usize,
    pub batch: usize,
    pub seq: usize,
    pub active_rates: Vec<f64>,
    pub repeats: usize,
    pub warmup_iters: usize,
    pub strategies: Vec<Strategy>,
    pub precision: Precision,
    pub activation: Activation,
    /// Hidden units per block in the fused traversal.
    pub block: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_in: 512,
            d_ff: 2048,
            d_out: 512,
            batch: 4,
            seq: 256,
            active_rates: vec![0.125, 0.25, 0.5, 0.75, 1.0],
            repeats: 30,
            warmup_iters: 5,
            strategies: Strategy::ALL.to_vec(),
            precision: Precision::F32,
            activation: Activation::Gelu,
            block: 256,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.repeats < 5 {
            return bad(format!("bench repeats must be at least 5, got {}", self.repeats));
        }
        if self.active_rates.is_empty() {
            return bad("bench needs at least one active rate".into());
        }
        if let Some(r) = self.active_rates.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            return bad(format!("active rate {r} is outside (0, 1]"));
        }
        if self.strategies.is_empty() {
            return bad("bench needs at least one strategy".into());
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return bad(format!("strategy {s} listed twice"));
            }
        }
        if self.d_in == 0 || self.d_ff == 0 || self.d_out == 0 || self.tokens() == 0 || self.block == 0 {
            return bad("bench shapes and block size must be positive".into());
        }
        Ok(())
    }
}

/// FFN weights in the layouts each strategy wants. `w2t` is `W2ᵀ`, stored
/// once so the fused pass reads contiguous rows.
#[derive(Clone, Debug)]
pub struct FfnWeights<T> {
    pub d_in: usize,
    pub d_ff: usize,
    pub d_out: usize,
    /// `[d_ff, d_in]`
    pub w1: Vec<T>,
    /// `[d_out, d_ff]`
    pub w2: Vec<T>,
    /// `[d_ff, d_out]`
    pub w2t: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> FfnWeights<T> {
    pub fn new(d_in: usize, d_ff: usize, d_out: usize, w1: Vec<T>, w2: Vec<T>, activation: Activation) -> Result<Self> {
        if w1.len() != d_ff * d_in || w2.len() != d_out * d_ff {
            return Err(dim_err!(
                "weights of {} and {} values do not fit d_in={d_in}, d_ff={d_ff}, d_out={d_out}",
                w1.len(),
                w2.len()
            ));
        }
        finite(&w1, "W1")?;
        finite(&w2, "W2")?;
        let w2t = kernels::transpose(&w2, d_out, d_ff);
        Ok(Self { d_in, d_ff, d_out, w1, w2, w2t, activation })
    }

    /// Gaussian weights scaled by `1/√fan_in`.
    pub fn random(d_in: usize, d_ff: usize, d_out: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let w1 = randn(d_ff * d_in, 1.0 / (d_in as f64).sqrt(), rng);
        let w2 = randn(d_out * d_ff, 1.0 / (d_ff as f64).sqrt(), rng);
        let w2t = kernels::transpose(&w2, d_out, d_ff);
        Self { d_in, d_ff, d_out, w1, w2, w2t, activation }
    }
}

/// A per-token hidden-unit mask, held both densely and as ascending lists
/// of retained units.
#[derive(Clone, Debug)]
pub struct BenchMask<T> {
    pub tokens: usize,
    pub d_ff: usize,
    /// `[tokens, d_ff]`
    pub dense: Vec<T>,
    /// Start of each token's run in `units`; `tokens + 1` entries.
    pub offsets: Vec<usize>,
    pub units: Vec<u32>,
}

impl<T: Real> BenchMask<T> {
    /// Retains exactly the nonzero entries of `dense`.
    pub fn from_dense(dense: Vec<T>, tokens: usize, d_ff: usize) -> Result<Self> {
        if dense.len() != tokens * d_ff {
            return Err(dim_err!("mask of {} values is not [{tokens}, {d_ff}]", dense.len()));
        }
        finite(&dense, "mask")?;
        let mut offsets = Vec::with_capacity(tokens + 1);
        let mut units = Vec::new();
        offsets.push(0);
        for row in dense.chunks_exact(d_ff) {
            units.extend(row.iter().enumerate().filter(|(_, v)| **v != T::zero()).map(|(j, _)| j as u32));
            offsets.push(units.len());
        }
        Ok(Self { tokens, d_ff, dense, offsets, units })
    }

    /// Keeps the `keep` largest scores of each token at their own values.
    pub fn top_k(scores: &[T], tokens: usize, d_ff: usize, keep: usize) -> Result<Self> {
        if scores.len() != tokens * d_ff {
            return Err(dim_err!("scores of {} values are not [{tokens}, {d_ff}]", scores.len()));
        }
        if keep == 0 || keep > d_ff {
            return Err(contract_err!("cannot keep {keep} of {d_ff} units"));
        }
        finite(scores, "scores")?;
        let mut dense = vec![T::zero(); scores.len()];
        let mut offsets = Vec::with_capacity(tokens + 1);
        let mut units = Vec::with_capacity(tokens * keep);
        let mut scratch = Vec::new();
        offsets.push(0);
        for (t, row) in scores.chunks_exact(d_ff).enumerate() {
            kernels::top_k_into(row, keep, &mut scratch);
            for &j in &scratch {
                dense[t * d_ff + j] = row[j];
                units.push(j as u32);
            }
            offsets.push(units.len());
        }
        Ok(Self { tokens, d_ff, dense, offsets, units })
    }

    pub fn retained(&self, token: usize) -> &[u32] {
        &self.units[self.offsets[token]..self.offsets[token + 1]]
    }
}

fn finite<T: Real>(v: &[T], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("{what} has a non-finite value at {i}"))),
        None => Ok(()),
    }
}

fn randn<T: Real>(n: usize, std: f64, rng: &mut impl Rng) -> Vec<T> {
    (0..n).map(|_| <T as Real>::from_f64(std * rng.sample::<f64, _>(StandardNormal))).collect()
}

fn check<T: Real>(x: &[T], w: &FfnWeights<T>, mask: &BenchMask<T>) -> Result<usize> {
    if x.len() % w.d_in != 0 {
        return Err(dim_err!("input of {} values is not a multiple of d_in={}", x.len(), w.d_in));
    }
    let tokens = x.len() / w.d_in;
    if mask.tokens != tokens || mask.d_ff != w.d_ff {
        return Err(dim_err!("mask [{}, {}] does not match [{tokens}, {}]", mask.tokens, mask.d_ff, w.d_ff));
    }
    finite(x, "input")?;
    Ok(tokens)
}

fn act<T: Real>(a: Activation, v: T) -> T {
    match a {
        Activation::Gelu => kernels::gelu(v),
        Activation::Relu => v.max(T::zero()),
    }
}

/// Two full matmuls around a materialized hidden layer and a separate mask
/// product. `x` is `[tokens, d_in]`; the result is `[tokens, d_out]`.
pub fn ffn_naive<T: Real>(x: &[T], w: &FfnWeights<T>, mask: &BenchMask<T>) -> Result<Vec<T>> {
    let tokens = check(x, w, mask)?;
    Ok(naive_kernel(x, w, mask, tokens))
}

/// Full-shape matmuls with activation and mask applied in place between
/// them.
pub fn ffn_masked_dense<T: Real>(x: &[T], w: &FfnWeights<T>, mask: &BenchMask<T>) -> Result<Vec<T>> {
    let tokens = check(x, w, mask)?;
    Ok(masked_dense_kernel(x, w, mask, tokens))
}

/// Single traversal over the retained units only, in blocks of `block`
/// hidden units.
pub fn ffn_fused<T: Real>(x: &[T], w: &FfnWeights<T>, mask: &BenchMask<T>, block: usize) -> Result<Vec<T>> {
    let tokens = check(x, w, mask)?;
    if block == 0 {
        return Err(contract_err!("fused block size must be positive"));
    }
    Ok(fused_kernel(x, w, mask, tokens, block))
}

fn naive_kernel<T: Real>(x: &[T], w: &FfnWeights<T>, mask: &BenchMask<T>, tokens: usize) -> Vec<T> {
    let mut a = vec![T::zero(); tokens * w.d_ff];
    gemm(false, true, tokens, w.d_ff, w.d_in, x, &w.w1, T::zero(), &mut a);
    let h: Vec<T> = a.iter().map(|&v| act(w.activation, v)).collect();
    let hm: Vec<T> = h.iter().zip(&mask.dense).map(|(&h, &m)| h * m).collect();
    let mut y = vec![T::zero(); tokens * w.d_out];
    gemm(false, true, tokens, w.d_out, w.d_ff, &hm, &w.w2, T::zero(), &mut y);
    y
}

fn masked_dense_kernel<T: Real>(x: &[T], w: &FfnWeights<T>, mask: &BenchMask<T>, tokens: usize) -> Vec<T> {
    let mut a = vec![T::zero(); tokens * w.d_ff];
    gemm(false, true, tokens, w.d_ff, w.d_in, x, &w.w1, T::zero(), &mut a);
    for (v, &m) in a.iter_mut().zip(&mask.dense) {
        *v = act(w.activation, *v) * m;
    }
    let mut y = vec![T::zero(); tokens * w.d_out];
    gemm(false, true, tokens, w.d_out, w.d_ff, &a, &w.w2, T::zero(), &mut y);
    y
}

fn fused_kernel<T: Real>(x: &[T], w: &FfnWeights<T>, mask: &BenchMask<T>, tokens: usize, block: usize) -> Vec<T> {
    let (d_in, d_out, d_ff) = (w.d_in, w.d_out, w.d_ff);
    let mut y = vec![T::zero(); tokens * d_out];
    let simd = simd::usable::<T>(d_in, d_out);
    // per-token position in its ascending list of retained units
    let mut cursor: Vec<usize> = mask.offsets[..tokens].to_vec();
    // Blocks of units are the outer loop so their W1 and W2ᵀ rows stay in
    // cache while every token visits its retained units inside the block.
    let mut lo = 0;
    while lo < d_ff {
        let hi = (lo + block).min(d_ff);
        for t in 0..tokens {
            let start = cursor[t];
            let n = mask.units[start..mask.offsets[t + 1]].partition_point(|&j| (j as usize) < hi);
            cursor[t] = start + n;
            let units = &mask.units[start..start + n];
            if units.is_empty() {
                continue;
            }
            let xt = &x[t * d_in..(t + 1) * d_in];
            let yt = &mut y[t * d_out..(t + 1) * d_out];
            let mt = &mask.dense[t * d_ff..(t + 1) * d_ff];
            if simd {
                // SAFETY: `usable` confirmed the element type and CPU support.
                unsafe { simd::token_pass(xt, yt, units, mt, w) };
            } else {
                token_pass(xt, yt, units, mt, w);
            }
        }
        lo = hi;
    }
    y
}

/// Retained units of one token handled per pass; each load of `x` or `y`
/// feeds this many FMAs.
const GROUP: usize = 8;
const LANES: usize = 8;

/// `y += Σ_j W2ᵀ[j] · Act(W1[j] · x) · m[j]` over `units`.
fn token_pass<T: Real>(x: &[T], y: &mut [T], units: &[u32], m: &[T], w: &FfnWeights<T>) {
    let (d_in, d_out) = (w.d_in, w.d_out);
    let mut groups = units.chunks_exact(GROUP);
    for g in &mut groups {
        let j: [usize; GROUP] = std::array::from_fn(|r| g[r] as usize);
        let h = dot_rows::<T, GROUP>(std::array::from_fn(|r| &w.w1[j[r] * d_in..(j[r] + 1) * d_in]), x);
        let v: [T; GROUP] = std::array::from_fn(|r| act(w.activation, h[r]) * m[j[r]]);
        axpy_rows::<T, GROUP>(v, std::array::from_fn(|r| &w.w2t[j[r] * d_out..(j[r] + 1) * d_out]), y);
    }
    for &j in groups.remainder() {
        let j = j as usize;
        let [h] = dot_rows([&w.w1[j * d_in..(j + 1) * d_in]], x);
        axpy_rows([act(w.activation, h) * m[j]], [&w.w2t[j * d_out..(j + 1) * d_out]], y);
    }
}

/// `[rows[r] · x for r]`, loading each slice of `x` once for all rows.
#[inline(always)]
fn dot_rows<T: Real, const N: usize>(rows: [&[T]; N], x: &[T]) -> [T; N] {
    let (xc, xt) = x.as_chunks::<LANES>();
    let n = xc.len();
    let rc: [&[[T; LANES]]; N] = rows.map(|r| &r.as_chunks::<LANES>().0[..n]);
    let mut acc = [[T::zero(); LANES]; N];
    for c in 0..n {
        let xv = xc[c];
        for r in 0..N {
            let wv = rc[r][c];
            for l in 0..LANES {
                acc[r][l] = wv[l].mul_add(xv[l], acc[r][l]);
            }
        }
    }
    std::array::from_fn(|r| {
        let mut a = acc[r];
        let mut width = LANES;
        while width > 1 {
            width /= 2;
            for l in 0..width {
                a[l] = a[l] + a[l + width];
            }
        }
        let mut s = a[0];
        for (i, &xi) in xt.iter().enumerate() {
            s = rows[r][n * LANES + i].mul_add(xi, s);
        }
        s
    })
}

/// `y += Σ_r alpha[r] · rows[r]`, reading and writing `y` once.
#[inline(always)]
fn axpy_rows<T: Real, const N: usize>(alpha: [T; N], rows: [&[T]; N], y: &mut [T]) {
    let (yc, yt) = y.as_chunks_mut::<LANES>();
    let n = yc.len();
    let rc: [&[[T; LANES]]; N] = rows.map(|r| &r.as_chunks::<LANES>().0[..n]);
    for c in 0..n {
        let mut yv = yc[c];
        for r in 0..N {
            let wv = rc[r][c];
            for l in 0..LANES {
                yv[l] = alpha[r].mul_add(wv[l], yv[l]);
            }
        }
        yc[c] = yv;
    }
    for (i, yi) in yt.iter_mut().enumerate() {
        for r in 0..N {
            *yi = alpha[r].mul_add(rows[r][n * LANES + i], *yi);
        }
    }
}

/// Explicit AVX-512 version of [`token_pass`] for `f32`.
mod simd {
    use super::{act, FfnWeights, GROUP};
    use crate::kernels::Real;
    use std::any::TypeId;

    pub(super) fn usable<T: Real>(d_in: usize, d_out: usize) -> bool {
        #[cfg(target_arch = "x86_64")]
        {
            TypeId::of::<T>() == TypeId::of::<f32>()
                && d_in % 16 == 0
                && d_out % 16 == 0
                && std::arch::is_x86_feature_detected!("avx512f")
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            let _ = (d_in, d_out);
            false
        }
    }

    /// # Safety
    /// Only valid after [`usable`] returned true for `T` and these widths.
    pub(super) unsafe fn token_pass<T: Real>(x: &[T], y: &mut [T], units: &[u32], m: &[T], w: &FfnWeights<T>) {
        #[cfg(target_arch = "x86_64")]
        {
            let cast = |s: &[T]| std::slice::from_raw_parts(s.as_ptr() as *const f32, s.len());
            let y = std::slice::from_raw_parts_mut(y.as_mut_ptr() as *mut f32, y.len());
            pass_f32(cast(x), y, units, cast(m), cast(&w.w1), cast(&w.w2t), w);
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            let _ = (x, y, units, m, w);
            unreachable!()
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn pass_f32<T: Real>(x: &[f32], y: &mut [f32], units: &[u32], m: &[f32], w1: &[f32], w2t: &[f32], w: &FfnWeights<T>) {
        use std::arch::x86_64::*;
        let (d_in, d_out) = (w.d_in, w.d_out);
        let (xp, yp) = (x.as_ptr(), y.as_mut_ptr());
        let mut groups = units.chunks_exact(GROUP);
        for g in &mut groups {
            let r1: [*const f32; GROUP] = std::array::from_fn(|r| w1.as_ptr().add(g[r] as usize * d_in));
            let r2: [*const f32; GROUP] = std::array::from_fn(|r| w2t.as_ptr().add(g[r] as usize * d_out));
            let mut acc = [_mm512_setzero_ps(); GROUP];
            for c in (0..d_in).step_by(16) {
                let xv = _mm512_loadu_ps(xp.add(c));
                for r in 0..GROUP {
                    acc[r] = _mm512_fmadd_ps(_mm512_loadu_ps(r1[r].add(c)), xv, acc[r]);
                }
            }
            let v: [__m512; GROUP] = std::array::from_fn(|r| {
                let j = g[r] as usize;
                let h = _mm512_reduce_add_ps(acc[r]);
                _mm512_set1_ps(act(w.activation, h) * m[j])
            });
            for c in (0..d_out).step_by(16) {
                let mut yv = _mm512_loadu_ps(yp.add(c));
                for r in 0..GROUP {
                    yv = _mm512_fmadd_ps(v[r], _mm512_loadu_ps(r2[r].add(c)), yv);
                }
                _mm512_storeu_ps(yp.add(c), yv);
            }
        }
        for &j in groups.remainder() {
            let j = j as usize;
            let r1 = w1.as_ptr().add(j * d_in);
            let mut acc = _mm512_setzero_ps();
            for c in (0..d_in).step_by(16) {
                acc = _mm512_fmadd_ps(_mm512_loadu_ps(r1.add(c)), _mm512_loadu_ps(xp.add(c)), acc);
            }
            let v = _mm512_set1_ps(act(w.activation, _mm512_reduce_add_ps(acc)) * m[j]);
            let r2 = w2t.as_ptr().add(j * d_out);
            for c in (0..d_out).step_by(16) {
                let yv = _mm512_fmadd_ps(v, _mm512_loadu_ps(r2.add(c)), _mm512_loadu_ps(yp.add(c)));
                _mm512_storeu_ps(yp.add(c), yv);
            }
        }
    }
}

/// `‖a − b‖ / max(‖b‖, tiny)`, computed in f64.
pub fn relative_error<T: Real>(a: &[T], b: &[T]) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (Real::to_f64(x), Real::to_f64(y));
        num += (x - y) * (x - y);
        den += y * y;
    }
    num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE)
}

/// Equivalence tolerance against the naive reference.
pub fn tolerance(p: Precision) -> f64 {
    match p {
        Precision::F32 => 1e-6,
        Precision::F64 => 1e-12,
    }
}

pub fn checksum<T: Real>(y: &[T]) -> f64 {
    y.iter().map(|v| Real::to_f64(*v)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRecord {
    pub strategy: Strategy,
    pub active_rate: f64,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub tokens_per_s: f64,
    /// Sum of the output in f64.
    pub checksum: f64,
    /// Relative distance of the output from the naive reference.
    pub rel_err: f64,
    /// `p90 / p10 > 2`.
    pub unstable: bool,
}

/// A cell whose output disagreed with the reference; no timing was taken.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceFailure {
    pub strategy: Strategy,
    pub active_rate: f64,
    pub rel_err: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub records: Vec<LatencyRecord>,
    pub failures: Vec<EquivalenceFailure>,
}

impl BenchReport {
    pub fn record(&self, s: Strategy, rate: f64) -> Option<&LatencyRecord> {
        self.records.iter().find(|r| r.strategy == s && r.active_rate == rate)
    }

    pub fn into_result(self) -> Result<Self> {
        match self.failures.first() {
            None => Ok(self),
            Some(f) => Err(Error::Correctness(format!(
                "{} at active rate {} differs from the naive reference by {:.3e} (tolerance {:.0e})",
                f.strategy, f.active_rate, f.rel_err, f.tolerance
            ))),
        }
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

static RUNNING: AtomicBool = AtomicBool::new(false);

/// Held for the duration of a measurement; a second concurrent holder is
/// refused.
pub struct Exclusive(());

impl Exclusive {
    pub fn acquire() -> Result<Self> {
        RUNNING
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| Exclusive(()))
            .map_err(|_| contract_err!("another latency measurement is already running"))
    }
}

impl Drop for Exclusive {
    fn drop(&mut self) {
        RUNNING.store(false, Ordering::Release);
    }
}

/// Pins the calling thread to the CPU it is on and restores the previous
/// affinity on drop.
struct Pin {
    #[cfg(target_os = "linux")]
    previous: Option<libc::cpu_set_t>,
}

impl Pin {
    #[cfg(target_os = "linux")]
    fn here() -> Self {
        // SAFETY: cpu_set_t is plain data; the calls only read and write the
        // sets passed by pointer.
        unsafe {
            let mut prev: libc::cpu_set_t = std::mem::zeroed();
            let size = std::mem::size_of::<libc::cpu_set_t>();
            if libc::sched_getaffinity(0, size, &mut prev) != 0 {
                return Self { previous: None };
            }
            let cpu = libc::sched_getcpu();
            if cpu < 0 {
                return Self { previous: None };
            }
            let mut one: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu as usize, &mut one);
            if libc::sched_setaffinity(0, size, &one) != 0 {
                return Self { previous: None };
            }
            Self { previous: Some(prev) }
        }
    }

    #[cfg(not(target_os = "linux"))]
    fn here() -> Self {
        Self {}
    }
}

impl Drop for Pin {
    fn drop(&mut self) {
        #[cfg(target_os = "linux")]
        if let Some(prev) = &self.previous {
            // SAFETY: restores a set previously returned by the kernel.
            unsafe {
                libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), prev);
            }
        }
    }
}

/// Runs every (strategy, rate) cell single-threaded on this CPU. Outputs
/// are checked against the naive reference before any timing; cells that
/// fail are listed in `failures` and carry no latency.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let _guard = Exclusive::acquire()?;
    let _pin = Pin::here();
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

fn run_typed<T: Real>(cfg: &BenchConfig) -> Result<BenchReport> {
    let tokens = cfg.tokens();
    let w = FfnWeights::<T>::random(cfg.d_in, cfg.d_ff, cfg.d_out, cfg.activation, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let tol = tolerance(cfg.precision);
    let mut report = BenchReport::default();
    for (ri, &rate) in cfg.active_rates.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + ri as u64));
        let x = randn::<T>(tokens * cfg.d_in, 1.0, &mut rng);
        let scores = randn::<T>(tokens * cfg.d_ff, 1.0, &mut rng);
        let mask = BenchMask::top_k(&scores, tokens, cfg.d_ff, active_count(rate, cfg.d_ff))?;
        let reference = naive_kernel(&x, &w, &mask, tokens);
        finite(&reference, "reference output")?;
        for &s in &cfg.strategies {
            let run = || match s {
                Strategy::Naive => naive_kernel(&x, &w, &mask, tokens),
                Strategy::Fused => fused_kernel(&x, &w, &mask, tokens, cfg.block),
                Strategy::MaskedDense => masked_dense_kernel(&x, &w, &mask, tokens),
            };
            let y = run();
            let rel_err = relative_error(&y, &reference);
            if !(rel_err <= tol) {
                report.failures.push(EquivalenceFailure { strategy: s, active_rate: rate, rel_err, tolerance: tol });
                continue;
            }
            for _ in 0..cfg.warmup_iters {
                black_box(run());
            }
            let mut times = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let start = Instant::now();
                black_box(run());
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(f64::total_cmp);
            let (p10, median, p90) = (percentile(&times, 0.1), percentile(&times, 0.5), percentile(&times, 0.9));
            report.records.push(LatencyRecord {
                strategy: s,
                active_rate: rate,
                median_ms: median,
                p10_ms: p10,
                p90_ms: p90,
                tokens_per_s: tokens as f64 / (median / 1e3),
                checksum: checksum(&y),
                rel_err,
                unstable: p90 > 2.0 * p10,
            });
        }
    }
    Ok(report)
}

pub const CSV_HEADER: &str = "strategy,active_rate,median_ms,p10_ms,p90_ms,tokens_per_s,checksum_ok,unstable";

/// One row per cell in run order; failed cells have empty timing fields.
pub fn bench_csv(cfg: &BenchConfig, report: &BenchReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for &rate in &cfg.active_rates {
        for &s in &cfg.strategies {
            if let Some(r) = report.record(s, rate) {
                out.push_str(&format!(
                    "{},{},{:.4},{:.4},{:.4},{:.1},true,{}\n",
                    s, rate, r.median_ms, r.p10_ms, r.p90_ms, r.tokens_per_s, r.unstable
                ));
            } else if report.failures.iter().any(|f| f.strategy == s && f.active_rate == rate) {
                out.push_str(&format!("{s},{rate},,,,,false,\n"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.1), 1.0);
        assert_eq!(percentile(&v, 0.5), 5.0);
        assert_eq!(percentile(&v, 0.9), 9.0);
        assert_eq!(percentile(&[3.0], 0.9), 3.0);
    }

    #[test]
    fn config_bounds() {
        assert!(BenchConfig::default().validate().is_ok());
        assert!(BenchConfig { repeats: 4, ..Default::default() }.validate().is_err());
        assert!(BenchConfig { active_rates: vec![0.0], ..Default::default() }.validate().is_err());
        assert!(BenchConfig { active_rates: vec![1.5], ..Default::default() }.validate().is_err());
        assert!(BenchConfig { strategies: vec![Strategy::Naive, Strategy::Naive], ..Default::default() }.validate().is_err());
    }
}
