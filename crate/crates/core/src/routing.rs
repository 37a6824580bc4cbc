//! Routers: the diagonal-Gaussian density over the continuous expert index
//! space, its reparameterised sampler, the discrete softmax-over-top-k gate,
//! and neuron-utilisation statistics.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract_err, dim_err, Result};
use crate::kernels;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor added to the softplus scale so the router never collapses onto a
/// point mass.
pub const SIGMA_MIN: f64 = 1e-4;

/// Weights of the Gaussian router: optional hidden layers (GELU) followed by
/// one affine head for the mean and one for the pre-softplus scale.
#[derive(Clone, Debug)]
pub struct GaussianRouterParams {
    pub hidden: Vec<(Tensor, Tensor)>,
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    pub scale_w: Tensor,
    pub scale_b: Tensor,
}

impl GaussianRouterParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_z: usize, hidden_layers: usize, std: f64, rng: &mut R) -> Self {
        let hidden = (0..hidden_layers)
            .map(|_| (Tensor::randn(&[d_in, d_in], std, rng), Tensor::zeros(&[d_in])))
            .collect();
        Self {
            hidden,
            mu_w: Tensor::randn(&[d_z, d_in], std, rng),
            mu_b: Tensor::zeros(&[d_z]),
            scale_w: Tensor::randn(&[d_z, d_in], std, rng),
            scale_b: Tensor::zeros(&[d_z]),
        }
    }

    pub fn d_z(&self) -> usize {
        self.mu_w.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.mu_w.shape()[1]
    }

    /// Tensors in registration order (see [`GaussianRouterParams::bind`]).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.hidden.iter().flat_map(|(w, b)| [w, b]).collect();
        out.extend([&self.mu_w, &self.mu_b, &self.scale_w, &self.scale_b]);
        out
    }

    /// Records the weights as parameters `first..first + tensors().len()`.
    pub fn bind(&self, tape: &mut Tape, first: usize) -> Result<GaussianRouterVars> {
        let ts = self.tensors();
        let vars: Vec<Var> = ts.iter().enumerate().map(|(i, t)| tape.param(first + i, t)).collect::<Result<_>>()?;
        Ok(GaussianRouterVars::from_slice(&vars))
    }
}

/// Tape handles of the Gaussian router weights.
#[derive(Clone, Debug)]
pub struct GaussianRouterVars {
    pub hidden: Vec<(Var, Var)>,
    pub mu_w: Var,
    pub mu_b: Var,
    pub scale_w: Var,
    pub scale_b: Var,
}

impl GaussianRouterVars {
    /// Inverse of [`GaussianRouterParams::tensors`] ordering.
    pub fn from_slice(vars: &[Var]) -> Self {
        let n = vars.len();
        assert!(n >= 4 && (n - 4) % 2 == 0, "router expects 4 + 2·depth tensors");
        let hidden = vars[..n - 4].chunks_exact(2).map(|p| (p[0], p[1])).collect();
        Self { hidden, mu_w: vars[n - 4], mu_b: vars[n - 3], scale_w: vars[n - 2], scale_b: vars[n - 1] }
    }
}

/// Per-token mean and scale of `N(z | μ(x), diag σ(x)²)`, each `[batch, d_z]`.
#[derive(Clone, Copy, Debug)]
pub struct RouterOutput {
    pub mu: Var,
    pub sigma: Var,
}

/// `μ = W_μ h + b_μ`, `σ = softplus(W_s h + b_s) + σ_min` where `h` is `x`
/// passed through the optional hidden layers.
pub fn gaussian_route(tape: &mut Tape, router: &GaussianRouterVars, x: Var) -> Result<RouterOutput> {
    let mut h = x;
    for &(w, b) in &router.hidden {
        let a = tape.linear(h, w, Some(b))?;
        h = tape.gelu(a)?;
    }
    let mu = tape.linear(h, router.mu_w, Some(router.mu_b))?;
    let raw = tape.linear(h, router.scale_w, Some(router.scale_b))?;
    let sp = tape.softplus(raw)?;
    let sigma = tape.add_scalar(sp, SIGMA_MIN)?;
    Ok(RouterOutput { mu, sigma })
}

/// `K` reparameterised draws `z⁽ᵏ⁾ = μ + σ ⊙ ε⁽ᵏ⁾`.
#[derive(Clone, Debug)]
pub struct ExpertIndexSample {
    /// One `[batch, d_z]` node per sample.
    pub z: Vec<Var>,
    /// The standard-normal draws, one `batch · d_z` buffer per sample.
    pub epsilon: Vec<Vec<f64>>,
}

impl ExpertIndexSample {
    pub fn samples(&self) -> usize {
        self.z.len()
    }

    /// Stacks the samples into a `[batch, K, d_z]` tensor.
    pub fn z_tensor(&self, tape: &Tape) -> Tensor {
        let k = self.z.len();
        let (batch, d_z) = (tape.shape(self.z[0])[0], tape.shape(self.z[0])[1]);
        let mut data = vec![0.0; batch * k * d_z];
        for (s, &zv) in self.z.iter().enumerate() {
            let v = tape.value(zv);
            for b in 0..batch {
                data[(b * k + s) * d_z..(b * k + s + 1) * d_z].copy_from_slice(&v[b * d_z..(b + 1) * d_z]);
            }
        }
        Tensor::new(vec![batch, k, d_z], data).expect("finite samples")
    }
}

/// Draws `K` samples from the router output. Gradients reach `μ` and `σ`
/// with ε held fixed. With `noise` off every ε is zero, i.e. `z = μ`.
///
/// ε is consumed sample-major, then row-major within a sample, so a fixed
/// seed reproduces the same `z` bit for bit.
pub fn sample_z<R: Rng + ?Sized>(
    tape: &mut Tape,
    out: &RouterOutput,
    samples: usize,
    noise: bool,
    rng: &mut R,
) -> Result<ExpertIndexSample> {
    if samples == 0 {
        return Err(contract_err!("sample_z needs K ≥ 1"));
    }
    if tape.shape(out.mu) != tape.shape(out.sigma) {
        return Err(dim_err!("mu {:?} and sigma {:?} differ", tape.shape(out.mu), tape.shape(out.sigma)));
    }
    let shape = tape.shape(out.mu).to_vec();
    let n = tape.value(out.mu).len();
    let mut z = Vec::with_capacity(samples);
    let mut epsilon = Vec::with_capacity(samples);
    for _ in 0..samples {
        let eps: Vec<f64> = if noise { (0..n).map(|_| rng.sample(StandardNormal)).collect() } else { vec![0.0; n] };
        let e = tape.constant(shape.clone(), eps.clone())?;
        let spread = tape.mul(out.sigma, e)?;
        z.push(tape.add(out.mu, spread)?);
        epsilon.push(eps);
    }
    Ok(ExpertIndexSample { z, epsilon })
}

/// Gate of a discrete mixture: scores `g(x) = W x` over `n` experts, of
/// which the top `k` are used.
#[derive(Clone, Debug)]
pub struct DiscreteRouterParams {
    pub gate_w: Tensor,
    pub k: usize,
}

impl DiscreteRouterParams {
    pub fn new(gate_w: Tensor, k: usize) -> Result<Self> {
        let n = gate_w.shape()[0];
        if k == 0 || k > n {
            return Err(contract_err!("discrete router needs 1 ≤ k ≤ n, got k={k}, n={n}"));
        }
        Ok(Self { gate_w, k })
    }

    pub fn n(&self) -> usize {
        self.gate_w.shape()[0]
    }
}

/// Outcome of [`discrete_route`].
#[derive(Clone, Debug)]
pub struct DiscreteRouting {
    /// `batch × k` expert ids, ascending within each row.
    pub indices: Vec<usize>,
    /// `[batch, k]` softmax over the selected scores.
    pub weights: Var,
    /// `[batch, n]` raw scores.
    pub scores: Var,
    pub k: usize,
    pub n: usize,
}

impl DiscreteRouting {
    /// Weights scattered back to a dense `batch × n` layout, zero for
    /// unselected experts.
    pub fn dense_weights(&self, tape: &Tape) -> Vec<f64> {
        let w = tape.value(self.weights);
        let batch = w.len() / self.k;
        let mut out = vec![0.0; batch * self.n];
        for (p, (&i, &v)) in self.indices.iter().zip(w).enumerate() {
            out[(p / self.k) * self.n + i] = v;
        }
        out
    }
}

/// `p(i|x) = softmax(TopK(g(x)))_i`: the `k` highest scores per row (lowest
/// index wins ties) renormalised by softmax; the others get zero weight.
pub fn discrete_route(tape: &mut Tape, gate_w: Var, x: Var, k: usize) -> Result<DiscreteRouting> {
    let n = tape.shape(gate_w)[0];
    if k == 0 || k > n {
        return Err(contract_err!("discrete_route needs 1 ≤ k ≤ n, got k={k}, n={n}"));
    }
    let scores = tape.linear(x, gate_w, None)?;
    let mut indices = Vec::new();
    let mut scratch = Vec::with_capacity(n);
    for row in tape.value(scores).chunks_exact(n) {
        kernels::top_k_into(row, k, &mut scratch);
        indices.extend_from_slice(&scratch);
    }
    tape.record_selection(&indices);
    let picked = tape.gather_cols(scores, &indices)?;
    let weights = tape.softmax(picked)?;
    Ok(DiscreteRouting { indices, weights, scores, k, n })
}

/// Switch-style importance loss `n · Σᵢ fᵢ Pᵢ`, where `fᵢ` is the share of
/// routing slots assigned to expert `i` and `Pᵢ` the batch-mean of the full
/// softmax over scores. Equals 1 under perfectly uniform routing.
pub fn load_balance_loss(tape: &mut Tape, routing: &DiscreteRouting) -> Result<Var> {
    let n = routing.n;
    let batch = routing.indices.len() / routing.k;
    let mut frac = vec![0.0; n];
    for &i in &routing.indices {
        frac[i] += 1.0;
    }
    let slots = routing.indices.len() as f64;
    for f in &mut frac {
        *f /= slots;
    }
    let probs = tape.softmax(routing.scores)?;
    let ones = tape.constant(vec![1, batch], vec![1.0 / batch as f64; batch])?;
    let mean_p = tape.matmul(ones, probs)?;
    let f = tape.constant(vec![1, n], frac)?;
    let prod = tape.mul(mean_p, f)?;
    let s = tape.sum(prod)?;
    tape.scale(s, n as f64)
}

/// Selection counts over `width` units (FFN neurons, or experts for the
/// discrete baselines).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingStats {
    counts: Vec<u64>,
    total: u64,
}

impl RoutingStats {
    pub fn new(width: usize) -> Self {
        Self { counts: vec![0; width], total: 0 }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn width(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Counts one active set `S`: each listed unit once.
    pub fn record<I: IntoIterator<Item = usize>>(&mut self, active: I) {
        for j in active {
            self.counts[j] += 1;
            self.total += 1;
        }
    }

    pub fn merge(&mut self, other: &RoutingStats) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(dim_err!("merging stats of width {} into {}", other.counts.len(), self.counts.len()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }
}

/// Normalised routing entropy `H̃(q) = −Σ qⱼ ln qⱼ / ln d` of the empirical
/// selection distribution `qⱼ = countⱼ / total`, with `0 · ln 0 = 0`.
/// 1 means uniform utilisation, 0 a single unit.
pub fn routing_entropy(stats: &RoutingStats) -> Result<f64> {
    if stats.total == 0 {
        return Err(contract_err!("routing_entropy on empty stats"));
    }
    if stats.counts.len() < 2 {
        return Err(contract_err!("routing_entropy needs at least two units"));
    }
    let total = stats.total as f64;
    let h: f64 = stats
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total;
            -q * q.ln()
        })
        .sum();
    Ok((h / (stats.counts.len() as f64).ln()).clamp(0.0, 1.0))
}
