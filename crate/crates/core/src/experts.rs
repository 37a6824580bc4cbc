//! Expert layers: the masked FFN indexed by a continuous `z`, its Monte Carlo
//! mixture, and the discrete baselines (dense FFN and a top-k expert bank).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::kernels;
use crate::routing::{self, ExpertIndexSample, GaussianRouterVars, RouterOutput, RoutingStats};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Hidden nonlinearity of every FFN.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => kernels::gelu(x),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Weights of an FFN whose hidden layer is modulated by a mask derived from
/// `z`: `W1 [d_ff, d_in]`, `W2 [d_out, d_ff]`, `Wz [d_ff, d_z]`.
#[derive(Clone, Debug)]
pub struct MaskedFFNParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub wz: Tensor,
    pub active_fraction: f64,
    pub activation: Activation,
}

impl MaskedFFNParams {
    pub fn new(w1: Tensor, w2: Tensor, wz: Tensor, active_fraction: f64, activation: Activation) -> Result<Self> {
        let p = Self { w1, w2, wz, active_fraction, activation };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_ff, d_in) = dims2(&self.w1, "W1")?;
        let (_, w2_ff) = dims2(&self.w2, "W2")?;
        let (wz_ff, _) = dims2(&self.wz, "Wz")?;
        if w2_ff != d_ff || wz_ff != d_ff {
            return Err(dim_err!(
                "W1 {:?}, W2 {:?} and Wz {:?} disagree on d_ff",
                self.w1.shape(),
                self.w2.shape(),
                self.wz.shape()
            ));
        }
        if d_in == 0 || !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return Err(contract_err!("active fraction must lie in (0, 1], got {}", self.active_fraction));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn active_count(&self) -> usize {
        kernels::active_count(self.active_fraction, self.d_ff())
    }

    pub fn bind(&self, tape: &mut Tape, first: usize) -> Result<MaskedFFNVars> {
        Ok(MaskedFFNVars {
            w1: tape.param(first, &self.w1)?,
            w2: tape.param(first + 1, &self.w2)?,
            wz: tape.param(first + 2, &self.wz)?,
            active_count: self.active_count(),
            activation: self.activation,
        })
    }
}

fn dims2(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(dim_err!("{name} must be a matrix, got {:?}", s)),
    }
}

/// Tape handles of a masked FFN.
#[derive(Clone, Copy, Debug)]
pub struct MaskedFFNVars {
    pub w1: Var,
    pub w2: Var,
    pub wz: Var,
    pub active_count: usize,
    pub activation: Activation,
}

/// Per-sample masks, one `[batch, d_ff]` node each, keeping the
/// `active_count` largest entries of `m̂ = Wz z` at their original values.
#[derive(Clone, Debug)]
pub struct Mask {
    pub values: Vec<Var>,
    pub active_count: usize,
}

impl Mask {
    /// Stacks the masks into `[batch, K, d_ff]`.
    pub fn values_tensor(&self, tape: &Tape) -> Tensor {
        let k = self.values.len();
        let (batch, d_ff) = (tape.shape(self.values[0])[0], tape.shape(self.values[0])[1]);
        let mut data = vec![0.0; batch * k * d_ff];
        for (s, &m) in self.values.iter().enumerate() {
            let v = tape.value(m);
            for b in 0..batch {
                data[(b * k + s) * d_ff..(b * k + s + 1) * d_ff].copy_from_slice(&v[b * d_ff..(b + 1) * d_ff]);
            }
        }
        Tensor::new(vec![batch, k, d_ff], data).expect("finite mask")
    }

    /// Retained neuron ids of sample `s`, `batch × active_count`, ascending per row.
    pub fn retained<'t>(&self, tape: &'t Tape, s: usize) -> &'t [u32] {
        tape.selected(self.values[s]).expect("mask nodes come from top_k_mask").0
    }
}

/// Builds one mask per sample. Gradient reaches `Wz` and `z` through the
/// retained entries only.
pub fn compute_mask(tape: &mut Tape, ffn: &MaskedFFNVars, z: &[Var]) -> Result<Mask> {
    if z.is_empty() {
        return Err(contract_err!("compute_mask needs at least one sample"));
    }
    let mut values = Vec::with_capacity(z.len());
    for &zk in z {
        let m_hat = tape.linear(zk, ffn.wz, None)?;
        values.push(tape.top_k_mask(m_hat, ffn.active_count)?);
    }
    Ok(Mask { values, active_count: ffn.active_count })
}

/// `f(x, z) = W2 (Act(W1 x) ⊙ mask)` for the mask of sample `sample`.
pub fn expert_forward(tape: &mut Tape, ffn: &MaskedFFNVars, x: Var, mask: &Mask, sample: usize) -> Result<Var> {
    let m = *mask
        .values
        .get(sample)
        .ok_or_else(|| contract_err!("sample {sample} out of range for {} masks", mask.values.len()))?;
    let h = hidden(tape, ffn, x)?;
    masked_output(tape, ffn, h, m)
}

fn hidden(tape: &mut Tape, ffn: &MaskedFFNVars, x: Var) -> Result<Var> {
    let a = tape.linear(x, ffn.w1, None)?;
    ffn.activation.apply(tape, a)
}

fn masked_output(tape: &mut Tape, ffn: &MaskedFFNVars, h: Var, m: Var) -> Result<Var> {
    if tape.shape(h) != tape.shape(m) {
        return Err(dim_err!("hidden {:?} vs mask {:?}", tape.shape(h), tape.shape(m)));
    }
    let hm = tape.mul(h, m)?;
    tape.linear(hm, ffn.w2, None)
}

/// Result of one continuous-expert layer evaluation.
#[derive(Clone, Debug)]
pub struct InfMoeOutput {
    /// `[batch, d_out]`.
    pub y: Var,
    pub router: RouterOutput,
    pub sample: ExpertIndexSample,
    pub mask: Mask,
    /// Per-sample outputs `f(x, z⁽ᵏ⁾)`.
    pub per_sample: Vec<Var>,
    /// Every (token, sample) active set counted once per occurrence.
    pub stats: RoutingStats,
}

/// `y = (1/K) Σₖ f(x, z⁽ᵏ⁾)` with `z⁽ᵏ⁾` drawn from the Gaussian router.
/// `Act(W1 x)` does not depend on `z` and is computed once for all samples.
#[allow(clippy::too_many_arguments)]
pub fn inf_moe_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    ffn: &MaskedFFNVars,
    router: &GaussianRouterVars,
    x: Var,
    samples: usize,
    noise: bool,
    rng: &mut R,
) -> Result<InfMoeOutput> {
    if samples == 0 {
        return Err(contract_err!("inf_moe_forward needs K ≥ 1"));
    }
    let out = routing::gaussian_route(tape, router, x)?;
    let sample = routing::sample_z(tape, &out, samples, noise, rng)?;
    let mask = compute_mask(tape, ffn, &sample.z)?;
    let h = hidden(tape, ffn, x)?;
    let d_ff = tape.shape(h)[1];
    let mut stats = RoutingStats::new(d_ff);
    let mut per_sample = Vec::with_capacity(samples);
    for s in 0..samples {
        per_sample.push(masked_output(tape, ffn, h, mask.values[s])?);
        stats.record(mask.retained(tape, s).iter().map(|&j| j as usize));
    }
    let y = average(tape, &per_sample)?;
    Ok(InfMoeOutput { y, router: out, sample, mask, per_sample, stats })
}

/// `(1/K)(f₁ + f₂ + … + f_K)`, summed left to right. A single sample is
/// returned unchanged.
pub fn average(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms.split_first().ok_or_else(|| contract_err!("average of nothing"))?;
    if rest.is_empty() {
        return Ok(first);
    }
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// `W2 Act(W1 x)`.
pub fn dense_ffn_forward(tape: &mut Tape, w1: Var, w2: Var, x: Var, activation: Activation) -> Result<Var> {
    let a = tape.linear(x, w1, None)?;
    let h = activation.apply(tape, a)?;
    tape.linear(h, w2, None)
}

/// `n` independent FFNs `(W1ᵢ [d_ff_expert, d_in], W2ᵢ [d_out, d_ff_expert])`.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub experts: Vec<(Tensor, Tensor)>,
    pub activation: Activation,
}

impl ExpertBank {
    pub fn new(experts: Vec<(Tensor, Tensor)>, activation: Activation) -> Result<Self> {
        let (first, _) = experts.first().ok_or_else(|| contract_err!("expert bank is empty"))?;
        let s1 = first.shape().to_vec();
        let s2 = experts[0].1.shape().to_vec();
        for (i, (w1, w2)) in experts.iter().enumerate() {
            if w1.shape() != s1.as_slice() || w2.shape() != s2.as_slice() {
                return Err(dim_err!("expert {i} has shapes {:?}/{:?}, expected {:?}/{:?}", w1.shape(), w2.shape(), s1, s2));
            }
        }
        if s1.len() != 2 || s2.len() != 2 || s2[1] != s1[0] {
            return Err(dim_err!("expert W1 {:?} and W2 {:?} do not compose", s1, s2));
        }
        Ok(Self { experts, activation })
    }

    pub fn n(&self) -> usize {
        self.experts.len()
    }

    pub fn bind(&self, tape: &mut Tape, first: usize) -> Result<ExpertBankVars> {
        let mut experts = Vec::with_capacity(self.experts.len());
        for (i, (w1, w2)) in self.experts.iter().enumerate() {
            experts.push((tape.param(first + 2 * i, w1)?, tape.param(first + 2 * i + 1, w2)?));
        }
        Ok(ExpertBankVars { experts, activation: self.activation })
    }
}

#[derive(Clone, Debug)]
pub struct ExpertBankVars {
    pub experts: Vec<(Var, Var)>,
    pub activation: Activation,
}

/// Result of one discrete-mixture layer evaluation.
#[derive(Clone, Debug)]
pub struct DiscreteMoeOutput {
    pub y: Var,
    pub routing: routing::DiscreteRouting,
    /// Selection counts over experts.
    pub stats: RoutingStats,
}

/// `y = Σ_{i ∈ TopK} p(i|x) eᵢ(x)`. Each expert only processes the tokens
/// routed to it.
pub fn discrete_moe_forward(tape: &mut Tape, bank: &ExpertBankVars, gate_w: Var, x: Var, k: usize) -> Result<DiscreteMoeOutput> {
    let n = bank.experts.len();
    if tape.shape(gate_w).first() != Some(&n) {
        return Err(contract_err!("router scores {:?} experts but bank has {n}", tape.shape(gate_w).first()));
    }
    let batch = tape.shape(x)[0];
    let routing = routing::discrete_route(tape, gate_w, x, k)?;
    let mut stats = RoutingStats::new(n);
    stats.record(routing.indices.iter().copied());
    let flat_w = tape.reshape(routing.weights, vec![batch * k, 1])?;
    let mut y: Option<Var> = None;
    for (e, &(w1, w2)) in bank.experts.iter().enumerate() {
        let slots: Vec<usize> = (0..batch * k).filter(|&p| routing.indices[p] == e).collect();
        if slots.is_empty() {
            continue;
        }
        let tokens: Vec<usize> = slots.iter().map(|p| p / k).collect();
        let xe = tape.gather_rows(x, &tokens)?;
        let out = dense_ffn_forward(tape, w1, w2, xe, bank.activation)?;
        let we = tape.gather_rows(flat_w, &slots)?;
        let weighted = tape.scale_rows(out, we)?;
        let placed = tape.scatter_add_rows(weighted, &tokens, batch)?;
        y = Some(match y {
            Some(acc) => tape.add(acc, placed)?,
            None => placed,
        });
    }
    let y = y.expect("every token routes to at least one expert");
    Ok(DiscreteMoeOutput { y, routing, stats })
}
