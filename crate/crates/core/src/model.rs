//! Decoder-only transformer whose FFN sublayer is one of four variants.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::experts::{self, Activation, ExpertBankVars, MaskedFFNVars};
use crate::kernels;
use crate::routing::{self, GaussianRouterVars, RoutingStats};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which FFN sublayer the blocks use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "switch")]
    Switch,
    #[serde(rename = "moe")]
    Moe,
    #[serde(rename = "inf-moe")]
    InfMoe,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dense, Variant::Switch, Variant::Moe, Variant::InfMoe];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Switch => "switch",
            Variant::Moe => "moe",
            Variant::InfMoe => "inf-moe",
        }
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, Variant::Switch | Variant::Moe)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected dense, switch, moe or inf-moe")))
    }
}

/// Architecture and variant hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Hidden width of the dense FFN and of the shared inf-moe FFN. Each
    /// discrete expert gets `d_ff / n_experts`.
    pub d_ff: usize,
    pub d_z: usize,
    pub block_size: usize,
    pub vocab_size: usize,
    pub n_experts: usize,
    /// Experts per token for `moe`; `switch` always uses one.
    pub top_k: usize,
    /// Monte Carlo samples per token for `inf-moe`.
    pub k_samples: usize,
    pub active_fraction: f64,
    pub activation: Activation,
    /// Hidden GELU layers in front of the Gaussian router heads.
    pub router_hidden_layers: usize,
    /// With noise off, every sample equals the router mean.
    pub router_noise: bool,
    /// Every `moe_layer_stride`-th block (counting from the first) gets the
    /// routed FFN; the rest stay dense.
    pub moe_layer_stride: usize,
    /// Coefficient of the load-balancing loss for discrete variants. `None`
    /// means 0.01 for `switch`/`moe` and off for `inf-moe`.
    pub load_balance_coef: Option<f64>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::InfMoe,
            layers: 4,
            heads: 4,
            d_model: 128,
            d_ff: 512,
            d_z: 64,
            block_size: 256,
            vocab_size: 256,
            n_experts: 4,
            top_k: 2,
            k_samples: 2,
            active_fraction: 0.25,
            activation: Activation::Gelu,
            router_hidden_layers: 0,
            router_noise: true,
            moe_layer_stride: 1,
            load_balance_coef: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("block_size", self.block_size),
            ("vocab_size", self.vocab_size),
            ("moe_layer_stride", self.moe_layer_stride),
        ] {
            if v == 0 {
                return cfg(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return cfg(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        match self.variant {
            Variant::Dense => {}
            Variant::Switch | Variant::Moe => {
                if self.n_experts == 0 || self.d_ff % self.n_experts != 0 {
                    return cfg(format!("d_ff {} must split evenly over n_experts {}", self.d_ff, self.n_experts));
                }
                if self.variant == Variant::Moe && (self.top_k == 0 || self.top_k > self.n_experts) {
                    return cfg(format!("top_k must lie in 1..={}, got {}", self.n_experts, self.top_k));
                }
            }
            Variant::InfMoe => {
                if self.d_z == 0 || self.k_samples == 0 {
                    return cfg("inf-moe needs d_z ≥ 1 and k_samples ≥ 1".into());
                }
                if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
                    return cfg(format!("active_fraction must lie in (0, 1], got {}", self.active_fraction));
                }
            }
        }
        if let Some(c) = self.load_balance_coef {
            if !(c.is_finite() && c >= 0.0) {
                return cfg(format!("load_balance_coef must be a nonnegative number, got {c}"));
            }
        }
        Ok(())
    }

    /// Experts actually consulted per token by a discrete variant.
    pub fn effective_top_k(&self) -> usize {
        match self.variant {
            Variant::Switch => 1,
            _ => self.top_k,
        }
    }

    pub fn effective_load_balance(&self) -> f64 {
        match (self.load_balance_coef, self.variant) {
            (Some(c), _) => c,
            (None, Variant::Switch | Variant::Moe) => 0.01,
            (None, _) => 0.0,
        }
    }

    pub fn is_routed_layer(&self, layer: usize) -> bool {
        self.variant != Variant::Dense && (layer + 1) % self.moe_layer_stride == 0
    }

    /// `JSON` with lexicographically sorted keys and no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).and_then(|v| serde_json::to_string(&v)).expect("config serialises")
    }
}

#[derive(Clone, Debug)]
enum FfnLayout {
    Dense { w1: usize, w2: usize },
    Discrete { gate: usize, experts: Vec<(usize, usize)> },
    Inf { w1: usize, w2: usize, wz: usize, router: Vec<usize> },
}

#[derive(Clone, Debug)]
struct BlockLayout {
    ln1: (usize, usize),
    qkv: (usize, usize),
    proj: (usize, usize),
    ln2: (usize, usize),
    ffn: FfnLayout,
}

/// Per-call knobs of [`Model::forward`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Overrides the configured Monte Carlo sample count.
    pub k_samples: Option<usize>,
}

pub struct ForwardOutput {
    /// `[batch·seq, vocab]`.
    pub logits: Var,
    /// Selection counts per block over its `d_ff` hidden units; `None` for
    /// dense blocks.
    pub layer_stats: Vec<Option<RoutingStats>>,
    /// Weighted load-balancing term summed over routed blocks.
    pub aux_loss: Option<Var>,
}

/// Parameters and their layout.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
    names: Vec<String>,
    blocks: Vec<BlockLayout>,
    tok_emb: usize,
    pos_emb: usize,
    ln_f: (usize, usize),
    head: usize,
}

const INIT_STD: f64 = 0.02;

struct Builder<'r> {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let t = match self.rng.as_deref_mut() {
            Some(r) if std > 0.0 => Tensor::randn(shape, std, r),
            _ => Tensor::zeros(shape),
        };
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn ones(&mut self, name: String, n: usize) -> usize {
        self.names.push(name);
        self.params.push(Tensor::full(&[n], 1.0));
        self.params.len() - 1
    }
}

impl Model {
    /// GPT-2 style initialisation from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::build(config, Some(&mut rng))
    }

    /// Correct names and shapes with zero weights and unit gains.
    pub fn skeleton(config: &ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (d, v) = (c.d_model, c.vocab_size);
        let resid = INIT_STD / (2.0 * c.layers as f64).sqrt();
        let mut b = Builder { names: Vec::new(), params: Vec::new(), rng };
        let tok_emb = b.add("tok_emb".into(), &[v, d], INIT_STD);
        let pos_emb = b.add("pos_emb".into(), &[c.block_size, d], INIT_STD);
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = |s: &str| format!("h{l}.{s}");
            let ln1 = (b.ones(p("ln1.g"), d), b.add(p("ln1.b"), &[d], 0.0));
            let qkv = (b.add(p("attn.qkv.w"), &[3 * d, d], INIT_STD), b.add(p("attn.qkv.b"), &[3 * d], 0.0));
            let proj = (b.add(p("attn.proj.w"), &[d, d], resid), b.add(p("attn.proj.b"), &[d], 0.0));
            let ln2 = (b.ones(p("ln2.g"), d), b.add(p("ln2.b"), &[d], 0.0));
            let ffn = if !c.is_routed_layer(l) {
                FfnLayout::Dense {
                    w1: b.add(p("ffn.w1"), &[c.d_ff, d], INIT_STD),
                    w2: b.add(p("ffn.w2"), &[d, c.d_ff], resid),
                }
            } else if c.variant == Variant::InfMoe {
                let w1 = b.add(p("ffn.w1"), &[c.d_ff, d], INIT_STD);
                let w2 = b.add(p("ffn.w2"), &[d, c.d_ff], resid);
                let wz = b.add(p("ffn.wz"), &[c.d_ff, c.d_z], INIT_STD);
                let mut router = Vec::new();
                for h in 0..c.router_hidden_layers {
                    router.push(b.add(p(&format!("router.hidden{h}.w")), &[d, d], INIT_STD));
                    router.push(b.add(p(&format!("router.hidden{h}.b")), &[d], 0.0));
                }
                router.push(b.add(p("router.mu.w"), &[c.d_z, d], INIT_STD));
                router.push(b.add(p("router.mu.b"), &[c.d_z], 0.0));
                router.push(b.add(p("router.logscale.w"), &[c.d_z, d], INIT_STD));
                router.push(b.add(p("router.logscale.b"), &[c.d_z], 0.0));
                FfnLayout::Inf { w1, w2, wz, router }
            } else {
                let gate = b.add(p("moe.gate.w"), &[c.n_experts, d], INIT_STD);
                let de = c.d_ff / c.n_experts;
                let experts = (0..c.n_experts)
                    .map(|e| {
                        (b.add(p(&format!("moe.expert{e}.w1")), &[de, d], INIT_STD), b.add(p(&format!("moe.expert{e}.w2")), &[d, de], resid))
                    })
                    .collect();
                FfnLayout::Discrete { gate, experts }
            };
            blocks.push(BlockLayout { ln1, qkv, proj, ln2, ffn });
        }
        let ln_f = (b.ones("ln_f.g".into(), d), b.add("ln_f.b".into(), &[d], 0.0));
        let head = b.add("lm_head.w".into(), &[v, d], INIT_STD);
        Ok(Self { config: config.clone(), params: b.params, names: b.names, blocks, tok_emb, pos_emb, ln_f, head })
    }

    /// Replaces every tensor by name; all names must be present with the
    /// skeleton's shapes.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut m = Self::skeleton(config)?;
        if tensors.len() != m.names.len() {
            return Err(Error::Integrity(format!("expected {} tensors, found {}", m.names.len(), tensors.len())));
        }
        for (name, t) in tensors {
            let i = m.index_of(&name).ok_or_else(|| Error::Integrity(format!("unexpected tensor {name:?}")))?;
            if t.shape() != m.params[i].shape() {
                return Err(Error::Integrity(format!("tensor {name:?} has shape {:?}, expected {:?}", t.shape(), m.params[i].shape())));
            }
            m.params[i] = t;
        }
        Ok(m)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    /// Whether weight decay applies: matrices yes, biases and gains no.
    pub fn decays(&self, index: usize) -> bool {
        self.params[index].shape().len() >= 2
    }

    /// Forward pass over `batch` sequences of length `seq` laid out
    /// row-major in `tokens`. Parameters come from `params` (normally
    /// `self.params`) so that perturbed copies can be evaluated.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &[Tensor],
        tokens: &[usize],
        batch: usize,
        seq: usize,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        if params.len() != self.params.len() {
            return Err(contract_err!("expected {} parameter tensors, got {}", self.params.len(), params.len()));
        }
        if seq == 0 || batch == 0 || seq > c.block_size {
            return Err(contract_err!("sequence length {seq} must lie in 1..={}", c.block_size));
        }
        if tokens.len() != batch * seq {
            return Err(dim_err!("{} tokens for batch {batch} × seq {seq}", tokens.len()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Index(format!("token {bad} outside vocabulary of {}", c.vocab_size)));
        }
        let k_samples = opts.k_samples.unwrap_or(c.k_samples);
        if k_samples == 0 {
            return Err(contract_err!("K must be at least 1"));
        }
        let pv: Vec<Var> = params.iter().enumerate().map(|(i, t)| tape.param(i, t)).collect::<Result<_>>()?;

        let tok = tape.embedding(pv[self.tok_emb], tokens)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = tape.embedding(pv[self.pos_emb], &positions)?;
        let mut x = tape.add(tok, pos)?;

        let heads = c.heads;
        let scale = 1.0 / ((c.d_model / heads) as f64).sqrt();
        let lb = c.effective_load_balance();
        let mut layer_stats = Vec::with_capacity(self.blocks.len());
        let mut aux: Option<Var> = None;
        for blk in &self.blocks {
            let h = tape.layer_norm(x, pv[blk.ln1.0], pv[blk.ln1.1])?;
            let qkv = tape.linear(h, pv[blk.qkv.0], Some(pv[blk.qkv.1]))?;
            let q = tape.split_heads(qkv, 0, batch, seq, heads)?;
            let k = tape.split_heads(qkv, 1, batch, seq, heads)?;
            let v = tape.split_heads(qkv, 2, batch, seq, heads)?;
            let s = tape.batch_matmul(q, k, true)?;
            let p = tape.causal_softmax(s, scale)?;
            let o = tape.batch_matmul(p, v, false)?;
            let o = tape.merge_heads(o, batch, seq, heads)?;
            let a = tape.linear(o, pv[blk.proj.0], Some(pv[blk.proj.1]))?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, pv[blk.ln2.0], pv[blk.ln2.1])?;
            let (f, stats) = match &blk.ffn {
                FfnLayout::Dense { w1, w2 } => (experts::dense_ffn_forward(tape, pv[*w1], pv[*w2], h, c.activation)?, None),
                FfnLayout::Inf { w1, w2, wz, router } => {
                    let ffn = MaskedFFNVars {
                        w1: pv[*w1],
                        w2: pv[*w2],
                        wz: pv[*wz],
                        active_count: kernels::active_count(c.active_fraction, c.d_ff),
                        activation: c.activation,
                    };
                    let rv: Vec<Var> = router.iter().map(|&i| pv[i]).collect();
                    let g = GaussianRouterVars::from_slice(&rv);
                    let out = experts::inf_moe_forward(tape, &ffn, &g, h, k_samples, c.router_noise, rng)?;
                    (out.y, Some(out.stats))
                }
                FfnLayout::Discrete { gate, experts: ex } => {
                    let bank = ExpertBankVars { experts: ex.iter().map(|&(a, b)| (pv[a], pv[b])).collect(), activation: c.activation };
                    let out = experts::discrete_moe_forward(tape, &bank, pv[*gate], h, c.effective_top_k())?;
                    if lb > 0.0 {
                        let l = routing::load_balance_loss(tape, &out.routing)?;
                        let l = tape.scale(l, lb)?;
                        aux = Some(match aux {
                            Some(a) => tape.add(a, l)?,
                            None => l,
                        });
                    }
                    (out.y, Some(neuron_stats(&out.stats, c.d_ff / c.n_experts)))
                }
            };
            x = tape.add(x, f)?;
            layer_stats.push(stats);
        }
        let h = tape.layer_norm(x, pv[self.ln_f.0], pv[self.ln_f.1])?;
        let logits = tape.linear(h, pv[self.head], None)?;
        Ok(ForwardOutput { logits, layer_stats, aux_loss: aux })
    }

    /// Mean next-token cross-entropy plus any auxiliary term, with the
    /// cross-entropy node returned separately.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &[Tensor],
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<(Var, Var, ForwardOutput)> {
        let out = self.forward(tape, params, inputs, batch, seq, opts, rng)?;
        let ce = tape.cross_entropy(out.logits, targets)?;
        let total = match out.aux_loss {
            Some(a) => tape.add(ce, a)?,
            None => ce,
        };
        Ok((total, ce, out))
    }

    /// `(active, total)` trainable scalars; see [`count_params`].
    pub fn count_params(&self) -> (usize, usize) {
        count_params(&self.config)
    }
}

/// Spreads expert selection counts over the hidden units they own, so that
/// discrete and continuous variants report entropy over the same `d_ff`.
fn neuron_stats(expert_counts: &RoutingStats, per_expert: usize) -> RoutingStats {
    let counts = expert_counts.counts().iter().flat_map(|&c| std::iter::repeat_n(c, per_expert)).collect();
    RoutingStats::from_counts(counts)
}

/// `(active, total)` trainable scalars implied by `config`. Active counts
/// everything outside the FFN plus the expected per-token FFN share: all of
/// it for dense, `k/n` of the experts plus the gate for discrete variants,
/// and `min(1, K·N)` of `W1`/`W2` plus `Wz` and the router for inf-moe.
pub fn count_params(config: &ModelConfig) -> (usize, usize) {
    let c = config;
    let d = c.d_model;
    let mut total = 2 * c.vocab_size * d + c.block_size * d + 2 * d;
    let mut active = total;
    for l in 0..c.layers {
        let attn = 3 * d * d + 3 * d + d * d + d + 4 * d;
        total += attn;
        active += attn;
        let ffn = 2 * c.d_ff * d;
        if !c.is_routed_layer(l) {
            total += ffn;
            active += ffn;
            continue;
        }
        match c.variant {
            Variant::Dense => unreachable!("dense layers are never routed"),
            Variant::Switch | Variant::Moe => {
                let gate = c.n_experts * d;
                let de = c.d_ff / c.n_experts;
                total += gate + ffn;
                active += gate + c.effective_top_k() * 2 * de * d;
            }
            Variant::InfMoe => {
                let router = c.router_hidden_layers * (d * d + d) + 2 * (c.d_z * d + c.d_z);
                let wz = c.d_ff * c.d_z;
                let share = (c.k_samples * kernels::active_count(c.active_fraction, c.d_ff)).min(c.d_ff);
                total += ffn + wz + router;
                active += 2 * share * d + wz + router;
            }
        }
    }
    (active, total)
}
