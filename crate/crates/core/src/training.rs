//! Optimiser, schedule, training loop, perplexity and ablation sweeps.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Corpus};
use crate::error::{contract_err, Error, Result};
use crate::model::{ForwardOptions, Model, ModelConfig, Variant};
use crate::routing::routing_entropy;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Optimisation and logging hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Tokens per step; split into `batch_size / block_size` windows.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub betas: [f64; 2],
    pub eps_adam: f64,
    pub grad_clip: f64,
    pub eval_interval: usize,
    pub entropy_log_interval: usize,
    /// Cap on validation windows for the periodic in-training evaluation.
    /// Final evaluations always use every window.
    pub eval_max_windows: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8192,
            lr: 6e-4,
            weight_decay: 0.1,
            warmup_iters: 100,
            betas: [0.9, 0.95],
            eps_adam: 1e-8,
            grad_clip: 1.0,
            eval_interval: 100,
            entropy_log_interval: 100,
            eval_max_windows: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, block_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.steps > 0 && self.warmup_iters > self.steps {
            return bad(format!("warmup_iters {} exceeds steps {}", self.warmup_iters, self.steps));
        }
        if self.batch_size < block_size || self.batch_size % block_size != 0 {
            return bad(format!("batch_size {} must be a positive multiple of block_size {block_size}", self.batch_size));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.eps_adam > 0.0) {
            return bad("betas must lie in [0, 1) and eps_adam must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("weight_decay must be nonnegative and grad_clip positive".into());
        }
        if self.eval_interval == 0 || self.entropy_log_interval == 0 || self.eval_max_windows == 0 {
            return bad("eval_interval, entropy_log_interval and eval_max_windows must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to `0.1·lr` at `steps`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_iters {
        return cfg.lr * (step as f64 / cfg.warmup_iters as f64);
    }
    if step == cfg.warmup_iters {
        return cfg.lr;
    }
    let floor = 0.1 * cfg.lr;
    let span = cfg.steps.saturating_sub(cfg.warmup_iters);
    let progress = if span == 0 { 1.0 } else { ((step - cfg.warmup_iters) as f64 / span as f64).min(1.0) };
    floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments per parameter plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// Decoupled-weight-decay Adam with bias correction. Gradients are read
/// from `params[i].grad()`; `decay[i]` selects which tensors decay.
pub fn adamw_step(state: &mut OptimizerState, params: &mut [Tensor], decay: &[bool], lr_t: f64, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != params.len() || decay.len() != params.len() {
        return Err(contract_err!("optimizer state does not match {} parameters", params.len()));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.numel() {
            return Err(contract_err!("moment buffer {i} has {} entries for {}", state.m[i].len(), p.numel()));
        }
        if let Some(g) = p.grad() {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient {} in parameter {i} at {pos}", g[pos])));
            }
        }
    }
    state.step += 1;
    let [b1, b2] = cfg.betas;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = match p.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; p.numel()],
        };
        let shrink = if decay[i] { 1.0 - lr_t * cfg.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w = *w * shrink - lr_t * mh / (vh.sqrt() + cfg.eps_adam);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let sq: f64 = params.iter().filter_map(|p| p.grad()).flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok(norm)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub ppl: Option<f64>,
    /// Per block; `None` for dense blocks and at steps without an entropy log.
    pub entropy: Vec<Option<f64>>,
    pub ms_per_step: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub layers: usize,
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean over logged blocks of the last logged entropy.
    pub fn final_entropy(&self) -> Option<f64> {
        let r = self.records.iter().rev().find(|r| r.entropy.iter().any(Option::is_some))?;
        let vals: Vec<f64> = r.entropy.iter().flatten().copied().collect();
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = metrics_header(self.layers);
        for r in &self.records {
            s.push_str(&metrics_row(r));
        }
        s
    }
}

pub fn metrics_header(layers: usize) -> String {
    let mut s = String::from("step,loss,lr,ppl");
    for l in 0..layers {
        let _ = write!(s, ",entropy_layer_{l}");
    }
    s.push_str(",ms_per_step\n");
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn metrics_row(r: &MetricsRecord) -> String {
    let mut s = format!("{},{},{},{}", r.step, r.loss, r.lr, opt(r.ppl));
    for e in &r.entropy {
        s.push(',');
        s.push_str(&opt(*e));
    }
    let _ = writeln!(s, ",{:.3}", r.ms_per_step);
    s
}

/// Knobs for [`eval_ppl`].
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    /// Monte Carlo samples at inference; `None` keeps the trained value.
    pub k_samples: Option<usize>,
    /// Use at most this many windows, evenly spaced.
    pub max_windows: Option<usize>,
    /// Seed of the router noise during evaluation.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { k_samples: None, max_windows: None, seed: 0x5eed }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub ppl: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    pub seconds: f64,
}

impl EvalReport {
    pub fn tokens_per_s(&self) -> f64 {
        self.tokens as f64 / self.seconds.max(1e-9)
    }
}

/// `exp` of the mean next-byte NLL over non-overlapping full windows of
/// `block_size` predictions.
pub fn eval_ppl(model: &Model, text: &[u8], opts: EvalOptions) -> Result<EvalReport> {
    let seq = model.config.block_size;
    let mut starts = data::eval_windows(text.len(), seq);
    if starts.is_empty() {
        return Err(contract_err!("evaluation text of {} bytes holds no full window of {}", text.len(), seq + 1));
    }
    if opts.k_samples == Some(0) {
        return Err(contract_err!("K must be at least 1"));
    }
    if let Some(cap) = opts.max_windows {
        if cap == 0 {
            return Err(contract_err!("max_windows must be positive"));
        }
        if starts.len() > cap {
            let n = starts.len();
            starts = (0..cap).map(|i| starts[i * n / cap]).collect();
        }
    }
    let t0 = Instant::now();
    let rows = (8192 / seq).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let fwd = ForwardOptions { k_samples: opts.k_samples };
    let mut nll = 0.0;
    let mut tokens = 0;
    for chunk in starts.chunks(rows) {
        let mut x = Vec::with_capacity(chunk.len() * seq);
        let mut y = Vec::with_capacity(chunk.len() * seq);
        for &s in chunk {
            x.extend(text[s..s + seq].iter().map(|&b| b as usize));
            y.extend(text[s + 1..s + seq + 1].iter().map(|&b| b as usize));
        }
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &model.params, &x, chunk.len(), seq, fwd, &mut rng)?;
        let ce = tape.cross_entropy(out.logits, &y)?;
        nll += tape.item(ce)? * y.len() as f64;
        tokens += y.len();
    }
    let mean_nll = nll / tokens as f64;
    Ok(EvalReport { ppl: mean_nll.exp(), mean_nll, tokens, seconds: t0.elapsed().as_secs_f64() })
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: MetricsLog,
    pub optimizer: OptimizerState,
}

/// Initialises a model from `model_cfg` and trains it.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    observer: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let model = Model::init(model_cfg)?;
    train_model(model, cfg, corpus, observer)
}

const DUMP_WINDOW: usize = 20;

/// Runs `cfg.steps` updates of sample → forward → cross-entropy → backward
/// → clip → AdamW on `model`, calling `observer` after every step.
pub fn train_model(
    mut model: Model,
    cfg: &TrainConfig,
    corpus: &Corpus,
    observer: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let mcfg = model.config.clone();
    cfg.validate(mcfg.block_size)?;
    let seq = mcfg.block_size;
    let batch = cfg.batch_size / seq;
    let decay: Vec<bool> = (0..model.params.len()).map(|i| model.decays(i)).collect();
    let mut opt = OptimizerState::new(&model.params);
    let mut metrics = MetricsLog { layers: mcfg.layers, records: Vec::new() };
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    for p in model.params.iter_mut() {
        p.set_requires_grad(true);
    }

    for step in 1..=cfg.steps {
        let t0 = Instant::now();
        let lr = lr_at(cfg, step);
        let (x, y) = data::sample_batch(&corpus.train, batch, seq, &mut data_rng)?;
        for p in model.params.iter_mut() {
            p.zero_grad();
        }
        let log_entropy = step % cfg.entropy_log_interval == 0 || step == cfg.steps;
        let attempt = (|| -> Result<(f64, Vec<Option<f64>>)> {
            let mut tape = Tape::new();
            let (total, ce, out) = model.loss(&mut tape, &model.params, &x, &y, batch, seq, ForwardOptions::default(), &mut noise_rng)?;
            let loss = tape.item(ce)?;
            let entropy = if log_entropy {
                out.layer_stats.iter().map(|s| s.as_ref().map(routing_entropy).transpose()).collect::<Result<_>>()?
            } else {
                vec![None; mcfg.layers]
            };
            tape.backward(total, &mut model.params)?;
            clip_grad_norm(&mut model.params, cfg.grad_clip)?;
            adamw_step(&mut opt, &mut model.params, &decay, lr, cfg)?;
            Ok((loss, entropy))
        })();
        let (loss, entropy) = match attempt {
            Ok(v) if v.0.is_finite() => v,
            Ok((loss, _)) => return Err(divergence(step, &format!("loss {loss}"), &metrics)),
            Err(Error::Numeric(m)) => return Err(divergence(step, &m, &metrics)),
            Err(e) => return Err(e),
        };
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        let ppl = if step % cfg.eval_interval == 0 || step == cfg.steps {
            let r = eval_ppl(&model, &corpus.val, EvalOptions { max_windows: Some(cfg.eval_max_windows), ..Default::default() });
            Some(r.map_err(|e| match e {
                Error::Numeric(m) => divergence(step, &m, &metrics),
                e => e,
            })?.ppl)
        } else {
            None
        };
        let rec = MetricsRecord { step, loss, lr, ppl, entropy, ms_per_step: ms };
        observer(&rec)?;
        metrics.records.push(rec);
    }
    for p in model.params.iter_mut() {
        p.set_requires_grad(false);
    }
    Ok(TrainOutcome { model, metrics, optimizer: opt })
}

fn divergence(step: usize, cause: &str, metrics: &MetricsLog) -> Error {
    let mut detail = format!("{cause}; last {DUMP_WINDOW} steps:");
    let from = metrics.records.len().saturating_sub(DUMP_WINDOW);
    for r in &metrics.records[from..] {
        let ent: Vec<String> = r.entropy.iter().map(|e| opt(*e)).collect();
        let _ = write!(detail, "\n  step {} loss {} entropy [{}]", r.step, r.loss, ent.join(","));
    }
    Error::Divergence { step, detail }
}

/// Hyperparameter swept by [`run_ablation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Dz,
    K,
    Experts,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Dz => "dz",
            AblationAxis::K => "K",
            AblationAxis::Experts => "experts",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dz" => Ok(AblationAxis::Dz),
            "K" | "k" => Ok(AblationAxis::K),
            "experts" | "n_experts" => Ok(AblationAxis::Experts),
            _ => Err(Error::Config(format!("unknown ablation axis {s:?}; expected dz, K or experts"))),
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig, value: usize) {
        match self {
            AblationAxis::Dz => cfg.d_z = value,
            AblationAxis::K => cfg.k_samples = value,
            AblationAxis::Experts => cfg.n_experts = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: usize,
    pub ppl: f64,
    pub final_entropy: Option<f64>,
    pub wallclock_s: f64,
}

/// Trains and evaluates one configuration per value under identical seeds.
/// With `eval_k` set, evaluation uses that many samples instead of the
/// trained count.
pub fn run_ablation(
    axis: AblationAxis,
    values: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    eval_k: Option<usize>,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    if matches!(axis, AblationAxis::Dz | AblationAxis::K) && model_cfg.variant != Variant::InfMoe {
        return Err(Error::Config(format!("the {} axis only applies to inf-moe", axis.name())));
    }
    if axis == AblationAxis::Experts && !model_cfg.variant.is_discrete() {
        return Err(Error::Config("the experts axis only applies to switch and moe".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut mc = model_cfg.clone();
        axis.apply(&mut mc, value);
        mc.validate()?;
        let t0 = Instant::now();
        let out = train(&mc, cfg, corpus, &mut |_| Ok(()))?;
        let report = eval_ppl(&out.model, &corpus.val, EvalOptions { k_samples: eval_k, ..Default::default() })?;
        rows.push(AblationRow {
            value,
            ppl: report.ppl,
            final_entropy: out.metrics.final_entropy(),
            wallclock_s: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("value,ppl,final_entropy,wallclock_s\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.3}", r.value, r.ppl, opt(r.final_entropy), r.wallclock_s);
    }
    s
}
