//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion followed by
//! indented measurements.
//!
//! The end-to-end training criterion needs roughly a day and a half of CPU
//! at its stated scale, so by default it runs a reduced configuration and
//! reports the full-scale run as not performed. `IMOE_ACCEPTANCE_FULL=1`
//! runs everything at the stated scale. The process exits nonzero on a
//! failure only when `IMOE_ACCEPTANCE_STRICT=1`.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use imoe_core::bench::{run_bench, BenchConfig, Strategy};
use imoe_core::checkpoint;
use imoe_core::data::Corpus;
use imoe_core::experts::{
    compute_mask, dense_ffn_forward, discrete_moe_forward, inf_moe_forward, Activation, ExpertBank, MaskedFFNParams,
};
use imoe_core::kernels::{active_count, softmax_rows};
use imoe_core::model::{count_params, ForwardOptions, Model, ModelConfig, Variant};
use imoe_core::routing::{routing_entropy, GaussianRouterParams, RoutingStats};
use imoe_core::tape::{grad_check, grad_check_coords, grad_check_directional, GradCheckReport};
use imoe_core::training::{eval_ppl, train, EvalOptions, MetricsLog, TrainConfig};
use imoe_core::{Error, Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    details: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Self { pass: true, details: Vec::new() }
    }

    /// Records a measurement and folds its outcome into the verdict.
    fn check(&mut self, ok: bool, msg: String) {
        self.pass &= ok;
        self.details.push(format!("[{}] {msg}", if ok { "ok" } else { "no" }));
    }

    fn note(&mut self, msg: String) {
        self.details.push(msg);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn full_scale() -> bool {
    std::env::var("IMOE_ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

fn corpus() -> Result<Corpus> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus.txt");
    Corpus::load(&path, 0.9)
}

fn loss_fn(
    m: &Model,
    toks: Vec<usize>,
    targets: Vec<usize>,
    batch: usize,
    seed: u64,
) -> impl FnMut(&mut Tape, &[Tensor]) -> Result<imoe_core::Var> + '_ {
    move |tape, ps| {
        let seq = toks.len() / batch;
        // reseeding on every call freezes ε across perturbations
        let (l, _, _) = m.loss(tape, ps, &toks, &targets, batch, seq, ForwardOptions::default(), &mut rng(seed))?;
        Ok(l)
    }
}

fn describe(r: &GradCheckReport) -> String {
    format!("{} checks, max rel err {:.2e}, selection changes {}", r.checked, r.max_rel_err, r.selection_changes)
}

fn c1_gradients(v: &mut Verdict) -> Result<()> {
    // every scalar of a reduced-width model
    let tiny = ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        d_z: 4,
        block_size: 6,
        vocab_size: 11,
        seed: 3,
        ..Default::default()
    };
    let m = Model::init(&tiny)?;
    let mut r = rng(5);
    let mut params: Vec<Tensor> = m.params.iter().map(|p| Tensor::from_fn(p.shape(), |i| p.data()[i] + r.random_range(-0.3..0.3))).collect();
    let toks: Vec<usize> = (0..12).map(|_| r.random_range(0..11)).collect();
    let tg: Vec<usize> = (0..12).map(|_| r.random_range(0..11)).collect();
    let rep = grad_check(loss_fn(&m, toks, tg, 2, 7), &mut params, 1e-5)?;
    v.check(rep.max_rel_err < 1e-4 && rep.selection_changes == 0 && rep.checked > 0, format!("all coordinates, reduced width: {}", describe(&rep)));

    // default desk width: every tensor sampled, then random directions
    // that move every parameter at once. Single coordinates need the wider
    // step to rise above roundoff on their small gradients; a whole-model
    // direction needs the narrow one to stay clear of top-k ties.
    let cfg = ModelConfig::default();
    let m = Model::init(&cfg)?;
    let mut params = m.params.clone();
    let mut r = rng(1);
    let coords: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|i| {
            let n = params[i].numel();
            (0..3).map(|_| (i, r.random_range(0..n))).collect::<Vec<_>>()
        })
        .collect();
    let toks: Vec<usize> = (0..16).map(|_| r.random_range(0..256)).collect();
    let tg: Vec<usize> = (0..16).map(|_| r.random_range(0..256)).collect();
    let rep = grad_check_coords(loss_fn(&m, toks.clone(), tg.clone(), 2, 2), &mut params, 1e-5, &coords)?;
    v.check(rep.max_rel_err < 1e-4 && rep.selection_changes == 0, format!("sampled coordinates of all {} tensors, default width: {}", params.len(), describe(&rep)));
    let dirs: Vec<Vec<Vec<f64>>> = (0..6).map(|_| params.iter().map(|p| (0..p.numel()).map(|_| r.random_range(-1.0..1.0)).collect()).collect()).collect();
    let rep = grad_check_directional(loss_fn(&m, toks, tg, 2, 2), &mut params, 1e-6, &dirs)?;
    v.check(rep.max_rel_err < 1e-4 && rep.selection_changes == 0, format!("whole-parameter directions, default width: {}", describe(&rep)));
    Ok(())
}

fn c2_mask_contract(v: &mut Verdict) -> Result<()> {
    let widths = [8, 64, 512];
    let fractions = [0.125, 0.25, 0.5, 1.0];
    let (d_z, batch) = (6, 3);
    let mut r = rng(11);
    let (mut draws, mut bad_count, mut bad_value, mut bad_order) = (0, 0, 0, 0);
    for i in 0..1000 {
        let d_ff = widths[i % 3];
        let frac = fractions[(i / 3) % 4];
        let wz = Tensor::randn(&[d_ff, d_z], 1.0, &mut r);
        let p = MaskedFFNParams::new(Tensor::zeros(&[d_ff, 1]), Tensor::zeros(&[1, d_ff]), wz, frac, Activation::Gelu)?;
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, 0)?;
        let z = tape.input(&Tensor::randn(&[batch, d_z], 1.0, &mut r), false)?;
        let mask = compute_mask(&mut tape, &vars, &[z])?;
        let m_hat = tape.linear(z, vars.wz, None)?;
        let (m, m_hat) = (tape.value(mask.values[0]).to_vec(), tape.value(m_hat).to_vec());
        let want = active_count(frac, d_ff);
        for b in 0..batch {
            let row = &m[b * d_ff..(b + 1) * d_ff];
            let scores = &m_hat[b * d_ff..(b + 1) * d_ff];
            let kept: Vec<usize> = (0..d_ff).filter(|&j| row[j] != 0.0).collect();
            bad_count += usize::from(kept.len() != want);
            bad_value += kept.iter().filter(|&&j| row[j].to_bits() != scores[j].to_bits()).count();
            let mut order: Vec<usize> = (0..d_ff).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut top: Vec<usize> = order[..want].to_vec();
            top.sort_unstable();
            bad_order += usize::from(top != kept);
        }
        draws += 1;
    }
    v.check(bad_count == 0, format!("{draws} draws × {batch} rows: {bad_count} rows with a wrong nonzero count"));
    v.check(bad_value == 0, format!("{bad_value} retained values differ from Wz·z bits"));
    v.check(bad_order == 0, format!("{bad_order} rows disagree with the sort oracle"));
    Ok(())
}

fn c3_entropy_unit(v: &mut Verdict) -> Result<()> {
    let h = |c: Vec<u64>| routing_entropy(&RoutingStats::from_counts(c));
    let (u, p, m) = (h(vec![5, 5, 5, 5])?, h(vec![0, 9, 0, 0])?, h(vec![3, 1, 0, 0])?);
    v.check(u == 1.0, format!("uniform counts → {u}"));
    v.check(p == 0.0, format!("point mass → {p}"));
    v.check((m - 0.4056).abs() <= 1e-4, format!("[3,1,0,0] → {m:.6}"));
    Ok(())
}

fn c3_entropy_trace(v: &mut Verdict, log: &MetricsLog, warmup: usize, scale: &str) {
    let mut logged = 0;
    let (mut outside, mut low) = (0, 0);
    let mut min_after = f64::INFINITY;
    for r in &log.records {
        for h in r.entropy.iter().flatten() {
            logged += 1;
            outside += usize::from(!(0.0..=1.0).contains(h));
            if r.step > warmup {
                min_after = min_after.min(*h);
                low += usize::from(*h <= 0.5);
            }
        }
    }
    v.check(logged > 0 && outside == 0, format!("{scale} inf-moe run: {logged} logged values, {outside} outside [0, 1]"));
    v.check(low == 0 && min_after.is_finite(), format!("minimum after warmup {min_after:.4}"));
}

fn c4_monte_carlo(v: &mut Verdict) -> Result<()> {
    let (d_in, d_ff, d_z, batch) = (128, 512, 64, 4);
    let mut r = rng(21);
    let p = MaskedFFNParams::new(
        Tensor::randn(&[d_ff, d_in], (1.0 / d_in as f64).sqrt(), &mut r),
        Tensor::randn(&[d_in, d_ff], (1.0 / d_ff as f64).sqrt(), &mut r),
        Tensor::randn(&[d_ff, d_z], (1.0 / d_z as f64).sqrt(), &mut r),
        0.25,
        Activation::Gelu,
    )?;
    let router = GaussianRouterParams::init(d_in, d_z, 0, 0.02, &mut r);
    let x = Tensor::randn(&[batch, d_in], 1.0, &mut r);
    let mut vars = Vec::new();
    for k in [1, 2, 4, 8, 16] {
        let outs: Vec<Vec<f64>> = (0..200)
            .map(|s| -> Result<Vec<f64>> {
                let mut tape = Tape::new();
                let ffn = p.bind(&mut tape, 0)?;
                let rv = router.bind(&mut tape, 3)?;
                let xv = tape.input(&x, false)?;
                let o = inf_moe_forward(&mut tape, &ffn, &rv, xv, k, true, &mut rng(1000 + s))?;
                Ok(tape.value(o.y).to_vec())
            })
            .collect::<Result<_>>()?;
        let n = outs.len() as f64;
        let dim = outs[0].len();
        let mut var = 0.0;
        for c in 0..dim {
            let mean = outs.iter().map(|o| o[c]).sum::<f64>() / n;
            var += outs.iter().map(|o| (o[c] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        }
        vars.push(var / dim as f64);
    }
    let list: Vec<String> = vars.iter().map(|x| format!("{x:.3e}")).collect();
    v.check(vars.windows(2).all(|w| w[1] < w[0]), format!("mean output variance for K = 1, 2, 4, 8, 16: {}", list.join(", ")));
    v.check(vars[4] <= 0.2 * vars[0], format!("var(16) / var(1) = {:.3}", vars[4] / vars[0]));
    Ok(())
}

fn c5_equivalences(v: &mut Verdict) -> Result<()> {
    // (a) all experts selected is the full softmax mixture
    let (n, d_in, d_e, batch) = (4, 6, 5, 7);
    let mut r = rng(31);
    let bank = ExpertBank::new(
        (0..n).map(|_| (Tensor::randn(&[d_e, d_in], 0.5, &mut r), Tensor::randn(&[d_in, d_e], 0.5, &mut r))).collect(),
        Activation::Gelu,
    )?;
    let gate = Tensor::randn(&[n, d_in], 0.5, &mut r);
    let x = Tensor::randn(&[batch, d_in], 1.0, &mut r);
    let mut tape = Tape::new();
    let bv = bank.bind(&mut tape, 0)?;
    let gv = tape.input(&gate, false)?;
    let xv = tape.input(&x, false)?;
    let y = discrete_moe_forward(&mut tape, &bv, gv, xv, n)?.y;
    let got = tape.value(y).to_vec();
    let scores = tape.linear(xv, gv, None)?;
    let probs = softmax_rows(tape.value(scores), n);
    let mut want = vec![0.0; batch * d_in];
    for (e, &(w1, w2)) in bv.experts.iter().enumerate() {
        let out = dense_ffn_forward(&mut tape, w1, w2, xv, Activation::Gelu)?;
        for (i, o) in tape.value(out).iter().enumerate() {
            want[i] += probs[(i / d_in) * n + e] * o;
        }
    }
    let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    v.check(diff <= 1e-9, format!("(a) top-{n} of {n} vs softmax mixture: max |Δ| {diff:.2e}"));

    // (b) single noiseless sample, every unit kept and routed to 1
    let tiny = |variant| ModelConfig { variant, layers: 2, heads: 2, d_model: 8, d_ff: 16, d_z: 4, block_size: 6, vocab_size: 11, seed: 3, ..Default::default() };
    let dense = Model::init(&tiny(Variant::Dense))?;
    let cfg = ModelConfig { active_fraction: 1.0, k_samples: 1, router_noise: false, ..tiny(Variant::InfMoe) };
    let mut inf = Model::init(&cfg)?;
    for (name, t) in dense.names().iter().zip(&dense.params) {
        if let Some(dst) = inf.param_mut(name) {
            *dst = t.clone();
        }
    }
    for l in 0..2 {
        *inf.param_mut(&format!("h{l}.router.mu.w")).unwrap() = Tensor::zeros(&[4, 8]);
        *inf.param_mut(&format!("h{l}.router.mu.b")).unwrap() = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 0.0])?;
        *inf.param_mut(&format!("h{l}.ffn.wz")).unwrap() = Tensor::from_fn(&[16, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    }
    let toks = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8];
    let logits = |m: &Model| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &m.params, &toks, 2, 6, ForwardOptions::default(), &mut rng(0))?;
        Ok(tape.value(out.logits).to_vec())
    };
    let (a, b) = (logits(&dense)?, logits(&inf)?);
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    v.check(diff <= 1e-9, format!("(b) inf-moe with N=1, σ→0, K=1, unit mask vs dense logits: max |Δ| {diff:.2e}"));

    // (c)
    let sw = Model::init(&tiny(Variant::Switch))?;
    let moe = Model::init(&ModelConfig { top_k: 1, ..tiny(Variant::Moe) })?;
    let same = sw.names() == moe.names() && logits(&sw)? == logits(&moe)?;
    v.check(same, "(c) switch and moe with top_k=1 share parameters and logits exactly".into());
    Ok(())
}

/// Settings for the end-to-end runs.
struct Scale {
    name: &'static str,
    model: ModelConfig,
    train: TrainConfig,
    seeds: Vec<u64>,
}

fn scale() -> Scale {
    if full_scale() {
        Scale {
            name: "default",
            model: ModelConfig::default(),
            train: TrainConfig { entropy_log_interval: 1, ..Default::default() },
            seeds: vec![0, 1, 2],
        }
    } else {
        Scale {
            name: "reduced",
            model: ModelConfig { layers: 2, heads: 4, d_model: 64, d_ff: 256, d_z: 32, block_size: 64, ..Default::default() },
            train: TrainConfig {
                steps: 300,
                batch_size: 1024,
                lr: 1e-3,
                warmup_iters: 30,
                eval_interval: 100,
                entropy_log_interval: 1,
                eval_max_windows: 16,
                ..Default::default()
            },
            seeds: vec![0],
        }
    }
}

struct RunResult {
    variant: Variant,
    seed: u64,
    early: f64,
    late: f64,
    ppl: f64,
    metrics: MetricsLog,
    model: Model,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn end_to_end(s: &Scale, corpus: &Corpus) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for &seed in &s.seeds {
        for variant in Variant::ALL {
            let mc = ModelConfig { variant, seed, ..s.model.clone() };
            let tc = TrainConfig { seed, ..s.train.clone() };
            let res = train(&mc, &tc, corpus, &mut |_| Ok(()))?;
            let losses = res.metrics.losses();
            let w = (losses.len() / 10).max(1);
            let ppl = eval_ppl(&res.model, &corpus.val, EvalOptions::default())?.ppl;
            out.push(RunResult {
                variant,
                seed,
                early: mean(&losses[..w]),
                late: mean(&losses[losses.len() - w..]),
                ppl,
                metrics: res.metrics,
                model: res.model,
            });
        }
    }
    Ok(out)
}

fn c6_verdict(v: &mut Verdict, s: &Scale, runs: &[RunResult], corpus: &Corpus) -> Result<()> {
    for r in runs {
        v.check(
            r.late < r.early,
            format!("{} seed {}: {} steps, loss {:.4} → {:.4}, val ppl {:.4}", r.variant, r.seed, s.train.steps, r.early, r.late, r.ppl),
        );
    }
    let ppl_of = |var| mean(&runs.iter().filter(|r| r.variant == var).map(|r| r.ppl).collect::<Vec<_>>());
    let (inf, moe) = (ppl_of(Variant::InfMoe), ppl_of(Variant::Moe));
    let (ai, _) = count_params(&ModelConfig { variant: Variant::InfMoe, ..s.model.clone() });
    let (am, _) = count_params(&ModelConfig { variant: Variant::Moe, ..s.model.clone() });
    v.check(
        inf <= 1.02 * moe,
        format!("mean val ppl inf-moe {inf:.4} vs moe top-2 {moe:.4} × 1.02 = {:.4} (active params {ai} vs {am})", 1.02 * moe),
    );
    if !full_scale() {
        // one timed step per variant at the stated configuration
        let mut per_round = 0.0;
        for variant in Variant::ALL {
            let mc = ModelConfig { variant, ..Default::default() };
            let tc = TrainConfig { steps: 1, warmup_iters: 0, eval_interval: 1_000_000, ..Default::default() };
            let mut ms = 0.0;
            train(&mc, &tc, corpus, &mut |r| {
                ms = r.ms_per_step;
                Ok(())
            })?;
            per_round += ms / 1e3;
        }
        let hours = per_round * 3000.0 * 3.0 / 3600.0;
        v.check(
            false,
            format!(
                "stated scale not run: one default step of all four variants takes {per_round:.1} s, so 3000 steps × 3 seeds need ≈ {hours:.1} h of CPU against a 60 min budget (IMOE_ACCEPTANCE_FULL=1 runs it)"
            ),
        );
    }
    Ok(())
}

fn c7_k_flexibility(v: &mut Verdict, model: &Model, corpus: &Corpus) -> Result<()> {
    let mut med = Vec::new();
    for k in [1, 2, 4, 8] {
        let mut ppls = Vec::new();
        for seed in 0..3 {
            let opts = EvalOptions { k_samples: Some(k), max_windows: Some(128), seed };
            ppls.push(eval_ppl(model, &corpus.val, opts)?.ppl);
        }
        ppls.sort_by(f64::total_cmp);
        v.note(format!("K={k}: ppl over 3 seeds {:.4} / {:.4} / {:.4}", ppls[0], ppls[1], ppls[2]));
        med.push(ppls[1]);
    }
    v.check(med[3] <= med[0], format!("median ppl K=8 {:.4} ≤ K=1 {:.4}", med[3], med[0]));
    Ok(())
}

fn c8_latency(v: &mut Verdict) -> Result<()> {
    let cfg = BenchConfig::default();
    let rep = run_bench(&cfg)?;
    v.check(rep.failures.is_empty(), format!("{} cells, {} equivalence failures", rep.records.len() + rep.failures.len(), rep.failures.len()));
    let rep = rep.into_result()?;
    let med = |s, r| rep.record(s, r).map(|x| x.median_ms).unwrap_or(f64::NAN);
    let (fused, naive) = (med(Strategy::Fused, 0.25), med(Strategy::Naive, 0.25));
    v.check(fused <= naive / 1.1, format!("rate 0.25: fused {fused:.2} ms vs naive {naive:.2} ms, speedup {:.3}×", naive / fused));
    let md: Vec<f64> = cfg.active_rates.iter().map(|&r| med(Strategy::MaskedDense, r)).collect();
    let (lo, hi) = (md.iter().cloned().fold(f64::INFINITY, f64::min), md.iter().cloned().fold(0.0, f64::max));
    let list: Vec<String> = md.iter().map(|x| format!("{x:.2}")).collect();
    v.check((hi - lo) / lo < 0.15, format!("masked-dense ms across rates [{}]: spread {:.1}%", list.join(", "), 100.0 * (hi - lo) / lo));
    v.note(format!("fused at rate 1.0: {:.2} ms", med(Strategy::Fused, 1.0)));
    let unstable = rep.records.iter().filter(|r| r.unstable).count();
    if unstable > 0 {
        v.note(format!("{unstable} cells flagged unstable (p90 > 2 × p10)"));
    }
    Ok(())
}

fn c9_persistence(v: &mut Verdict, corpus: &Corpus) -> Result<()> {
    let mc = ModelConfig { layers: 2, d_model: 32, d_ff: 64, d_z: 8, block_size: 32, ..Default::default() };
    let tc = TrainConfig { steps: 20, batch_size: 256, warmup_iters: 5, eval_interval: 10, eval_max_windows: 8, seed: 4, ..Default::default() };
    let mut bytes = Vec::new();
    for _ in 0..2 {
        bytes.push(checkpoint::to_bytes(&train(&mc, &tc, corpus, &mut |_| Ok(()))?.model));
    }
    v.check(bytes[0] == bytes[1], format!("two same-seed runs: {} checkpoint bytes, identical: {}", bytes[0].len(), bytes[0] == bytes[1]));

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.imoe");
    let model = checkpoint::from_bytes(&bytes[0])?;
    checkpoint::save(&model, &path)?;
    let loaded = checkpoint::load(&path)?;
    let opts = EvalOptions { max_windows: Some(64), ..Default::default() };
    let (a, b) = (eval_ppl(&model, &corpus.val, opts)?.ppl, eval_ppl(&loaded, &corpus.val, opts)?.ppl);
    v.check(a.to_bits() == b.to_bits(), format!("ppl before save {a} / after load {b}"));

    let mut caught = 0;
    let trials = 50;
    let mut r = rng(9);
    for _ in 0..trials {
        let mut bad = bytes[0].clone();
        let i = r.random_range(0..bad.len());
        bad[i] ^= 1 << r.random_range(0..8);
        caught += usize::from(matches!(checkpoint::from_bytes(&bad), Err(Error::Integrity(_))));
    }
    v.check(caught == trials, format!("{caught}/{trials} single-bit corruptions rejected as integrity errors"));
    Ok(())
}

fn report(id: u32, title: &str, started: Instant, outcome: Result<Verdict>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let (pass, details) = match outcome {
        Ok(v) => (v.pass, v.details),
        Err(e) => (false, vec![format!("error: {e}")]),
    };
    println!("{} criterion {id}: {title} ({secs:.1} s)", if pass { "PASS" } else { "FAIL" });
    for d in details {
        println!("    {d}");
    }
    std::io::stdout().flush().ok();
    pass
}

fn run(f: impl FnOnce(&mut Verdict) -> Result<()>) -> Result<Verdict> {
    let mut v = Verdict::new();
    f(&mut v)?;
    Ok(v)
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let s = scale();
    println!("acceptance suite, end-to-end scale: {}", s.name);
    let mut passed = Vec::new();

    let t = Instant::now();
    passed.push(report(1, "gradient correctness", t, run(c1_gradients)));
    let t = Instant::now();
    passed.push(report(2, "mask contract", t, run(c2_mask_contract)));

    let t = Instant::now();
    let corpus = corpus();
    let runs = corpus.as_ref().map_err(|e| Error::Config(e.to_string())).and_then(|c| end_to_end(&s, c));
    let train_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    passed.push(report(3, "routing entropy", t, run(|v| {
        c3_entropy_unit(v)?;
        let runs = runs.as_ref().map_err(|e| Error::Config(e.to_string()))?;
        let inf = runs.iter().find(|r| r.variant == Variant::InfMoe).expect("inf-moe run");
        c3_entropy_trace(v, &inf.metrics, s.train.warmup_iters, s.name);
        Ok(())
    })));
    let t = Instant::now();
    passed.push(report(4, "Monte Carlo scaling", t, run(c4_monte_carlo)));
    let t = Instant::now();
    passed.push(report(5, "baseline equivalences", t, run(c5_equivalences)));
    let t = Instant::now();
    passed.push(report(6, "end-to-end training", t, run(|v| {
        v.note(format!("{} scale training of {} runs took {train_secs:.0} s", s.name, 4 * s.seeds.len()));
        let (runs, corpus) = match (&runs, &corpus) {
            (Ok(r), Ok(c)) => (r, c),
            (Err(e), _) | (_, Err(e)) => return Err(Error::Config(e.to_string())),
        };
        c6_verdict(v, &s, runs, corpus)
    })));
    let t = Instant::now();
    passed.push(report(7, "inference-time K", t, run(|v| {
        let (runs, corpus) = match (&runs, &corpus) {
            (Ok(r), Ok(c)) => (r, c),
            (Err(e), _) | (_, Err(e)) => return Err(Error::Config(e.to_string())),
        };
        let inf = runs.iter().find(|r| r.variant == Variant::InfMoe).expect("inf-moe run");
        v.note(format!("{} scale inf-moe checkpoint, 128 validation windows", s.name));
        c7_k_flexibility(v, &inf.model, corpus)
    })));
    let t = Instant::now();
    passed.push(report(8, "latency bench", t, run(c8_latency)));
    let t = Instant::now();
    passed.push(report(9, "determinism and persistence", t, run(|v| {
        let corpus = corpus.as_ref().map_err(|e| Error::Config(e.to_string()))?;
        c9_persistence(v, corpus)
    })));

    let n = passed.iter().filter(|&&p| p).count();
    println!("{n}/{} criteria passed", passed.len());
    if n < passed.len() && std::env::var("IMOE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
