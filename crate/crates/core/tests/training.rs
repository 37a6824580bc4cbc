use imoe_core::checkpoint;
use imoe_core::data::Corpus;
use imoe_core::model::{ForwardOptions, Model, ModelConfig, Variant};
use imoe_core::training::{
    adamw_step, clip_grad_norm, eval_ppl, run_ablation, train, train_model, AblationAxis, EvalOptions, OptimizerState,
    TrainConfig,
};
use imoe_core::{Error, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 2,
        heads: 2,
        d_model: 32,
        d_ff: 128,
        d_z: 16,
        block_size: 32,
        seed: 1,
        ..Default::default()
    }
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 512,
        lr: 3e-3,
        warmup_iters: steps.min(20),
        eval_interval: 50,
        entropy_log_interval: 10,
        eval_max_windows: 8,
        seed: 2,
        ..Default::default()
    }
}

fn repeated(len: usize) -> Vec<u8> {
    b"the quick brown fox jumps over the lazy dog; ".iter().copied().cycle().take(len).collect()
}

fn text_corpus() -> Corpus {
    let text = include_str!("../src/training.rs").as_bytes().to_vec();
    Corpus::split(text, 0.9).unwrap()
}

fn one_param(v: f64) -> Vec<Tensor> {
    vec![Tensor::new(vec![3], vec![v, -v, 2.0 * v]).unwrap().with_grad()]
}

#[test]
fn adamw_pure_decay() {
    let cfg = TrainConfig { weight_decay: 0.1, ..Default::default() };
    let mut p = one_param(1.5);
    let mut s = OptimizerState::new(&p);
    adamw_step(&mut s, &mut p, &[true], 0.01, &cfg).unwrap();
    let f = 1.0 - 0.01 * 0.1;
    assert_eq!(p[0].data(), &[1.5 * f, -1.5 * f, 3.0 * f]);
    let mut q = one_param(1.5);
    adamw_step(&mut OptimizerState::new(&q), &mut q, &[false], 0.01, &cfg).unwrap();
    assert_eq!(q[0].data(), &[1.5, -1.5, 3.0]);
}

#[test]
fn adamw_single_step_closed_form() {
    let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
    let mut p = one_param(1.0);
    p[0].accumulate_grad(&[0.3, -2.0, 1e-9]).unwrap();
    let mut s = OptimizerState::new(&p);
    adamw_step(&mut s, &mut p, &[true], 0.1, &cfg).unwrap();
    // after bias correction m̂ = g and v̂ = g², so Δ = −lr·g/(|g| + eps)
    for (i, (&g, &w0)) in [0.3f64, -2.0, 1e-9].iter().zip(&[1.0, -1.0, 2.0]).enumerate() {
        let want = w0 - 0.1 * g / (g.abs() + 1e-8);
        assert!((p[0].data()[i] - want).abs() < 1e-15, "{i}");
    }
}

#[test]
fn adamw_constant_gradient_step_tends_to_lr() {
    let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
    let mut p = one_param(0.0);
    let mut s = OptimizerState::new(&p);
    let mut last = 0.0;
    for _ in 0..2000 {
        p[0].zero_grad();
        p[0].accumulate_grad(&[0.7, 0.7, 0.7]).unwrap();
        let before = p[0].data()[0];
        adamw_step(&mut s, &mut p, &[true], 0.01, &cfg).unwrap();
        last = before - p[0].data()[0];
    }
    assert!((last - 0.01).abs() < 1e-9, "{last}");
    assert_eq!(s.step, 2000);
}

#[test]
fn adamw_rejects_non_finite_gradients() {
    let mut p = one_param(1.0);
    p[0].grad_mut().unwrap()[1] = f64::NAN;
    let mut s = OptimizerState::new(&p);
    assert!(matches!(adamw_step(&mut s, &mut p, &[true], 0.1, &TrainConfig::default()), Err(Error::Numeric(_))));
    assert_eq!(s.step, 0);
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut p = vec![Tensor::zeros(&[2]).with_grad(), Tensor::zeros(&[1]).with_grad()];
    p[0].accumulate_grad(&[3.0, 0.0]).unwrap();
    p[1].accumulate_grad(&[4.0]).unwrap();
    assert_eq!(clip_grad_norm(&mut p, 1.0).unwrap(), 5.0);
    assert!((p[0].grad().unwrap()[0] - 0.6).abs() < 1e-15 && (p[1].grad().unwrap()[0] - 0.8).abs() < 1e-15);
    assert_eq!(clip_grad_norm(&mut p, 10.0).unwrap(), 1.0);
}

#[test]
fn zero_steps_returns_the_initialisation() {
    let c = small(Variant::InfMoe);
    let out = train(&c, &quick(0), &text_corpus(), &mut |_| Ok(())).unwrap();
    assert!(out.metrics.records.is_empty());
    assert_eq!(checkpoint::to_bytes(&out.model), checkpoint::to_bytes(&Model::init(&c).unwrap()));
}

#[test]
fn every_variant_memorises_a_repeated_string() {
    let corpus = Corpus { train: repeated(1024), val: repeated(200) };
    for v in Variant::ALL {
        let cfg = TrainConfig { eval_interval: 1000, ..quick(500) };
        let out = train(&small(v), &cfg, &corpus, &mut |_| Ok(())).unwrap();
        let tail = &out.metrics.losses()[480..];
        let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(final_loss < 0.1, "{v}: {final_loss}");
        let ppl = eval_ppl(&out.model, &corpus.val, EvalOptions::default()).unwrap().ppl;
        assert!(ppl < 1.05, "{v}: {ppl}");
    }
}

#[test]
fn loss_falls_and_entropy_stays_high() {
    let corpus = text_corpus();
    for v in Variant::ALL {
        let out = train(&small(v), &quick(150), &corpus, &mut |_| Ok(())).unwrap();
        let l = out.metrics.losses();
        let median = |s: &[f64]| {
            let mut s = s.to_vec();
            s.sort_by(f64::total_cmp);
            s[s.len() / 2]
        };
        assert!(median(&l[120..]) < median(&l[..30]), "{v}");
        for r in &out.metrics.records {
            for e in r.entropy.iter().flatten() {
                assert!((0.0..=1.0).contains(e));
                if v == Variant::InfMoe && r.step > 20 {
                    assert!(*e > 0.5, "step {} entropy {e}", r.step);
                }
            }
            if v == Variant::Dense {
                assert!(r.entropy.iter().all(Option::is_none));
            }
        }
        assert!(out.metrics.records.last().unwrap().ppl.is_some());
    }
}

#[test]
fn every_tensor_receives_gradient() {
    let c = small(Variant::InfMoe);
    let mut m = Model::init(&c).unwrap();
    let corpus = text_corpus();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let (x, y) = imoe_core::data::sample_batch(&corpus.train, 4, 32, &mut r).unwrap();
    for p in m.params.iter_mut() {
        p.set_requires_grad(true);
    }
    let mut tape = Tape::new();
    let (l, _, _) = m.loss(&mut tape, &m.params, &x, &y, 4, 32, ForwardOptions::default(), &mut r).unwrap();
    tape.backward(l, &mut m.params).unwrap();
    for (name, p) in m.names().iter().zip(&m.params) {
        let norm: f64 = p.grad().unwrap().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm > 0.0, "{name} has no gradient");
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let corpus = text_corpus();
    let run = || checkpoint::to_bytes(&train(&small(Variant::InfMoe), &quick(20), &corpus, &mut |_| Ok(())).unwrap().model);
    assert_eq!(run(), run());
}

#[test]
fn untrained_zero_head_scores_the_vocabulary_size() {
    let mut m = Model::init(&small(Variant::Moe)).unwrap();
    *m.param_mut("lm_head.w").unwrap() = Tensor::zeros(&[256, 32]);
    let r = eval_ppl(&m, &text_corpus().val, EvalOptions::default()).unwrap();
    assert!((r.ppl - 256.0).abs() < 1e-9, "{}", r.ppl);
    assert!(matches!(eval_ppl(&m, &[1, 2, 3], EvalOptions::default()), Err(Error::Contract(_))));
}

#[test]
fn checkpoint_round_trip_preserves_perplexity() {
    let corpus = text_corpus();
    let out = train(&small(Variant::InfMoe), &quick(10), &corpus, &mut |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.imoe");
    checkpoint::save(&out.model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let a = eval_ppl(&out.model, &corpus.val, EvalOptions::default()).unwrap().ppl;
    let b = eval_ppl(&loaded, &corpus.val, EvalOptions::default()).unwrap().ppl;
    let c = eval_ppl(&loaded, &corpus.val, EvalOptions::default()).unwrap().ppl;
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(b.to_bits(), c.to_bits());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let m = Model::init(&small(Variant::Switch)).unwrap();
    let bytes = checkpoint::to_bytes(&m);
    for pos in [5, 40, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(matches!(checkpoint::from_bytes(&bad), Err(Error::Integrity(_))), "flip at {pos}");
    }
    assert!(matches!(checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Integrity(_))));
    assert!(matches!(checkpoint::from_bytes(b"GGUF0000000000"), Err(Error::Integrity(_))));
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.config, m.config);
}

#[test]
fn overflow_aborts_as_divergence() {
    let mut m = Model::init(&small(Variant::Dense)).unwrap();
    m.param_mut("tok_emb").unwrap().data_mut().fill(f64::MAX / 2.0);
    match train_model(m, &quick(5), &text_corpus(), &mut |_| Ok(())) {
        Err(Error::Divergence { step, detail }) => {
            assert_eq!(step, 1);
            assert!(detail.contains("last 20 steps"));
        }
        other => panic!("expected divergence, got {:?}", other.err()),
    }
}

#[test]
fn single_value_sweep_matches_a_direct_run() {
    let corpus = text_corpus();
    let cfg = quick(15);
    let base = small(Variant::InfMoe);
    let rows = run_ablation(AblationAxis::Dz, &[8], &base, &cfg, &corpus, None).unwrap();
    assert_eq!(rows.len(), 1);
    let direct = train(&ModelConfig { d_z: 8, ..base }, &cfg, &corpus, &mut |_| Ok(())).unwrap();
    let ppl = eval_ppl(&direct.model, &corpus.val, EvalOptions::default()).unwrap().ppl;
    assert_eq!(rows[0].ppl.to_bits(), ppl.to_bits());
    assert_eq!(rows[0].final_entropy, direct.metrics.final_entropy());
}

#[test]
fn noiseless_k_sweep_is_flat() {
    let corpus = text_corpus();
    let base = ModelConfig { router_noise: false, ..small(Variant::InfMoe) };
    let rows = run_ablation(AblationAxis::K, &[1, 2, 4], &base, &quick(15), &corpus, None).unwrap();
    assert_eq!(rows[0].ppl.to_bits(), rows[1].ppl.to_bits());
    assert_eq!(rows[0].ppl.to_bits(), rows[2].ppl.to_bits());
}

#[test]
fn ablation_rejects_mismatched_axes_and_empty_sweeps() {
    let corpus = text_corpus();
    let c = quick(1);
    assert!(matches!(run_ablation(AblationAxis::K, &[], &small(Variant::InfMoe), &c, &corpus, None), Err(Error::Config(_))));
    assert!(matches!(run_ablation(AblationAxis::Dz, &[4], &small(Variant::Moe), &c, &corpus, None), Err(Error::Config(_))));
    assert!(matches!(run_ablation(AblationAxis::Experts, &[4], &small(Variant::Dense), &c, &corpus, None), Err(Error::Config(_))));
    assert!(AblationAxis::parse("width").is_err());
}

#[test]
fn inference_k_can_differ_from_training_k() {
    let corpus = text_corpus();
    let out = train(&small(Variant::InfMoe), &quick(20), &corpus, &mut |_| Ok(())).unwrap();
    let trained = eval_ppl(&out.model, &corpus.val, EvalOptions::default()).unwrap().ppl;
    let same = eval_ppl(&out.model, &corpus.val, EvalOptions { k_samples: Some(2), ..Default::default() }).unwrap().ppl;
    assert_eq!(trained.to_bits(), same.to_bits());
    for k in [1, 4, 8] {
        let p = eval_ppl(&out.model, &corpus.val, EvalOptions { k_samples: Some(k), ..Default::default() }).unwrap().ppl;
        assert!(p.is_finite() && p >= 1.0);
    }
}
