//! `imoe`: train, evaluate, sweep and benchmark continuous-expert language
//! models from the command line.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use imoe_core::bench::{bench_csv, run_bench};
use imoe_core::data::{read_text, Corpus};
use imoe_core::model::{count_params, Variant};
use imoe_core::training::{ablation_csv, eval_ppl, metrics_header, metrics_row, run_ablation, train, AblationAxis, EvalOptions};
use imoe_core::{checkpoint, Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "imoe", version, about = "Continuous-expert mixture-of-experts language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint, metrics and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides both the model and the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// dense, switch, moe or inf-moe.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Print validation perplexity and throughput of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Byte-level text to score.
        #[arg(long)]
        data: PathBuf,
        /// Monte Carlo samples at inference (inf-moe only).
        #[arg(long = "K")]
        k: Option<usize>,
        /// Which part of the text to score.
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        #[arg(long, default_value_t = 0.9)]
        train_fraction: f64,
    },
    /// Train and evaluate one model per value of a hyperparameter.
    Ablate {
        /// dz, K or experts.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 1,2,4,8.
        #[arg(long)]
        values: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-FFN forward latency across active rates and strategies.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads().and_then(|_| match cli.command {
        Command::Train { config, out, seed, variant } => cmd_train(&config, &out, seed, variant.as_deref()),
        Command::Eval { checkpoint, data, k, split, train_fraction } => cmd_eval(&checkpoint, &data, k, split, train_fraction),
        Command::Ablate { axis, values, config, out } => cmd_ablate(&axis, &values, &config, &out),
        Command::Bench { config, out } => cmd_bench(&config, &out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Integrity(_) | Error::Contract(_) | Error::Io(_) | Error::Json(_) => 2,
        Error::Divergence { .. } | Error::Numeric(_) => 3,
        Error::Correctness(_) => 4,
        Error::Dimension(_) | Error::Index(_) => 1,
    }
}

/// `IMOE_THREADS` caps parallelism. Every command here already runs on one
/// thread, so the value is only checked.
fn threads() -> Result<usize> {
    match std::env::var("IMOE_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("IMOE_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", out.display())))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, variant: Option<&str>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    if let Some(v) = variant {
        cfg.model.variant = v.parse::<Variant>()?;
    }
    cfg.validate()?;
    let corpus = Corpus::load(&cfg.data.corpus, cfg.data.train_fraction)?;
    create_out(out)?;
    fs::write(out.join("resolved_config.json"), cfg.to_json())?;

    let (active, total) = count_params(&cfg.model);
    eprintln!("{}: {total} parameters, {active} active per token", cfg.model.variant);
    let mut metrics = fs::File::create(out.join("metrics.csv"))?;
    metrics.write_all(metrics_header(cfg.model.layers).as_bytes())?;
    let interval = cfg.train.eval_interval;
    let outcome = train(&cfg.model, &cfg.train, &corpus, &mut |r| {
        metrics.write_all(metrics_row(r).as_bytes())?;
        if r.step % interval == 0 || r.ppl.is_some() {
            let ppl = r.ppl.map(|p| format!(" val_ppl {p:.4}")).unwrap_or_default();
            eprintln!("step {} loss {:.4}{ppl} ({:.0} ms/step)", r.step, r.loss, r.ms_per_step);
        }
        Ok(())
    })?;
    metrics.flush()?;
    checkpoint::save(&outcome.model, &out.join("checkpoint.imoe"))?;
    if let Some(ppl) = outcome.metrics.records.last().and_then(|r| r.ppl) {
        println!("val_ppl={ppl}");
    }
    Ok(())
}

fn cmd_eval(path: &Path, data: &Path, k: Option<usize>, split: Split, train_fraction: f64) -> Result<()> {
    let model = checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        e => e,
    })?;
    if let Some(k) = k {
        if model.config.variant != Variant::InfMoe {
            return Err(Error::Config(format!("--K applies only to inf-moe checkpoints, this one is {}", model.config.variant)));
        }
        if k == 0 {
            return Err(Error::Config("--K must be at least 1".into()));
        }
    }
    let text = match split {
        Split::All => read_text(data)?,
        Split::Train => Corpus::load(data, train_fraction)?.train,
        Split::Val => Corpus::load(data, train_fraction)?.val,
    };
    let report = eval_ppl(&model, &text, EvalOptions { k_samples: k, ..Default::default() })?;
    println!("ppl={}", report.ppl);
    println!("tokens_per_s={:.1}", report.tokens_per_s());
    Ok(())
}

fn parse_values(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Err(Error::Config("--values is empty".into()));
    }
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("--values entry {v:?} is not a nonnegative integer"))))
        .collect()
}

fn cmd_ablate(axis: &str, values: &str, config: &Path, out: &Path) -> Result<()> {
    let axis = AblationAxis::parse(axis)?;
    let values = parse_values(values)?;
    let cfg = load_config(config)?;
    let corpus = Corpus::load(&cfg.data.corpus, cfg.data.train_fraction)?;
    create_out(out)?;
    fs::write(out.join("resolved_config.json"), cfg.to_json())?;
    let rows = run_ablation(axis, &values, &cfg.model, &cfg.train, &corpus, None)?;
    let csv = ablation_csv(&rows);
    fs::write(out.join(format!("ablation_{}.csv", axis.name())), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_bench(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    create_out(out)?;
    let report = run_bench(&cfg.bench)?;
    let csv = bench_csv(&cfg.bench, &report);
    fs::write(out.join("bench.csv"), &csv)?;
    print!("{csv}");
    for r in report.records.iter().filter(|r| r.unstable) {
        eprintln!("warning: {} at rate {} is unstable (p90 {:.3} ms > 2 × p10 {:.3} ms)", r.strategy, r.active_rate, r.p90_ms, r.p10_ms);
    }
    report.into_result().map(|_| ())
}
