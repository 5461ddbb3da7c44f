//! Command-line surface: train, eval, finetune, analyze, rates, gradcheck.
//!
//! Every subcommand honors `--config <json>`, `--seed`, and `--out`; the
//! `COMPETESMOE_OUT` environment variable backs `--out` when the flag and
//! the config both leave the output directory unset. Nothing outside the
//! output directory is ever written. Exit codes: 0 success, 2 usage,
//! 3 config error, 4 runtime error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use competesmoe::checkpoint;
use competesmoe::config::RunConfig;
use competesmoe::data::{classification_set, Corpus, Split};
use competesmoe::gradcheck;
use competesmoe::metrics::entropy_table;
use competesmoe::stats::{
    rate_experiment, summary_json, write_rates_csv, Atom, MixingMeasure, RateExperimentConfig,
};
use competesmoe::train::{evaluate, finetune, Trainer};
use competesmoe::{Error, Result};

/// The corpus fallback stream is pinned so `--seed` varies initialization
/// and training order but never the data itself — seed sweeps stay
/// comparable.
const SYNTHETIC_CORPUS_SEED: u64 = 0;

#[derive(Parser)]
#[command(
    name = "competesmoe",
    about = "Sparse mixture-of-experts laboratory: competition routing, router distillation, and an estimation-rate workbench",
    version
)]
struct Cli {
    /// JSON run configuration; omitted means the built-in nano defaults.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Override the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory (falls back to the config's out_dir, then the
    /// COMPETESMOE_OUT environment variable).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured algorithm end to end, streaming metrics and
    /// checkpoints to the output directory.
    Train,
    /// Evaluate a checkpoint on one corpus split.
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Attach a classifier head to a checkpoint and finetune the experts
    /// (routers frozen) on a synthetic two-class probe task.
    Finetune {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
    },
    /// Print the per-router entropy table for one or more routing-record
    /// files.
    Analyze {
        /// records.csv files produced by training runs.
        #[arg(required = true, value_name = "RECORDS")]
        records: Vec<PathBuf>,
    },
    /// Run the statistical convergence-rate experiment and emit its
    /// summary JSON.
    Rates {
        /// Built-in experiment; overridden entirely by --config.
        #[arg(long, default_value = "thm2-k2")]
        preset: String,
        /// Worker threads for parallel trials (0 = one per core).
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Verify autodiff gradients against finite differences, op by op and
    /// through a two-block model.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Ground truth plus experiment knobs for the `rates` subcommand.
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RatesDocument {
    truth: Vec<Atom>,
    #[serde(default)]
    experiment: RateExperimentConfig,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    // `rates` reads its own config schema (ground truth + experiment
    // knobs); `analyze` needs no config. Everything else shares RunConfig.
    if let Command::Rates { preset, workers } = &cli.command {
        let out = resolve_out(cli.out.as_deref(), None);
        ensure_out(out.as_deref())?;
        return cmd_rates(cli.config.as_deref(), preset, *workers, cli.seed, out.as_deref());
    }
    if let Command::Analyze { records } = &cli.command {
        let out = resolve_out(cli.out.as_deref(), None);
        ensure_out(out.as_deref())?;
        return cmd_analyze(records, out.as_deref());
    }

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.trainer.seed = seed;
        cfg.finetune.seed = seed;
    }
    let out = resolve_out(cli.out.as_deref(), cfg.out_dir.as_deref());
    ensure_out(out.as_deref())?;

    match cli.command {
        Command::Train => cmd_train(&cfg, out.as_deref()),
        Command::Eval { checkpoint, split } => {
            cmd_eval(&cfg, &checkpoint, split.into(), out.as_deref())
        }
        Command::Finetune { checkpoint } => cmd_finetune(&cfg, &checkpoint, out.as_deref()),
        Command::Gradcheck => cmd_gradcheck(cfg.trainer.seed, out.as_deref()),
        Command::Analyze { .. } | Command::Rates { .. } => unreachable!("handled above"),
    }
}

fn ensure_out(out: Option<&Path>) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Flag beats config beats environment; `None` means run without
/// artifacts.
fn resolve_out(flag: Option<&Path>, config: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os("COMPETESMOE_OUT").map(PathBuf::from))
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load_or_synthetic(
        cfg.data.path.as_deref(),
        cfg.data.max_bytes,
        cfg.data.fractions,
        SYNTHETIC_CORPUS_SEED,
    )
}

/// A checkpoint trained on one vocabulary must not be silently evaluated
/// against another: ids would denote different bytes.
fn check_vocab(ckpt: &checkpoint::Checkpoint, corpus: &Corpus, what: &str) -> Result<()> {
    if let Some(vocab) = &ckpt.vocab_bytes {
        if vocab.as_slice() != corpus.vocab_bytes() {
            return Err(Error::config(
                what,
                format!(
                    "checkpoint vocabulary ({} bytes) does not match the configured corpus ({} bytes); point data.path at the corpus the model was trained on",
                    vocab.len(),
                    corpus.vocab_size()
                ),
            ));
        }
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    println!(
        "training {} for {} steps (corpus {} ids, vocab {}, seed {})",
        cfg.trainer.algorithm.name(),
        cfg.trainer.steps,
        corpus.len(),
        corpus.vocab_size(),
        cfg.trainer.seed
    );
    if let Some(dir) = out {
        println!("streaming metrics.csv / records.csv / checkpoints to {}", dir.display());
    }
    let mut trainer = Trainer::new(cfg, corpus)?;
    let outcome = trainer.run(out)?;
    println!(
        "done in {:.1}s: valid bpc {:.4}, test bpc {:.4}, {} expert calls",
        outcome.wall_ms / 1e3,
        outcome.final_valid.bpc,
        outcome.test.bpc,
        outcome.total_expert_calls
    );
    if let Some((step, nll)) = outcome.best_valid {
        println!(
            "best validation at step {step}: bpc {:.4}",
            nll / std::f64::consts::LN_2
        );
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, ckpt_path: &Path, split: Split, out: Option<&Path>) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let corpus = load_corpus(cfg)?;
    check_vocab(&ckpt, &corpus, "eval")?;
    let model = ckpt.into_model();
    let context = cfg.trainer.context.min(model.config.context);
    let report = evaluate(&model, &corpus, split, context, cfg.trainer.batch_size)?;
    println!(
        "{} split: nll {:.6}, bpc {:.4}, perplexity {:.3} over {} tokens",
        split.name(),
        report.nll,
        report.bpc,
        report.perplexity,
        report.tokens
    );
    for (slot, h) in report.entropy.iter().enumerate() {
        println!("  routing entropy, smoe block {slot}: {h:.4}");
    }
    if let Some(dir) = out {
        let doc = serde_json::json!({
            "split": split.name(),
            "nll": report.nll,
            "bpc": report.bpc,
            "perplexity": report.perplexity,
            "tokens": report.tokens,
            "entropy": report.entropy,
        });
        std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&doc)?)?;
    }
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, ckpt_path: &Path, out: Option<&Path>) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let corpus = load_corpus(cfg)?;
    check_vocab(&ckpt, &corpus, "finetune")?;
    let mut model = ckpt.into_model();
    let context = cfg.trainer.context.min(model.config.context);
    let seed = cfg.finetune.seed;
    let train_set = classification_set(&corpus, 256, context, seed, 50)?;
    let test_set = classification_set(&corpus, 64, context, seed, 51)?;
    println!(
        "finetuning on a {}-window probe task (markers {:?}, head_only={})",
        train_set.inputs.len(),
        train_set.markers,
        cfg.finetune.head_only
    );
    let report = finetune(&mut model, &train_set, &test_set, &cfg.finetune)?;
    println!(
        "after {} steps: loss {:.4}, train accuracy {:.3}, test accuracy {:.3}",
        report.steps, report.final_loss, report.train_accuracy, report.test_accuracy
    );
    if let Some(dir) = out {
        std::fs::write(dir.join("finetune.json"), serde_json::to_string_pretty(&report)?)?;
        checkpoint::save(
            &dir.join("finetuned.ckpt"),
            &model,
            Some(corpus.vocab_bytes()),
            report.steps,
        )?;
    }
    Ok(())
}

fn cmd_analyze(records: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let table = entropy_table(records)?;
    let rendered = table.to_string();
    print!("{rendered}");
    if let Some(dir) = out {
        std::fs::write(dir.join("entropy.txt"), rendered)?;
    }
    Ok(())
}

fn rates_document(config: Option<&Path>, preset: &str) -> Result<RatesDocument> {
    match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(path.display().to_string(), e.to_string()))
        }
        None => match preset {
            // Two affine scalar experts, exact-fitted (k = k*) under
            // competition gating with K = 1. Their affinities |2x+1| and
            // |−x+2| cross exactly once in [−1, 1], so each atom wins its
            // own region of inputs and both stay identifiable.
            "thm2-k2" => Ok(RatesDocument {
                truth: vec![Atom::new(vec![2.0, 1.0], 0.2), Atom::new(vec![-1.0, 2.0], 0.4)],
                experiment: RateExperimentConfig::default(),
            }),
            other => Err(Error::config(
                "rates.preset",
                format!("unknown preset {other:?}; available: thm2-k2"),
            )),
        },
    }
}

fn cmd_rates(
    config: Option<&Path>,
    preset: &str,
    workers: usize,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let mut doc = rates_document(config, preset)?;
    if let Some(seed) = seed {
        doc.experiment.seed = seed;
    }
    let truth = MixingMeasure::new(doc.truth)?;
    let cfg = doc.experiment;
    eprintln!(
        "fitting {} trials at each of {:?} samples (seed {})",
        cfg.trials, cfg.n_grid, cfg.seed
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::RateExperiment(e.to_string()))?;
    let report = pool.install(|| rate_experiment(&truth, &cfg))?;
    let summary = summary_json(&report);
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(dir) = out {
        write_rates_csv(&dir.join("rates.csv"), &report.records)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, out: Option<&Path>) -> Result<()> {
    let reports = gradcheck::run_all(seed)?;
    let mut lines = String::new();
    let mut failures = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        lines.push_str(&format!(
            "{:<22} max rel err {:>10.3e}  tol {:>8.1e}  {verdict}\n",
            r.name, r.max_rel_err, r.tol
        ));
        if !r.passed() {
            failures.push(r.name.clone());
        }
    }
    print!("{lines}");
    println!("{} checks, {} failed", reports.len(), failures.len());
    if let Some(dir) = out {
        std::fs::write(dir.join("gradcheck.txt"), lines)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Gradcheck(failures.join(", ")))
    }
}
