//! `xatl` command-line interface. Machine-readable results go to stdout as
//! JSON, progress and diagnostics to stderr.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 failed
//! verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use xatl::checkpoint::load_raw;
use xatl::train::evaluate_checkpoint;
use xatl::transfer::{transfer_checkpoint, transfer_incompatibilities};
use xatl::verify::{parse_suites, run_suites, VerifyOptions};
use xatl::{ComponentSet, FreezePolicy, ModelConfig, ModelSource, TrainRunConfig, Trainer};

const SEED_ENV: &str = "XATL_SEED";

#[derive(Parser)]
#[command(name = "xatl", version, about = "Cross-architecture transfer for decoder language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Initialize a student checkpoint from a donor checkpoint.
    Transfer(TransferArgs),
    /// Run the built-in property suites.
    Verify(VerifyArgs),
    /// Perplexity of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Print checkpoint metadata and its tensor table.
    Inspect(InspectArgs),
}

/// Every override maps to the run-config field of the same name. Precedence:
/// flag, then XATL_SEED (seed only), then the file.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Preset name or model config path.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    donor: Option<PathBuf>,
    /// Components to transfer, e.g. `emb,ffn`.
    #[arg(long)]
    sets: Option<String>,
    #[arg(long)]
    freeze_policy: Option<String>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log_interval: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    donor: PathBuf,
    /// Preset name or model config path.
    #[arg(long)]
    student_config: String,
    /// Components to transfer, e.g. `emb,ffn,wo`; empty for none.
    #[arg(long)]
    sets: String,
    #[arg(long)]
    out: PathBuf,
    /// Student initialization seed; falls back to XATL_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// equivalence, gradients, transfer, lit, io or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Random cases per equivalence property.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    /// Relative decay error injected into recurrent retention.
    #[arg(long, default_value_t = 0.0, hide = true)]
    perturb_decay: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Window length; defaults to the model's context length.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    ckpt: PathBuf,
}

/// Failure with a specific exit code.
#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(c)) = err.downcast_ref::<Exit>() {
        return *c;
    }
    match err.chain().find_map(|e| e.downcast_ref::<xatl::Error>()) {
        Some(e) if !e.is_validation() => 2,
        _ => 1,
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| anyhow::Error::new(xatl::Error::Config(format!("{SEED_ENV}={v:?} is not an integer")))),
        Err(_) => Ok(None),
    }
}

fn model_source(s: &str) -> ModelSource {
    ModelSource::Named(s.to_string())
}

fn train_config(args: &TrainArgs) -> Result<TrainRunConfig> {
    let mut c = TrainRunConfig::from_json_file(&args.config)?;
    if let Some(seed) = env_seed()? {
        c.seed = seed;
    }
    if let Some(m) = &args.model {
        c.model = model_source(m);
    }
    if let Some(v) = &args.corpus {
        c.corpus = v.clone();
    }
    if let Some(v) = &args.out_dir {
        c.out_dir = v.clone();
    }
    if let Some(v) = &args.donor {
        c.donor = Some(v.clone());
    }
    if let Some(v) = &args.sets {
        c.component_sets = ComponentSet::parse(v)?;
    }
    if let Some(v) = &args.freeze_policy {
        c.freeze_policy = v.parse::<FreezePolicy>()?;
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = args.$f { c.$f = v; } )* };
    }
    set!(lr_max, lr_min, warmup_steps, total_steps, batch_size, seq_len, seed, log_interval, checkpoint_interval);
    if args.eval_interval.is_some() {
        c.eval_interval = args.eval_interval;
    }
    Ok(c)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = train_config(&args)?;
    let mut trainer = Trainer::new(config)?;
    let summary = trainer.run_with(|r| {
        let event = r.event.as_deref().map(|e| format!(" [{e}]")).unwrap_or_default();
        eprintln!("step {:>6}  loss {:.4}  lr {:.3e}  frozen {}{event}", r.step, r.loss, r.lr, r.frozen_params);
    })?;
    let last = summary.records.last();
    let out = json!({
        "out_dir": summary.out_dir,
        "steps": last.map(|r| r.step),
        "final_loss": last.map(|r| r.loss),
        "final_val_loss": summary.evals.last().map(|r| r.val_loss),
        "unfreeze_step": summary.unfreeze_step,
        "transferred": summary.plan.len(),
    });
    println!("{out}");
    Ok(())
}

fn resolve_model(s: &str) -> Result<ModelConfig> {
    Ok(model_source(s).resolve()?)
}

fn cmd_transfer(args: TransferArgs) -> Result<()> {
    let student = resolve_model(&args.student_config)?;
    let sets = ComponentSet::parse(&args.sets)?;
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    match transfer_checkpoint(&args.donor, &student, &sets, seed, &args.out) {
        Ok(plan) => {
            eprintln!("transferred {} tensors ({sets})", plan.len());
            println!("{}", json!({ "out": args.out, "entries": plan.len(), "plan": plan }));
            Ok(())
        }
        Err(e @ (xatl::Error::IncompatibleShape { .. } | xatl::Error::MissingParameter { .. })) => {
            report_incompatibilities(&args.donor, &student, &sets);
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn report_incompatibilities(donor: &Path, student: &ModelConfig, sets: &ComponentSet) {
    let Some(donor_model) = load_raw(donor).ok().and_then(|r| r.meta.model) else {
        return;
    };
    if let Ok(problems) = transfer_incompatibilities(&donor_model, student, sets) {
        eprintln!("{} incompatible tensors:", problems.len());
        for p in problems {
            eprintln!("  {p}");
        }
    }
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let suites = parse_suites(&args.suite)?;
    let opts = VerifyOptions {
        seed: match args.seed {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        },
        decay_perturbation: args.perturb_decay,
        cases: args.cases,
    };
    let report = run_suites(&suites, &opts);
    for p in &report.properties {
        let mark = if p.passed { "PASS" } else { "FAIL" };
        eprintln!("{mark}  {}/{}  {}", p.suite, p.name, p.detail);
    }
    eprintln!("{:.1}s", report.seconds);
    println!("{}", serde_json::to_string(&report)?);
    if report.passed() {
        Ok(())
    } else {
        Err(Exit(3).into())
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let p = evaluate_checkpoint(&args.ckpt, &args.corpus, args.seq_len, args.max_tokens)?;
    println!("{}", serde_json::to_string(&p)?);
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let raw = load_raw(&args.ckpt).with_context(|| format!("reading {}", args.ckpt.display()))?;
    let tensors: Vec<_> = raw
        .tensors
        .iter()
        .map(|(name, t)| json!({ "name": name, "dtype": t.dtype().name(), "dims": t.dims() }))
        .collect();
    let scalars: usize = raw.tensors.values().map(|t| t.dims().iter().product::<usize>()).sum();
    println!("{}", json!({ "meta": raw.meta, "parameters": scalars, "tensors": tensors }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            if code != 3 {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(code)
        }
    }
}
