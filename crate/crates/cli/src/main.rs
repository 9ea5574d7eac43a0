//! Command-line front end. Machine output (JSON, CSV) goes to stdout,
//! progress and logs to stderr, and every subcommand is deterministic
//! given its flags and seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use denoiselm::config::RunConfig;
use denoiselm::corpus::{self, Corpus};
use denoiselm::encoder::init_pair;
use denoiselm::finetune::{
    accuracy_summary, parity_task, Divergence, Example, FinetuneConfig, FinetuneReport,
    Finetuner, PdrConfig, TaskSpec,
};
use denoiselm::fused::{bench, KernelOp};
use denoiselm::gradcheck;
use denoiselm::rng::{RootRng, Stream};
use denoiselm::trainer::optim::OptimizerState;
use denoiselm::trainer::schedule::ScheduleConfig;
use denoiselm::trainer::{self, checkpoint, param_sizes};
use denoiselm::zero::{self, BytesConfig, GB, GIB};

mod verify;

#[derive(Parser)]
#[command(name = "denoiselm", version, about = "Denoising-pretraining lab: corpus generation, pretraining, fine-tuning, memory planning, kernel benchmarks, verification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic corpus: seeded order-2 Markov chain, one document
    /// per blank-line-separated block.
    GenCorpus(GenCorpusArgs),
    /// Joint auxiliary+main pretraining from a JSON config.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained checkpoint on classification tasks.
    Finetune(FinetuneArgs),
    /// Per-GPU memory footprint for a parameter count, GPU count and
    /// sharding stage.
    PlanMemory(PlanArgs),
    /// Time fused against unfused half-precision kernels and compare
    /// outputs bit for bit.
    BenchFused(BenchArgs),
    /// Finite-difference check of every autodiff op.
    GradCheck(GradCheckArgs),
    /// Release gate: gradient checks, loss identities, planner table,
    /// fused-kernel equivalence. One line per check, nonzero exit on any
    /// failure.
    Verify,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    docs: usize,
    #[arg(long, default_value_t = 200)]
    min_len: usize,
    #[arg(long, default_value_t = 1000)]
    max_len: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print parameter counts per component (aux/main/shared) and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task file: {"schedule": {...}, "batch_size": n, "tasks": [...]}.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pdr_alpha: f64,
    #[arg(long, default_value_t = 1e-3)]
    pdr_c: f64,
    /// forward-kl or symmetric-kl.
    #[arg(long, default_value = "forward-kl")]
    divergence: String,
    /// Number of independent runs; seed i uses base_seed + i.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 1)]
    base_seed: u64,
    /// Directory for report.json and seed-accuracy.csv.
    #[arg(long, default_value = "finetune-out")]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    /// Base, Large, XL or XXL.
    #[arg(long)]
    preset: Option<String>,
    /// Explicit parameter count, e.g. 6e9. Alternative to --preset.
    #[arg(long)]
    params: Option<f64>,
    #[arg(long)]
    gpus: u32,
    /// 0 = replicated, 1 = +optimizer shard, 2 = +gradient shard,
    /// 3 = +parameter shard.
    #[arg(long)]
    stage: u8,
    /// Optimizer bytes per parameter (fp32 master + two Adam moments +
    /// fp32 gradient = 16).
    #[arg(long, default_value_t = 16.0)]
    opt_bytes: f64,
    /// Report GiB (2^30 bytes) instead of GB (10^9).
    #[arg(long)]
    gib: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// identity, softmax, softmax-dropout or layernorm.
    #[arg(long)]
    op: String,
    /// Total elements; processed in rows of 1024 when divisible.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 9)]
    reps: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout_p: f64,
    /// Seed for the dropout mask key.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenCorpus(a) => cmd_gen_corpus(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::PlanMemory(a) => cmd_plan_memory(a),
        Cmd::BenchFused(a) => cmd_bench_fused(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
        Cmd::Verify => verify::run(),
    }
}

fn cmd_gen_corpus(a: GenCorpusArgs) -> Result<()> {
    if a.min_len > a.max_len {
        bail!("--min-len {} exceeds --max-len {}", a.min_len, a.max_len);
    }
    let text = corpus::generate(a.docs, (a.min_len, a.max_len), a.seed)?;
    fs::write(&a.out, &text).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("wrote {} docs ({} bytes) to {}", a.docs, text.len(), a.out.display());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config)
        .with_context(|| format!("reading {}", a.config.display()))?;
    let cfg = RunConfig::from_json(&text)?;

    if a.dry_run {
        let pair = init_pair::<f32>(&cfg.model, &RootRng::new(cfg.seed))?;
        let mut counts: BTreeMap<String, usize> =
            [("aux".into(), 0), ("main".into(), 0), ("shared".into(), 0)].into();
        let mut total = 0usize;
        pair.for_each_param(|name, t| {
            let component = name.split('.').next().unwrap_or(name);
            *counts.entry(component.to_string()).or_default() += t.len();
            total += t.len();
        });
        counts.insert("total".into(), total);
        println!("{}", serde_json::to_string_pretty(&counts)?);
        return Ok(());
    }

    let out_dir = match (&a.out, &cfg.out_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => bail!("no output directory: pass --out or set `out_dir` in the config"),
    };
    let corpus = Corpus::load(Path::new(&cfg.data.corpus))?;
    let every = cfg.metric_every;
    let max = cfg.schedule.max_steps;
    let report = trainer::train::<f32, _>(&cfg, &corpus, &out_dir, a.resume.as_deref(), |row| {
        if row.step % every == 0 || row.step == max {
            eprintln!(
                "step {:>6}/{max}  loss {:.4}  replace_rate {:.3}  lr {:.3e}",
                row.step, row.loss_total, row.replace_rate, row.lr
            );
        }
    })?;
    eprintln!(
        "done: {} steps run, final checkpoint {}",
        report.steps_run,
        report.final_checkpoint.display()
    );
    Ok(())
}

/// On-disk task file. Tasks are either written out example by example or
/// named generators so toy experiments stay one short JSON file.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TasksFile {
    schedule: ScheduleConfig,
    batch_size: usize,
    tasks: Vec<TaskDef>,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum TaskDef {
    /// Synthetic marker-parity task (label = do two marker tokens differ).
    Parity { name: String, n_train: usize, n_dev: usize, seq_len: usize, seed: u64 },
    Explicit { name: String, n_classes: usize, train: Vec<Example>, dev: Vec<Example> },
}

impl TaskDef {
    fn materialize(&self) -> TaskSpec {
        match self {
            TaskDef::Parity { name, n_train, n_dev, seq_len, seed } => {
                parity_task(name, *n_train, *n_dev, *seq_len, *seed)
            }
            TaskDef::Explicit { name, n_classes, train, dev } => TaskSpec {
                name: name.clone(),
                n_classes: *n_classes,
                train: train.clone(),
                dev: dev.clone(),
            },
        }
    }
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let divergence = match a.divergence.as_str() {
        "forward-kl" => Divergence::ForwardKl,
        "symmetric-kl" => Divergence::SymmetricKl,
        other => bail!("unknown divergence `{other}` (forward-kl, symmetric-kl)"),
    };
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let run_cfg = RunConfig::from_json(&ckpt.config.to_string())
        .context("checkpoint carries an invalid config")?;

    let text =
        fs::read_to_string(&a.tasks).with_context(|| format!("reading {}", a.tasks.display()))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let tasks_file: TasksFile = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| anyhow::anyhow!("{}: {} at `{}`", a.tasks.display(), e.inner(), e.path()))?;
    let tasks: Vec<TaskSpec> = tasks_file.tasks.iter().map(TaskDef::materialize).collect();

    let pdr = PdrConfig {
        alpha: a.pdr_alpha,
        c: a.pdr_c,
        perturbations_per_step: 1,
        divergence,
    };
    let seeds: Vec<u64> = (0..a.seeds).map(|i| a.base_seed + i).collect();
    let max = tasks_file.schedule.max_steps;

    // Seeds are independent runs on independent model copies, so they can
    // fan out across threads without affecting any trained value.
    let reports: Vec<FinetuneReport> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let (model, tasks, schedule) =
                    (run_cfg.model.clone(), tasks.clone(), tasks_file.schedule.clone());
                let (ckpt, run_seed, batch_size) = (&ckpt, run_cfg.seed, tasks_file.batch_size);
                scope.spawn(move || -> denoiselm::Result<FinetuneReport> {
                    let mut pair = init_pair::<f32>(&model, &RootRng::new(run_seed))?;
                    let mut opt = OptimizerState::<f32>::new(&param_sizes(&pair));
                    checkpoint::restore(ckpt, &mut pair, &mut opt)?;
                    let fcfg = FinetuneConfig { schedule, batch_size, pdr, seed };
                    let mut tuner = Finetuner::new(model, pair, tasks, fcfg)?;
                    let report = tuner.run(|info| {
                        if info.step % 50 == 0 || info.step == max {
                            eprintln!(
                                "seed {seed} step {:>5}/{max}  loss {:.4}",
                                info.step, info.loss_total
                            );
                        }
                    })?;
                    for (task, acc) in &report.accuracy {
                        eprintln!("seed {seed} {task}: dev accuracy {acc:.4}");
                    }
                    Ok(report)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("finetune thread panicked"))
            .collect::<denoiselm::Result<Vec<_>>>()
    })?;

    let summary = accuracy_summary(&reports);
    let mut tasks_json = serde_json::Map::new();
    for (name, (mean, std)) in &summary {
        tasks_json.insert(name.clone(), json!({ "mean_acc": mean, "std_acc": std }));
    }
    let report = json!({
        "checkpoint_step": ckpt.step,
        "seeds": seeds,
        "pdr": { "alpha": a.pdr_alpha, "c": a.pdr_c, "divergence": a.divergence },
        "tasks": tasks_json,
    });

    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("seed,task,accuracy\n");
    for r in &reports {
        for (task, acc) in &r.accuracy {
            csv.push_str(&format!("{},{},{}\n", r.seed, task, acc));
        }
    }
    fs::write(a.out.join("seed-accuracy.csv"), csv)?;
    let pretty = serde_json::to_string_pretty(&report)?;
    fs::write(a.out.join("report.json"), format!("{pretty}\n"))?;
    println!("{pretty}");
    Ok(())
}

#[derive(Serialize)]
struct PlanOut {
    total_params: f64,
    n_gpus: u32,
    stage: u8,
    unit: &'static str,
    params: f64,
    grads: f64,
    optimizer: f64,
    total: f64,
}

fn cmd_plan_memory(a: PlanArgs) -> Result<()> {
    let total_params = match (&a.preset, a.params) {
        (Some(name), None) => zero::preset_params(name)?,
        (None, Some(n)) => n,
        _ => bail!("pass exactly one of --preset or --params"),
    };
    let bytes = BytesConfig { opt_bytes: a.opt_bytes, ..BytesConfig::default() };
    let plan = zero::plan(total_params, a.gpus, a.stage, bytes)?;
    let (unit, scale) = if a.gib { ("GiB", GIB) } else { ("GB", GB) };
    let out = PlanOut {
        total_params: plan.total_params,
        n_gpus: plan.n_gpus,
        stage: plan.stage,
        unit,
        params: plan.params_bytes / scale,
        grads: plan.grads_bytes / scale,
        optimizer: plan.optimizer_bytes / scale,
        total: plan.total_bytes / scale,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_bench_fused(a: BenchArgs) -> Result<()> {
    let op = match a.op.as_str() {
        "identity" => KernelOp::Identity,
        "softmax" => KernelOp::Softmax,
        "softmax-dropout" => KernelOp::SoftmaxDropout {
            p: a.dropout_p,
            key: RootRng::new(a.seed).stream(Stream::Dropout, 0, 0).key(),
        },
        "layernorm" => KernelOp::LayerNorm,
        other => bail!("unknown op `{other}` (identity, softmax, softmax-dropout, layernorm)"),
    };
    let report = bench(&op, a.n, a.reps)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<()> {
    let results = gradcheck::run_all(a.instances)?;
    let mut failed = 0;
    for r in &results {
        eprintln!(
            "{} {:<16} max rel {:.3e} over {} instances",
            if r.passed() { "ok  " } else { "FAIL" },
            r.op,
            r.max_rel_err,
            r.instances
        );
        failed += usize::from(!r.passed());
    }
    println!("{}", serde_json::to_string_pretty(&results)?);
    if failed > 0 {
        bail!("{failed} op(s) failed the gradient check");
    }
    Ok(())
}
