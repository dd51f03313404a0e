mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chanlab::datagen::SyntheticTask;
use chanlab::harness::{
    aggregate_by_method, build_workbench, imbalance_grids, load_results, render_table, run_grid, transfer,
    unseen_label_grid, vary_k_grids, write_report, AblationKind, BenchConfig, ExperimentGrid, MethodSpec, Report,
    RunResult, Workbench,
};
use chanlab::lm::{build_vocab, LanguageModel, DEFAULT_RESERVED};
use chanlab::tuning::write_loss_curve;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "chanlab", about = "Direct and channel few-shot classification on a toy LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args)]
struct Flags {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overrides `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run a single data seed.
    #[arg(long, global = true)]
    seed_data: Option<u64>,
    /// Run a single training seed.
    #[arg(long, global = true)]
    seed_train: Option<u64>,
    /// Run a single verbalizer (v0..v3).
    #[arg(long, global = true)]
    verbalizer: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic task splits and pretraining corpus.
    GenTask,
    /// Pretrain the LM and save its checkpoint.
    Pretrain,
    /// Zero-shot and demonstration grids.
    EvalDemo,
    /// Tuning grids with learning-rate selection.
    Tune,
    /// vary_k, imbalance, unseen_label or transfer.
    Ablate {
        #[arg(long)]
        kind: String,
    },
    /// Aggregate every results file under the output directory.
    Report,
    /// Gradient checks, frozen hashes, score algebra and oracles.
    Verify,
}

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<chanlab::Error> for Failure {
    fn from(e: chanlab::Error) -> Self {
        use chanlab::Error::*;
        match e {
            Config(_) | NotApplicable(_) | Schema { .. } | UnknownLabel { .. } => Failure::Validation(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Outcome {
    let mut cfg = config::load(cli.flags.config.as_deref())?;
    apply_flags(&mut cfg, &cli.flags);
    cfg.validate()?;
    match cli.command {
        Command::GenTask => gen_task(&cfg),
        Command::Pretrain => pretrain(&cfg).map(|_| ()),
        Command::EvalDemo => eval_demo(&cfg),
        Command::Tune => tune(&cfg),
        Command::Ablate { kind } => ablate(&cfg, kind.parse()?),
        Command::Report => report(&cfg),
        Command::Verify => verify(),
    }
}

fn apply_flags(cfg: &mut ExperimentConfig, f: &Flags) {
    if let Some(out) = &f.out {
        cfg.out = out.clone();
    }
    if let Some(w) = f.workers {
        cfg.workers = w;
    }
    if let Some(s) = f.seed_data {
        cfg.grid.data_seeds = vec![s];
    }
    if let Some(s) = f.seed_train {
        cfg.grid.train_seeds = vec![s];
    }
    if let Some(v) = &f.verbalizer {
        cfg.grid.verbalizers = vec![v.clone()];
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn gen_task(cfg: &ExperimentConfig) -> Outcome {
    let dir = cfg.out.join("task");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let task = cfg.bench.generate()?;
    task.train.write(&dir.join("train.jsonl"))?;
    task.test.write(&dir.join("test.jsonl"))?;
    let corpus = cfg.bench.corpus(&task)?;
    let path = dir.join("corpus.txt");
    std::fs::write(&path, corpus.join("\n") + "\n").map_err(|e| io_err(&path, e))?;
    let verbs: Vec<_> = task.verbalizers();
    let path = dir.join("verbalizers.json");
    let text = serde_json::to_string_pretty(&verbs).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    log::info!(
        "{}: {} train, {} test, {} corpus documents in {}",
        task.spec.kind,
        task.train.len(),
        task.test.len(),
        corpus.len(),
        dir.display()
    );
    Ok(())
}

/// Sidecar next to the checkpoint: the bench config it was built from.
#[derive(Serialize, Deserialize, PartialEq)]
struct LmStamp {
    bench: BenchConfig,
    vocab_size: usize,
    final_loss: Option<f64>,
}

fn lm_paths(cfg: &ExperimentConfig) -> (PathBuf, PathBuf) {
    (cfg.out.join("lm.ckpt"), cfg.out.join("lm.json"))
}

fn pretrain(cfg: &ExperimentConfig) -> Result<(Workbench, SyntheticTask), Failure> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    log::info!("pretraining for {} steps", cfg.bench.pretrain.steps);
    let built = build_workbench(&cfg.bench)?;
    let (ckpt, stamp_path) = lm_paths(cfg);
    built.bench.lm.save(&ckpt)?;
    write_loss_curve(&cfg.out.join("pretrain_loss.csv"), &built.pretrain_losses)?;
    let stamp = LmStamp {
        bench: cfg.bench.clone(),
        vocab_size: built.bench.lm.vocab.len(),
        final_loss: built.pretrain_losses.last().copied(),
    };
    let text = serde_json::to_string_pretty(&stamp).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(&stamp_path, text).map_err(|e| io_err(&stamp_path, e))?;
    log::info!("saved {} (final loss {:?})", ckpt.display(), stamp.final_loss);
    Ok((built.bench, built.task))
}

/// Loads the checkpoint when it was built from the same bench config,
/// otherwise pretrains afresh.
fn workbench(cfg: &ExperimentConfig) -> Result<(Workbench, SyntheticTask), Failure> {
    let (ckpt, stamp_path) = lm_paths(cfg);
    let stamp: Option<LmStamp> = std::fs::read_to_string(&stamp_path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    match stamp {
        Some(s) if s.bench == cfg.bench && ckpt.exists() => {
            let lm = LanguageModel::load(&ckpt)?;
            let task = cfg.bench.generate()?;
            let corpus = cfg.bench.corpus(&task)?;
            if build_vocab(&corpus, &DEFAULT_RESERVED)?.tokens() != lm.vocab.tokens() {
                return Err(Failure::Runtime(format!("{} does not match its corpus", ckpt.display())));
            }
            log::info!("loaded {}", ckpt.display());
            let bench = Workbench {
                lm,
                train_pool: task.train.clone(),
                test: task.test.clone(),
            };
            Ok((bench, task))
        }
        _ => pretrain(cfg),
    }
}

fn snapshot(cfg: &ExperimentConfig, command: &str) -> serde_json::Value {
    serde_json::json!({ "command": command, "config": cfg })
}

/// Writes the report, prints the table and fails on any failed cell.
fn finish(cfg: &ExperimentConfig, name: &str, report: Report) -> Outcome {
    let dir = cfg.out.join(name);
    let aggregates = write_report(&dir, &report, &snapshot(cfg, name))?;
    print!("{}", render_table(&aggregates));
    log::info!("wrote {}", dir.display());
    let failed: Vec<&RunResult> = report.results.iter().filter(|r| !r.ok()).collect();
    if let Some(first) = failed.first() {
        return Err(Failure::Runtime(format!(
            "{} of {} runs failed; first: {}",
            failed.len(),
            report.results.len(),
            first.error.as_deref().unwrap_or("")
        )));
    }
    Ok(())
}

fn methods_of(cfg: &ExperimentConfig, tuning: bool) -> Vec<MethodSpec> {
    let chosen: Vec<MethodSpec> = cfg
        .methods
        .iter()
        .filter(|m| matches!(m, MethodSpec::Tuning { .. }) == tuning)
        .cloned()
        .collect();
    if !chosen.is_empty() {
        chosen
    } else if cfg.methods.is_empty() {
        if tuning {
            config::all_tuning()
        } else {
            config::all_scoring()
        }
    } else {
        Vec::new()
    }
}

fn run_grids(cfg: &ExperimentConfig, bench: &Workbench, grids: &[ExperimentGrid]) -> Result<Vec<RunResult>, Failure> {
    let mut results = Vec::new();
    for g in grids {
        log::info!("{} K={} p-={:?} upsample={}: {} runs", g.method.label(), g.k, g.p_minus, g.upsample, g.cells().len());
        results.extend(run_grid(bench, g, cfg.workers)?);
    }
    Ok(results)
}

fn eval_or_tune(cfg: &ExperimentConfig, tuning: bool) -> Outcome {
    let methods = methods_of(cfg, tuning);
    let name = if tuning { "tune" } else { "eval-demo" };
    if methods.is_empty() {
        return Err(Failure::Validation(format!("methods: no {name} methods in config")));
    }
    let (bench, task) = workbench(cfg)?;
    let verbs = cfg.pick_verbalizers(&task.verbalizers())?;
    let grids: Vec<ExperimentGrid> = methods.into_iter().map(|m| cfg.grid(m, verbs.clone())).collect();
    for g in &grids {
        g.validate()?;
    }
    let results = run_grids(cfg, &bench, &grids)?;
    finish(
        cfg,
        name,
        Report {
            results,
            curves: Vec::new(),
        },
    )
}

fn eval_demo(cfg: &ExperimentConfig) -> Outcome {
    eval_or_tune(cfg, false)
}

fn tune(cfg: &ExperimentConfig) -> Outcome {
    eval_or_tune(cfg, true)
}

fn ablate(cfg: &ExperimentConfig, kind: AblationKind) -> Outcome {
    let (bench, task) = workbench(cfg)?;
    let verbs = cfg.pick_verbalizers(&task.verbalizers())?;
    let methods = if cfg.methods.is_empty() {
        config::all_tuning()
    } else {
        cfg.methods.clone()
    };
    let mut results = Vec::new();
    if kind == AblationKind::Transfer {
        let target_kind = cfg
            .ablation
            .transfer_target
            .ok_or_else(|| Failure::Validation("ablation.transfer_target: required for transfer".into()))?;
        let target = cfg.bench.generate_kind(target_kind)?;
        let target_verbs = cfg.pick_verbalizers(&target.verbalizers())?;
        let mut test = target.test.clone();
        if let Some(n) = cfg.grid.test_limit {
            test.examples.truncate(n);
        }
        for m in methods {
            let grid = cfg.grid(m, verbs.clone());
            match transfer(&bench, &grid, &target_kind.to_string(), &test, &target_verbs, cfg.workers) {
                Ok(t) => results.extend(t.runs),
                Err(chanlab::Error::NotApplicable(msg)) => log::warn!("{}: skipped, {msg}", grid.method.label()),
                Err(e) => return Err(e.into()),
            }
        }
    } else {
        let mut grids = Vec::new();
        for m in methods {
            let base = cfg.grid(m, verbs.clone());
            match kind {
                AblationKind::VaryK => grids.extend(vary_k_grids(&base)),
                AblationKind::Imbalance => grids.extend(imbalance_grids(&base)),
                AblationKind::UnseenLabel => grids.push(unseen_label_grid(&base)),
                AblationKind::Transfer => unreachable!(),
            }
        }
        for g in &grids {
            g.validate()?;
        }
        results = run_grids(cfg, &bench, &grids)?;
    }
    if results.is_empty() {
        return Err(Failure::Validation("no applicable methods for this ablation".into()));
    }
    let curves = kind.curve(&results);
    finish(cfg, &format!("ablate-{}", kind.as_str()), Report { results, curves })
}

fn report(cfg: &ExperimentConfig) -> Outcome {
    let records = load_results(&cfg.out)?;
    let runs: Vec<RunResult> = records.into_iter().map(|r| r.run).collect();
    let table = render_table(&aggregate_by_method(&runs));
    let path = cfg.out.join("table.tsv");
    std::fs::write(&path, &table).map_err(|e| io_err(&path, e))?;
    print!("{table}");
    Ok(())
}

fn verify() -> Outcome {
    let checks = chanlab::verify::run_all();
    for c in &checks {
        println!(
            "{} {} ({:.2}s): {}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}
