use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lambert_core::evalkit::{
    discover_runs, export_curves, extract_cls_attention, mission_templates, per_mission_table, write_attention_jsonl,
    write_curves_csv, write_missions_csv,
};
use lambert_core::gridworld::{EnvConfig, EnvKind};
use lambert_core::model::Agent;
use lambert_core::trainer::{evaluate, train, EvalPolicy, ExperimentConfig};
use lambert_core::{certify, Checkpoint32};

const OUT_ENV: &str = "LAMBERT_OUT";
const DEFAULT_OUT: &str = "lambert-out";

#[derive(Debug, Parser)]
#[command(name = "lambert", version, about = "Train and analyse masked-token + PPO gridworld agents")]
struct Cli {
    /// Validate inputs and print the resolved settings without side effects.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every seed of an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metrics JSON plus a per-mission table.
    Eval(EvalArgs),
    /// Record CLS attention over a rollout as JSON lines.
    Attn(AttnArgs),
    /// Finite-difference gradient certification at 64-bit.
    GradCheck(GradCheckArgs),
    /// Aggregate reward curves across seeds of one or more runs.
    ExportCurves(ExportArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue the run from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train only this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    strict_determinism: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    env: String,
    #[arg(long)]
    episodes: usize,
    #[arg(long, default_value_t = 8)]
    grid_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample actions instead of taking the most likely one.
    #[arg(long)]
    sample: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AttnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    env: String,
    #[arg(long)]
    steps: usize,
    /// Comma-separated layer indices (0-based); defaults to the second layer.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = 8)]
    grid_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random-shape passes over the op set.
    #[arg(long, default_value_t = 100)]
    rounds: usize,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// A run directory, or a directory of run directories.
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            let kind = e
                .downcast_ref::<lambert_core::Error>()
                .map_or("error", |e| e.kind());
            eprintln!("error[{kind}]: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    let dry = cli.dry_run;
    match cli.command {
        Command::Train(a) => cmd_train(a, dry),
        Command::Eval(a) => cmd_eval(a, dry),
        Command::Attn(a) => cmd_attn(a, dry),
        Command::GradCheck(a) => cmd_grad_check(a, dry),
        Command::ExportCurves(a) => cmd_export(a, dry),
    }
}

/// `--out-dir`, then `$LAMBERT_OUT`, then `fallback`.
fn out_dir(flag: Option<PathBuf>, fallback: PathBuf) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or(fallback)
}

fn resolve_train_config(a: &TrainArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if a.strict_determinism {
        cfg.strict_determinism = true;
    }
    cfg.out_dir = out_dir(a.out_dir.clone(), cfg.out_dir.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, dry: bool) -> anyhow::Result<ExitCode> {
    let cfg = resolve_train_config(&a)?;
    if dry {
        println!("{}", cfg.resolved_json());
        return Ok(ExitCode::SUCCESS);
    }
    if let Some(r) = &a.resume {
        if !r.exists() {
            bail!("resume checkpoint {} does not exist", r.display());
        }
    }
    let summary = train(&cfg, a.resume.as_deref())?;
    let seeds: Vec<_> = summary
        .seeds
        .iter()
        .map(|s| {
            json!({
                "seed": s.seed,
                "updates": s.updates,
                "env_steps": s.env_steps,
                "final_checkpoint": s.final_checkpoint,
                "mean_reward": s.eval.overall.mean,
                "half_sigma": s.eval.overall.half_sigma,
            })
        })
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "out_dir": summary.out_dir, "seeds": seeds }))?
    );
    Ok(ExitCode::SUCCESS)
}

fn env_config(name: &str, grid_size: usize) -> anyhow::Result<EnvConfig> {
    let kind: EnvKind = name.parse()?;
    let cfg = EnvConfig::new(kind).with_grid_size(grid_size);
    cfg.validate()?;
    Ok(cfg)
}

fn load_agent(path: &Path) -> anyhow::Result<(Agent<f32>, lambert_core::tokenizer::Vocabulary)> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let ck = Checkpoint32::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Agent::from_checkpoint(&ck)?)
}

fn max_len(agent: &Agent<f32>) -> usize {
    agent
        .encoder()
        .map_or(lambert_core::tokenizer::DEFAULT_MAX_LEN, |e| e.config().max_positions)
}

fn cmd_eval(a: EvalArgs, dry: bool) -> anyhow::Result<ExitCode> {
    let env = env_config(&a.env, a.grid_size)?;
    let out = out_dir(a.out_dir, PathBuf::from(DEFAULT_OUT));
    let policy = if a.sample { EvalPolicy::Sample } else { EvalPolicy::Greedy };
    if dry {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "ckpt": a.ckpt, "env": env, "episodes": a.episodes, "seed": a.seed,
                "policy": policy, "out_dir": out,
            }))?
        );
        return Ok(ExitCode::SUCCESS);
    }
    let (agent, vocab) = load_agent(&a.ckpt)?;
    let envs = [env.clone()];
    let report = evaluate(&agent, &vocab, &envs, a.episodes, a.seed, policy, max_len(&agent))?;
    fs::create_dir_all(&out)?;
    let metrics = json!({
        "ckpt": a.ckpt,
        "env": env,
        "episodes": a.episodes,
        "seed": a.seed,
        "policy": policy,
        "model": agent.kind(),
        "report": report,
    });
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    let rows = per_mission_table(&report, &mission_templates(&[env.env_kind]));
    write_missions_csv(fs::File::create(out.join("missions.csv"))?, &rows)?;
    println!(
        "mean_reward {:.4} half_sigma {:.4} episodes {} -> {}",
        report.overall.mean,
        report.overall.half_sigma,
        report.overall.n,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_attn(a: AttnArgs, dry: bool) -> anyhow::Result<ExitCode> {
    let env = env_config(&a.env, a.grid_size)?;
    let out = out_dir(a.out_dir, PathBuf::from(DEFAULT_OUT));
    if dry {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "ckpt": a.ckpt, "env": env, "steps": a.steps, "seed": a.seed,
                "layers": a.layers.clone().unwrap_or(vec![lambert_core::evalkit::DEFAULT_ATTENTION_LAYER]),
                "out_dir": out,
            }))?
        );
        return Ok(ExitCode::SUCCESS);
    }
    let (agent, vocab) = load_agent(&a.ckpt)?;
    let records = extract_cls_attention(
        &agent,
        &vocab,
        &env,
        a.steps,
        a.layers.as_deref(),
        a.seed,
        EvalPolicy::Greedy,
    )?;
    fs::create_dir_all(&out)?;
    let path = out.join("attention.jsonl");
    write_attention_jsonl(std::io::BufWriter::new(fs::File::create(&path)?), &records)?;
    println!("{} records -> {}", records.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(a: GradCheckArgs, dry: bool) -> anyhow::Result<ExitCode> {
    if dry {
        println!(
            "{}",
            json!({ "seed": a.seed, "rounds": a.rounds, "tolerance": certify::TOLERANCE })
        );
        return Ok(ExitCode::SUCCESS);
    }
    let report = certify::run(a.rounds, a.seed)?;
    for c in &report.checks {
        println!("{:<16} checked {:>6}  max_rel_err {:.3e}", c.name, c.checked, c.max_rel_err);
    }
    println!(
        "max relative error {:.3e} (tolerance {:.0e}) in {:.1}s: {}",
        report.max_rel_err,
        certify::TOLERANCE,
        report.elapsed.as_secs_f64(),
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_export(a: ExportArgs, dry: bool) -> anyhow::Result<ExitCode> {
    let runs = discover_runs(&a.runs)?;
    if dry {
        println!("{}", json!({ "runs": runs, "out": a.out }));
        return Ok(ExitCode::SUCCESS);
    }
    let points = export_curves(&runs)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_curves_csv(fs::File::create(&a.out)?, &points)?;
    println!("{} points from {} runs -> {}", points.len(), runs.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
