//! Run directories: manifest, config copy, per-seed logs and checkpoints.
//!
//! ```text
//! out_dir/
//!   manifest.json  config.json  vocab.json
//!   seed_{s}/train.csv  episodes.csv  evals.csv  eval.json
//!   seed_{s}/latest.ckpt  final.ckpt  ckpt/update_{u}.ckpt
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalReport, ExperimentConfig, Precision, Trainer};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::Scalar;

/// XORed into the seed to pick evaluation episodes, so they differ from the
/// training stream but stay fixed across updates.
pub const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

const CSV_LOGS: [&str; 3] = ["train.csv", "episodes.csv", "evals.csv"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub updates: u64,
    pub env_steps: u64,
    pub final_checkpoint: PathBuf,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub seeds: Vec<SeedSummary>,
}

#[derive(Debug, Serialize)]
struct EvalRow {
    update_idx: u64,
    env_steps: u64,
    group: String,
    mean_reward: Option<f64>,
    half_sigma: f64,
    n_episodes: usize,
}

/// Trains every configured seed into `config.out_dir`.
///
/// Without `resume` the directory must not already hold a run. With it, the
/// stored manifest must carry the same config hash; seeds that finished are
/// kept, the checkpoint's seed continues from it, and log rows written after
/// the checkpoint are dropped.
pub fn train(config: &ExperimentConfig, resume: Option<&Path>) -> Result<RunSummary> {
    match config.precision {
        Precision::F32 => train_typed::<f32>(config, resume),
        Precision::F64 => train_typed::<f64>(config, resume),
    }
}

pub fn train_typed<T: Scalar>(config: &ExperimentConfig, resume: Option<&Path>) -> Result<RunSummary> {
    config.validate()?;
    let out = &config.out_dir;
    let hash = config.hash();
    let (mut manifest, resume_ck) = match resume {
        Some(path) => {
            let m = read_manifest(out)?;
            if m.config_hash != hash {
                return Err(Error::Config(format!(
                    "config hash mismatch on resume: run {} has {}, config is {hash}",
                    out.display(),
                    m.config_hash
                )));
            }
            (m, Some(Checkpoint::<T>::load(path)?))
        }
        None => {
            if out.join("manifest.json").exists() {
                return Err(Error::Config(format!(
                    "{} already holds a run; pass --resume to continue it",
                    out.display()
                )));
            }
            let m = RunManifest {
                config_hash: hash,
                version: env!("CARGO_PKG_VERSION").to_string(),
                seeds: config.seeds.clone(),
                started_unix: unix_now(),
                finished_unix: None,
                artifacts: Vec::new(),
            };
            (m, None)
        }
    };
    fs::create_dir_all(out)?;
    manifest.finished_unix = None;
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("config.json"), config)?;

    let ck_seed = resume_ck.as_ref().and_then(|ck| ck.meta["extra"]["seed"].as_u64());
    let mut seeds = Vec::new();
    for &seed in &config.seeds {
        let dir = out.join(format!("seed_{seed}"));
        let final_path = dir.join("final.ckpt");
        if resume.is_some() && ck_seed != Some(seed) && final_path.exists() {
            let ck = Checkpoint::<T>::load(&final_path)?;
            let extra = &ck.meta["extra"];
            seeds.push(SeedSummary {
                seed,
                updates: extra["update"].as_u64().unwrap_or(0),
                env_steps: extra["env_steps"].as_u64().unwrap_or(0),
                final_checkpoint: final_path,
                eval: serde_json::from_slice(&fs::read(dir.join("eval.json"))?)?,
            });
            continue;
        }
        let latest = dir.join("latest.ckpt");
        let mut trainer = match &resume_ck {
            Some(ck) if ck_seed == Some(seed) => Trainer::resume(config.clone(), ck)?,
            Some(_) if latest.exists() => Trainer::resume(config.clone(), &Checkpoint::load(&latest)?)?,
            _ => Trainer::new(config.clone(), seed)?,
        };
        fs::create_dir_all(dir.join("ckpt"))?;
        for name in CSV_LOGS {
            truncate_csv(&dir.join(name), trainer.update())?;
        }
        write_json(&out.join("vocab.json"), &trainer.vocab().manifest())?;
        seeds.push(run_seed(&mut trainer, &dir)?);
    }

    manifest.finished_unix = Some(unix_now());
    manifest.artifacts = list_files(out)?;
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(RunSummary {
        out_dir: out.clone(),
        seeds,
    })
}

fn run_seed<T: Scalar>(trainer: &mut Trainer<T>, dir: &Path) -> Result<SeedSummary> {
    let cfg = trainer.config().clone();
    let eval_seed = trainer.seed() ^ EVAL_SEED_SALT;
    let eval = |t: &Trainer<T>| {
        evaluate(
            t.agent(),
            t.vocab(),
            &cfg.envs,
            cfg.eval_episodes,
            eval_seed,
            cfg.eval_policy,
            cfg.encoder.max_positions,
        )
    };
    while !trainer.is_finished() {
        let report = trainer.run_iteration()?;
        append_rows(&dir.join("train.csv"), std::slice::from_ref(&report.log))?;
        append_rows(&dir.join("episodes.csv"), &report.episodes)?;
        let u = trainer.update();
        log::info!(
            "seed {} update {u} steps {} reward {} L_ml {} L_ppo {:.4} entropy {:.3}",
            trainer.seed(),
            trainer.env_steps(),
            report.log.mean_episode_reward.map_or("-".into(), |r| format!("{r:.3}")),
            report.log.l_ml.map_or("-".into(), |l| format!("{l:.4}")),
            report.log.l_ppo_surrogate,
            report.log.entropy,
        );
        if trainer.is_finished() {
            break;
        }
        if cfg.checkpoint_every > 0 && u % cfg.checkpoint_every == 0 {
            let ck = trainer.checkpoint();
            ck.save(&dir.join("ckpt").join(format!("update_{u:06}.ckpt")))?;
            ck.save(&dir.join("latest.ckpt"))?;
        }
        if cfg.eval_every > 0 && u % cfg.eval_every == 0 {
            let report = eval(trainer)?;
            append_rows(&dir.join("evals.csv"), &eval_rows(u, trainer.env_steps(), &report))?;
        }
    }
    let ck = trainer.checkpoint();
    let final_path = dir.join("final.ckpt");
    ck.save(&final_path)?;
    ck.save(&dir.join("latest.ckpt"))?;
    let report = eval(trainer)?;
    append_rows(
        &dir.join("evals.csv"),
        &eval_rows(trainer.update(), trainer.env_steps(), &report),
    )?;
    write_json(&dir.join("eval.json"), &report)?;
    Ok(SeedSummary {
        seed: trainer.seed(),
        updates: trainer.update(),
        env_steps: trainer.env_steps(),
        final_checkpoint: final_path,
        eval: report,
    })
}

fn eval_rows(update_idx: u64, env_steps: u64, r: &EvalReport) -> Vec<EvalRow> {
    let row = |group: String, s: &super::Stats| EvalRow {
        update_idx,
        env_steps,
        group,
        mean_reward: (s.n > 0).then_some(s.mean),
        half_sigma: s.half_sigma,
        n_episodes: s.n,
    };
    let mut rows = vec![row("all".into(), &r.overall)];
    rows.extend(r.per_env.iter().map(|(k, s)| row(k.to_string(), s)));
    rows.extend(r.per_template.iter().map(|(k, s)| row(label(k), s)));
    rows
}

/// serde name of a unit enum variant.
pub(crate) fn label<S: Serialize>(v: &S) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

pub fn read_manifest(out: &Path) -> Result<RunManifest> {
    let path = out.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn append_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let fresh = fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Drops rows whose `update_idx` exceeds `max_update`.
pub fn truncate_csv(path: &Path, max_update: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let col = header
        .iter()
        .position(|h| h == "update_idx")
        .ok_or_else(|| Error::Config(format!("{} has no update_idx column", path.display())))?;
    let mut keep = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let u: u64 = rec[col]
            .parse()
            .map_err(|_| Error::Config(format!("bad update_idx {:?} in {}", &rec[col], path.display())))?;
        if u <= max_update {
            keep.push(rec);
        }
    }
    if keep.is_empty() {
        fs::remove_file(path)?;
        return Ok(());
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for rec in keep {
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn list_files(root: &Path) -> Result<Vec<String>> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, root, out)?;
            } else if let Ok(rel) = path.strip_prefix(root) {
                let rel = rel.to_string_lossy().replace('\\', "/");
                if rel != "manifest.json" {
                    out.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}
