//! Analysis over trained agents and run directories: CLS attention records,
//! per-mission tables, cross-seed reward curves and masked-token accuracy.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, Forward};
use crate::error::{Error, Result};
use crate::gridworld::{
    env_reset, env_step, mission_grammar, Action, Color, EnvConfig, EnvKind, MissionTemplate, Observation, VIEW_SIZE,
};
use crate::mask::{duplicate, slot_modality, MaskConfig};
use crate::model::{log_softmax_row, Agent};
use crate::tensor::Graph;
use crate::tokenizer::{tokenize, Modality, Vocabulary};
use crate::trainer::{greedy_action, sample_action, EvalPolicy, EvalReport, ExperimentConfig, Stats, UpdateLog};
use crate::Scalar;

pub const ATTENTION_SCHEMA_VERSION: u32 = 1;

/// Layer analysed when no filter is given (the second one).
pub const DEFAULT_ATTENTION_LAYER: usize = 1;

type Map7 = [[f64; VIEW_SIZE]; VIEW_SIZE];

/// Attention from the CLS query of one head, split by key modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub schema_version: u32,
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub mission: String,
    /// Action taken at this step.
    pub action: usize,
    /// Weights over the non-PAD keys, in slot order.
    pub cls_row: Vec<f64>,
    pub vision_type: Map7,
    pub vision_color: Map7,
    /// `(word, weight)` in mission order.
    pub language: Vec<(String, f64)>,
    /// CLS, first SEP, second SEP.
    pub special: [f64; 3],
}

impl AttentionRecord {
    pub fn row_sum(&self) -> f64 {
        self.cls_row.iter().sum()
    }

    /// Sum of the modality parts; equals [`Self::row_sum`] up to rounding.
    pub fn partition_sum(&self) -> f64 {
        let maps: f64 = self
            .vision_type
            .iter()
            .chain(self.vision_color.iter())
            .flatten()
            .sum();
        maps + self.language.iter().map(|(_, w)| w).sum::<f64>() + self.special.iter().sum::<f64>()
    }
}

/// Runs the agent on clean inputs for `n_steps` (resetting finished
/// episodes) and records CLS attention for every head of the selected layers.
/// The captured weights come from the same forward pass that chooses the
/// action.
pub fn extract_cls_attention<T: Scalar>(
    agent: &Agent<T>,
    vocab: &Vocabulary,
    env: &EnvConfig,
    n_steps: usize,
    layers: Option<&[usize]>,
    seed: u64,
    policy: EvalPolicy,
) -> Result<Vec<AttentionRecord>> {
    let encoder = agent
        .encoder()
        .ok_or_else(|| Error::Config(format!("{} has no attention to extract", agent.kind())))?;
    let n_layers = encoder.config().n_layers;
    let layers = layers.unwrap_or(&[DEFAULT_ATTENTION_LAYER]);
    if let Some(&bad) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(Error::Config(format!("layer {bad} out of range (model has {n_layers})")));
    }
    let mut out = Vec::new();
    rollout(encoder, vocab, env, n_steps, seed, policy, true, |step, obs, action, attention| {
        let seq = tokenize(obs, vocab, encoder.config().max_positions)?;
        let occupied = seq.occupied();
        let s = seq.len();
        let heads = encoder.config().n_heads;
        for &layer in layers {
            let a = attention[layer].data();
            for head in 0..heads {
                // row 0 (CLS query) of head `head` for batch element 0
                let base = head * s * s;
                let row: Vec<f64> = a[base..base + occupied].iter().map(|x| x.as_f64()).collect();
                out.push(split_row(step, layer, head, obs, action, &seq, row));
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Actions the encoder chooses over a rollout, with or without attention
/// capture; both must agree.
pub fn policy_trajectory<T: Scalar>(
    encoder: &Encoder<T>,
    vocab: &Vocabulary,
    env: &EnvConfig,
    n_steps: usize,
    seed: u64,
    policy: EvalPolicy,
    capture: bool,
) -> Result<Vec<usize>> {
    let mut actions = Vec::new();
    rollout(encoder, vocab, env, n_steps, seed, policy, capture, |_, _, a, _| {
        actions.push(a);
        Ok(())
    })?;
    Ok(actions)
}

#[allow(clippy::too_many_arguments)]
fn rollout<T: Scalar, F>(
    encoder: &Encoder<T>,
    vocab: &Vocabulary,
    env: &EnvConfig,
    n_steps: usize,
    seed: u64,
    policy: EvalPolicy,
    capture: bool,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &Observation, usize, &[crate::tensor::Tensor<T>]) -> Result<()>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state, mut obs) = env_reset(env, rng.gen());
    for step in 0..n_steps {
        let seq = tokenize(&obs, vocab, encoder.config().max_positions)?;
        let mut g = Graph::inference();
        let fwd = if capture { Forward::eval().with_attention() } else { Forward::eval() };
        let enc = encoder.encode(&mut g, &[&seq], fwd)?;
        let (logits, _) = encoder.policy_value(&mut g, &enc)?;
        let row: Vec<f64> = g.value(logits).data().iter().map(|x| x.as_f64()).collect();
        let action = match policy {
            EvalPolicy::Greedy => greedy_action(&row),
            EvalPolicy::Sample => sample_action(&log_softmax_row(&row), &mut rng)?,
        };
        visit(step, &obs, action, enc.attention.as_deref().unwrap_or(&[]))?;
        let (next, next_obs, _, done) = env_step(&state, action)?;
        (state, obs) = if done { env_reset(env, rng.gen()) } else { (next, next_obs) };
    }
    Ok(())
}

fn split_row(
    step: usize,
    layer: usize,
    head: usize,
    obs: &Observation,
    action: usize,
    seq: &crate::tokenizer::TokenSequence,
    row: Vec<f64>,
) -> AttentionRecord {
    let cells = VIEW_SIZE * VIEW_SIZE;
    let map = |offset: usize| {
        let mut m = [[0.0; VIEW_SIZE]; VIEW_SIZE];
        for (i, w) in row[offset..offset + cells].iter().enumerate() {
            m[i / VIEW_SIZE][i % VIEW_SIZE] = *w;
        }
        m
    };
    let lang = seq.language_slots();
    let language = obs
        .mission_text
        .iter()
        .zip(lang.clone())
        .map(|(w, slot)| (w.to_lowercase(), row[slot]))
        .collect();
    let first_sep = 1 + seq.n_vision;
    AttentionRecord {
        schema_version: ATTENTION_SCHEMA_VERSION,
        step,
        layer,
        head,
        mission: obs.mission(),
        action,
        vision_type: map(1),
        vision_color: map(1 + cells),
        language,
        special: [row[0], row[first_sep], row[lang.end]],
        cls_row: row,
    }
}

pub fn write_attention_jsonl<W: Write>(mut out: W, records: &[AttentionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Mean weight on the mission's color word and on determiners ("the", "a"),
/// averaged over records.
pub fn color_vs_determiner_mass(records: &[AttentionRecord]) -> (f64, f64) {
    let colors: Vec<&str> = Color::ALL.iter().map(|c| c.name()).collect();
    let (mut c, mut d) = (0.0, 0.0);
    for r in records {
        for (w, x) in &r.language {
            if colors.contains(&w.as_str()) {
                c += x;
            } else if w == "the" || w == "a" {
                d += x;
            }
        }
    }
    let n = records.len().max(1) as f64;
    (c / n, d / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionRow {
    pub template: String,
    pub mean_reward: Option<f64>,
    pub half_sigma: f64,
    pub n_episodes: usize,
}

/// Templates of the given environments, in grammar order without repeats.
pub fn mission_templates(envs: &[EnvKind]) -> Vec<MissionTemplate> {
    let mut out: Vec<MissionTemplate> = Vec::new();
    for &e in envs {
        for &t in mission_grammar(e) {
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    out
}

/// One row per template; templates without episodes get an empty mean.
pub fn per_mission_table(report: &EvalReport, templates: &[MissionTemplate]) -> Vec<MissionRow> {
    templates
        .iter()
        .map(|t| {
            let s = report.per_template.get(t).copied().unwrap_or(Stats::of(&[]));
            MissionRow {
                template: t.pattern().to_string(),
                mean_reward: (s.n > 0).then_some(s.mean),
                half_sigma: s.half_sigma,
                n_episodes: s.n,
            }
        })
        .collect()
}

pub fn write_missions_csv<W: Write>(out: W, rows: &[MissionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Lowest per-template mean, ignoring templates without episodes.
pub fn min_template_mean(rows: &[MissionRow]) -> Option<f64> {
    rows.iter().filter_map(|r| r.mean_reward).reduce(f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: u64,
    pub model: String,
    pub regime: String,
    pub seed_mean: f64,
    pub half_sigma: f64,
}

/// `train.csv` rows of one seed.
pub fn read_train_log(path: &Path) -> Result<Vec<UpdateLog>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<UpdateLog>, _>>()?;
    Ok(rows)
}

/// First update whose mean episode reward reaches `threshold`.
pub fn updates_to_threshold(log: &[UpdateLog], threshold: f64) -> Option<u64> {
    log.iter()
        .find(|r| r.mean_episode_reward.is_some_and(|m| m >= threshold))
        .map(|r| r.update_idx)
}

/// Run directories under `root`: `root` itself if it holds a manifest,
/// otherwise its immediate subdirectories that do.
pub fn discover_runs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("manifest.json").exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut runs = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let p = entry?.path();
        if p.join("manifest.json").exists() {
            runs.push(p);
        }
    }
    runs.sort();
    if runs.is_empty() {
        return Err(Error::Config(format!("no run directories under {}", root.display())));
    }
    Ok(runs)
}

/// Per-seed `(env_steps, mean_episode_reward)` series of a run directory.
/// Updates in which no episode finished are skipped.
pub fn seed_series(run: &Path) -> Result<Vec<Vec<(u64, f64)>>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(run)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed_")))
        .collect();
    dirs.sort();
    dirs.iter()
        .filter(|d| d.join("train.csv").exists())
        .map(|d| {
            Ok(read_train_log(&d.join("train.csv"))?
                .into_iter()
                .filter_map(|r| r.mean_episode_reward.map(|m| (r.env_steps, m)))
                .collect())
        })
        .collect()
}

/// Cross-seed mean and half sample deviation per step. Seeds on different
/// step grids are linearly interpolated onto the coarsest one.
pub fn aggregate_curves(series: &[Vec<(u64, f64)>]) -> Vec<(u64, Stats)> {
    let series: Vec<&Vec<(u64, f64)>> = series.iter().filter(|s| !s.is_empty()).collect();
    let Some(coarsest) = series.iter().min_by_key(|s| s.len()) else {
        return Vec::new();
    };
    let grid: Vec<u64> = coarsest.iter().map(|p| p.0).collect();
    let aligned = series.iter().all(|s| s.iter().map(|p| p.0).eq(grid.iter().copied()));
    if !aligned {
        log::warn!("seed step grids differ; resampling onto the coarsest grid ({} points)", grid.len());
    }
    grid.iter()
        .map(|&x| {
            let vals: Vec<f64> = series.iter().filter_map(|s| interpolate(s, x)).collect();
            (x, Stats::of(&vals))
        })
        .collect()
}

fn interpolate(s: &[(u64, f64)], x: u64) -> Option<f64> {
    let i = s.partition_point(|p| p.0 < x);
    match s.get(i) {
        Some(&(sx, sy)) if sx == x => Some(sy),
        Some(&(x1, y1)) if i > 0 => {
            let (x0, y0) = s[i - 1];
            Some(y0 + (y1 - y0) * (x - x0) as f64 / (x1 - x0) as f64)
        }
        _ => None,
    }
}

/// Reward curves of every `(model, regime)` cell found among `runs`.
pub fn export_curves(runs: &[PathBuf]) -> Result<Vec<CurvePoint>> {
    let mut cells: BTreeMap<(String, String), Vec<Vec<(u64, f64)>>> = BTreeMap::new();
    for run in runs {
        let cfg: ExperimentConfig = serde_json::from_slice(&std::fs::read(run.join("config.json"))?)?;
        let key = (cfg.model.to_string(), cfg.regime.name().to_string());
        cells.entry(key).or_default().extend(seed_series(run)?);
    }
    let mut out = Vec::new();
    for ((model, regime), series) in cells {
        for (env_steps, s) in aggregate_curves(&series) {
            out.push(CurvePoint {
                env_steps,
                model: model.clone(),
                regime: regime.clone(),
                seed_mean: s.mean,
                half_sigma: s.half_sigma,
            });
        }
    }
    Ok(out)
}

pub fn write_curves_csv<W: Write>(out: W, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Correct / total masked-token predictions, split by the modality of the
/// original token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MlmAccuracy {
    pub vision_correct: usize,
    pub vision_total: usize,
    pub language_correct: usize,
    pub language_total: usize,
}

impl MlmAccuracy {
    pub fn vision(&self) -> f64 {
        self.vision_correct as f64 / self.vision_total.max(1) as f64
    }

    pub fn language(&self) -> f64 {
        self.language_correct as f64 / self.language_total.max(1) as f64
    }
}

/// Uniformly random-policy observations from fresh episodes.
pub fn heldout_observations(envs: &[EnvConfig], n: usize, seed: u64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    while out.len() < n {
        let env = &envs[k % envs.len()];
        k += 1;
        let (mut state, obs) = env_reset(env, rng.gen());
        out.push(obs);
        while out.len() < n && rng.gen_bool(0.9) {
            let Ok((next, obs, _, done)) = env_step(&state, rng.gen_range(0..Action::COUNT)) else {
                break;
            };
            if done {
                break;
            }
            out.push(obs);
            state = next;
        }
    }
    out
}

/// Masks each observation once and scores the argmax prediction at every
/// candidate slot.
pub fn mlm_accuracy<T: Scalar>(
    encoder: &Encoder<T>,
    vocab: &Vocabulary,
    observations: &[Observation],
    mask: &MaskConfig,
    seed: u64,
) -> Result<MlmAccuracy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = MlmAccuracy::default();
    for chunk in observations.chunks(32) {
        let mut masked = Vec::with_capacity(chunk.len());
        for o in chunk {
            let seq = tokenize(o, vocab, encoder.config().max_positions)?;
            masked.push((seq.clone(), duplicate(&seq, 1, mask, vocab, &mut rng)?.remove(0)));
        }
        let positions: Vec<(usize, usize)> = masked
            .iter()
            .enumerate()
            .flat_map(|(i, (_, m))| m.candidates.iter().map(move |&c| (i, c)))
            .collect();
        if positions.is_empty() {
            continue;
        }
        let inputs: Vec<_> = masked.iter().map(|(_, m)| &m.sequence).collect();
        let mut g = Graph::inference();
        let enc = encoder.encode(&mut g, &inputs, Forward::eval())?;
        let logits = encoder.mlm_logits(&mut g, &enc, &positions)?;
        let v = g.value(logits);
        let width = v.shape()[1];
        let targets = masked.iter().flat_map(|(clean, m)| {
            m.original_ids.iter().zip(&m.candidates).map(move |(&id, &slot)| (id, slot_modality(clean, slot)))
        });
        for (row, (target, modality)) in v.data().chunks(width).zip(targets) {
            let row: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
            let hit = greedy_action(&row) == target as usize;
            match modality {
                Some(Modality::Language) => {
                    acc.language_total += 1;
                    acc.language_correct += hit as usize;
                }
                _ => {
                    acc.vision_total += 1;
                    acc.vision_correct += hit as usize;
                }
            }
        }
    }
    Ok(acc)
}
