use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{greedy_action, sample_action, EvalPolicy};
use crate::error::{Error, Result};
use crate::gridworld::{env_reset, env_step, Action, EnvConfig, EnvKind, MissionTemplate, Observation};
use crate::model::{log_softmax_row, Agent};
use crate::tokenizer::Vocabulary;
use crate::Scalar;

/// Mean and half of the sample standard deviation (0 below two samples).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub half_sigma: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                half_sigma: 0.0,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let half_sigma = if n < 2 {
            0.0
        } else {
            0.5 * (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, half_sigma, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub env: EnvKind,
    pub template: MissionTemplate,
    pub mission: String,
    pub reward: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Stats,
    pub per_env: BTreeMap<EnvKind, Stats>,
    pub per_template: BTreeMap<MissionTemplate, Stats>,
    pub episodes: Vec<EpisodeOutcome>,
}

impl EvalReport {
    pub fn from_episodes(episodes: Vec<EpisodeOutcome>) -> Self {
        let rewards: Vec<f64> = episodes.iter().map(|e| e.reward).collect();
        let mut by_env: BTreeMap<EnvKind, Vec<f64>> = BTreeMap::new();
        let mut by_template: BTreeMap<MissionTemplate, Vec<f64>> = BTreeMap::new();
        for e in &episodes {
            by_env.entry(e.env).or_default().push(e.reward);
            by_template.entry(e.template).or_default().push(e.reward);
        }
        Self {
            overall: Stats::of(&rewards),
            per_env: by_env.into_iter().map(|(k, v)| (k, Stats::of(&v))).collect(),
            per_template: by_template.into_iter().map(|(k, v)| (k, Stats::of(&v))).collect(),
            episodes,
        }
    }
}

/// Runs `episodes` complete episodes, cycling through `envs`, with actions
/// chosen by `policy` for a batch of observations. All episodes advance in
/// lockstep; the result depends only on `seed` and the policy.
pub fn evaluate_with<F>(envs: &[EnvConfig], episodes: usize, seed: u64, mut policy: F) -> Result<EvalReport>
where
    F: FnMut(&[&Observation], &mut ChaCha8Rng) -> Result<Vec<usize>>,
{
    if envs.is_empty() {
        return Err(Error::Config("evaluation needs at least one environment".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut live: Vec<_> = (0..episodes)
        .map(|i| {
            let (state, obs) = env_reset(&envs[i % envs.len()], rng.gen());
            (i, state, obs, 0.0f64, 0usize)
        })
        .collect();
    let mut done: Vec<Option<EpisodeOutcome>> = vec![None; episodes];
    while !live.is_empty() {
        let obs: Vec<&Observation> = live.iter().map(|l| &l.2).collect();
        let actions = policy(&obs, &mut rng)?;
        if actions.len() != live.len() {
            return Err(Error::shape("evaluate", &[live.len()], &[actions.len()]));
        }
        let mut next = Vec::with_capacity(live.len());
        for ((i, state, _, total, len), a) in live.into_iter().zip(actions) {
            let (state, obs, reward, finished) = env_step(&state, a)?;
            let (total, len) = (total + reward, len + 1);
            if finished {
                done[i] = Some(EpisodeOutcome {
                    env: state.env_kind,
                    template: state.mission.template,
                    mission: state.mission.sentence(),
                    reward: total,
                    length: len,
                });
            } else {
                next.push((i, state, obs, total, len));
            }
        }
        live = next;
    }
    Ok(EvalReport::from_episodes(done.into_iter().map(|d| d.expect("finished")).collect()))
}

/// Evaluates an agent on clean inputs.
pub fn evaluate<T: Scalar>(
    agent: &Agent<T>,
    vocab: &Vocabulary,
    envs: &[EnvConfig],
    episodes: usize,
    seed: u64,
    policy: EvalPolicy,
    max_len: usize,
) -> Result<EvalReport> {
    let n = Action::COUNT;
    evaluate_with(envs, episodes, seed, |obs, rng| {
        let (logits, _) = agent.act(obs, vocab, max_len)?;
        logits
            .chunks(n)
            .map(|row| match policy {
                EvalPolicy::Greedy => Ok(greedy_action(row)),
                EvalPolicy::Sample => sample_action(&log_softmax_row(row), rng),
            })
            .collect()
    })
}

/// Uniformly random actions; the reference point for untrained agents.
pub fn random_policy(envs: &[EnvConfig], episodes: usize, seed: u64) -> Result<EvalReport> {
    evaluate_with(envs, episodes, seed, |obs, rng| {
        Ok(obs.iter().map(|_| rng.gen_range(0..Action::COUNT)).collect())
    })
}
