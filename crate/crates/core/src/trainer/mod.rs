//! Rollout collection, the optimization loop and the experiment regimes.

mod config;
mod eval;
mod run;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{EvalPolicy, ExperimentConfig, Precision, Regime};
pub use eval::{evaluate, evaluate_with, random_policy, EpisodeOutcome, EvalReport, Stats};
pub use run::{
    read_manifest, train, train_typed, truncate_csv, RunManifest, RunSummary, SeedSummary, EVAL_SEED_SALT,
};

use crate::error::{Error, Result};
use crate::gridworld::{env_reset, env_step, EnvConfig, EnvKind, GridState, MissionTemplate, Observation};
use crate::mask::{duplicate, MaskedSequence};
use crate::model::{log_softmax_row, Agent, Denominators, UpdateSample};
use crate::rl::{compute_advantages, standardize, RolloutBuffer, Segment, Transition};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Adam, Grads, Graph, Tensor};
use crate::tokenizer::{tokenize, TokenSequence, Vocabulary};
use crate::Scalar;

/// One environment instance with its own random stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub env_index: usize,
    pub state: GridState,
    pub obs: Observation,
    pub rng: ChaCha8Rng,
    pub episode_reward: f64,
    pub episode_len: usize,
}

impl Actor {
    fn new(env_index: usize, env: &EnvConfig, mut rng: ChaCha8Rng) -> Self {
        let (state, obs) = env_reset(env, rng.gen());
        Self {
            env_index,
            state,
            obs,
            rng,
            episode_reward: 0.0,
            episode_len: 0,
        }
    }
}

/// A training episode that ended during a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub update_idx: u64,
    pub actor: usize,
    pub env: EnvKind,
    pub template: MissionTemplate,
    pub reward: f64,
    pub length: usize,
    pub mission: String,
}

/// One row of `train.csv`. Empty cells mean "not defined for this update".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update_idx: u64,
    pub env_steps: u64,
    pub mean_episode_reward: Option<f64>,
    #[serde(rename = "L_ml")]
    pub l_ml: Option<f64>,
    #[serde(rename = "L_ppo_surrogate")]
    pub l_ppo_surrogate: f64,
    #[serde(rename = "L_vf")]
    pub l_vf: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub log: UpdateLog,
    pub episodes: Vec<EpisodeRecord>,
    /// Optimizer entries: transitions times duplicates.
    pub dataset_size: usize,
    /// Transitions collected per configured environment.
    pub samples_per_env: Vec<usize>,
    pub minibatches: usize,
}

/// Loss statistics of one micro-batch, already scaled by the minibatch
/// denominators so that micro-batches add up.
struct MicroOut<T> {
    grads: Grads<T>,
    l_ml: f64,
    surrogate: f64,
    value: f64,
    entropy: f64,
    clipped: usize,
}

pub struct Trainer<T> {
    config: ExperimentConfig,
    seed: u64,
    vocab: Vocabulary,
    agent: Agent<T>,
    adam: Adam<T>,
    actors: Vec<Actor>,
    rng: ChaCha8Rng,
    update: u64,
    env_steps: u64,
    pool: Option<ThreadPool>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh trainer for one seed. The transfer regime loads its weights from
    /// `config.checkpoint_in`.
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let model_seed: u64 = master.gen();
        let (agent, vocab) = match config.regime {
            Regime::Transfer => {
                let path = config.checkpoint_in.as_ref().expect("validated");
                if !path.exists() {
                    return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
                }
                let ck = Checkpoint::<T>::load(path)?;
                transfer_agent(&ck, &config)?
            }
            _ => (
                Agent::new(config.model, &config.encoder, &config.cnn_gru, model_seed)?,
                Vocabulary::full(),
            ),
        };
        let per_env = config.actors / config.envs.len();
        let actors = (0..config.actors)
            .map(|i| {
                let env_index = (i / per_env).min(config.envs.len() - 1);
                let rng = ChaCha8Rng::seed_from_u64(master.gen());
                Actor::new(env_index, &config.envs[env_index], rng)
            })
            .collect();
        let adam = Adam::new(config.adam(), agent.params());
        let rng = ChaCha8Rng::from_rng(&mut master).expect("chacha seeding");
        Ok(Self {
            pool: build_pool(&config)?,
            config,
            seed,
            vocab,
            agent,
            adam,
            actors,
            rng,
            update: 0,
            env_steps: 0,
        })
    }

    /// Restores a trainer saved by [`Trainer::checkpoint`]. The configuration
    /// must hash to the value stored in the checkpoint.
    pub fn resume(config: ExperimentConfig, ck: &Checkpoint<T>) -> Result<Self> {
        config.validate()?;
        let extra = &ck.meta["extra"];
        let stored = extra["config_hash"].as_str().unwrap_or_default();
        if stored != config.hash() {
            return Err(Error::Config(format!(
                "config hash mismatch on resume: checkpoint {stored}, config {}",
                config.hash()
            )));
        }
        let (agent, vocab) = Agent::from_checkpoint(ck)?;
        if agent.kind() != config.model {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {}, config asks for {}",
                agent.kind(),
                config.model
            )));
        }
        let field = |k: &str| -> Result<serde_json::Value> {
            extra
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing trainer field {k:?}")))
        };
        let actors: Vec<Actor> = serde_json::from_value(field("actors")?)?;
        if actors.len() != config.actors {
            return Err(Error::Checkpoint(format!("{} actors stored, {} configured", actors.len(), config.actors)));
        }
        let mut adam = Adam::new(config.adam(), agent.params());
        adam.state.step = serde_json::from_value(field("adam_step")?)?;
        for (id, name, t) in agent.params().iter() {
            for (prefix, dst) in [("adam.m.", &mut adam.state.m), ("adam.v.", &mut adam.state.v)] {
                let src = ck
                    .tensor(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {prefix}{name}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("optimizer tensor {prefix}{name} has wrong shape")));
                }
                dst[id.index()] = src.data().to_vec();
            }
        }
        Ok(Self {
            pool: build_pool(&config)?,
            seed: serde_json::from_value(field("seed")?)?,
            update: serde_json::from_value(field("update")?)?,
            env_steps: serde_json::from_value(field("env_steps")?)?,
            rng: serde_json::from_value(field("rng")?)?,
            config,
            vocab,
            agent,
            adam,
            actors,
        })
    }

    /// Model weights, optimizer moments and every generator state.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let extra = json!({
            "config_hash": self.config.hash(),
            "seed": self.seed,
            "update": self.update,
            "env_steps": self.env_steps,
            "adam_step": self.adam.state.step,
            "actors": self.actors,
            "rng": self.rng,
        });
        let mut ck = self.agent.to_checkpoint(&self.vocab, extra);
        for (prefix, moments) in [("adam.m.", &self.adam.state.m), ("adam.v.", &self.adam.state.v)] {
            for (id, name, t) in self.agent.params().iter() {
                let data = moments[id.index()].clone();
                let tensor = Tensor::from_vec(t.shape(), data).expect("moment shape");
                ck.tensors.push((format!("{prefix}{name}"), tensor));
            }
        }
        ck
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn agent(&self) -> &Agent<T> {
        &self.agent
    }

    pub fn actors(&self) -> &[Actor] {
        &self.actors
    }

    pub fn update(&self) -> u64 {
        self.update
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn is_finished(&self) -> bool {
        self.env_steps >= self.config.total_env_steps
    }

    /// Collect `N * T` steps with the current policy, then optimize for K
    /// epochs. Errors carry the index of the failing update.
    pub fn run_iteration(&mut self) -> Result<IterationReport> {
        let idx = self.update + 1;
        self.iteration(idx).map_err(|e| Error::AtUpdate {
            update: idx,
            source: Box::new(e),
        })
    }

    fn iteration(&mut self, idx: u64) -> Result<IterationReport> {
        let (buffer, episodes) = self.collect_rollout(idx)?;
        let mut samples_per_env = vec![0; self.config.envs.len()];
        for (seg, actor) in buffer.segments.iter().zip(&self.actors) {
            samples_per_env[actor.env_index] += seg.steps.len();
        }
        let (stats, dataset_size, minibatches) = self.optimize(&buffer)?;
        self.update = idx;
        self.env_steps += buffer.len() as u64;
        let mean_episode_reward = if episodes.is_empty() {
            None
        } else {
            Some(episodes.iter().map(|e| e.reward).sum::<f64>() / episodes.len() as f64)
        };
        let log = UpdateLog {
            update_idx: idx,
            env_steps: self.env_steps,
            mean_episode_reward,
            l_ml: stats.l_ml,
            l_ppo_surrogate: stats.surrogate,
            l_vf: stats.value,
            entropy: stats.entropy,
            grad_norm: stats.grad_norm,
            clip_fraction: stats.clip_fraction,
        };
        Ok(IterationReport {
            log,
            episodes,
            dataset_size,
            samples_per_env,
            minibatches,
        })
    }

    /// Every actor takes `T` steps under the current parameters on clean
    /// inputs. Segments are in actor order.
    pub fn collect_rollout(&mut self, update_idx: u64) -> Result<(RolloutBuffer, Vec<EpisodeRecord>)> {
        let chunk = self.actors.len().div_ceil(self.config.effective_workers());
        let ctx = RolloutCtx {
            agent: &self.agent,
            vocab: &self.vocab,
            envs: &self.config.envs,
            horizon: self.config.horizon,
            max_len: self.config.encoder.max_positions,
            update_idx,
        };
        let run = |(c, actors): (usize, &mut [Actor])| ctx.run(actors, c * chunk);
        let parts: Vec<Result<_>> = match &self.pool {
            Some(pool) => pool.install(|| self.actors.par_chunks_mut(chunk).enumerate().map(run).collect()),
            None => self.actors.chunks_mut(chunk).enumerate().map(run).collect(),
        };
        let mut buffer = RolloutBuffer::default();
        let mut episodes = Vec::new();
        for part in parts {
            let (segs, eps) = part?;
            buffer.segments.extend(segs);
            episodes.extend(eps);
        }
        Ok((buffer, episodes))
    }

    fn optimize(&mut self, buffer: &RolloutBuffer) -> Result<(FinalStats, usize, usize)> {
        let cfg = &self.config;
        let (mut adv, ret) = compute_advantages(buffer, cfg.ppo.gamma, cfg.ppo.gae_lambda)?;
        if cfg.ppo.normalize_advantages {
            standardize(&mut adv);
        }
        let transitions: Vec<&Transition> = buffer.transitions().collect();
        let clean = transitions
            .iter()
            .map(|t| tokenize(&t.obs, &self.vocab, cfg.encoder.max_positions))
            .collect::<Result<Vec<TokenSequence>>>()?;

        // D independently masked copies per step; the CNN+GRU sees D clean copies
        let d = cfg.mask.duplicates;
        let mut entries: Vec<(usize, Option<MaskedSequence>)> = Vec::with_capacity(clean.len() * d);
        for (i, seq) in clean.iter().enumerate() {
            if self.agent.kind().masks_inputs() {
                for m in duplicate(seq, d, &cfg.mask, &self.vocab, &mut self.rng)? {
                    entries.push((i, Some(m)));
                }
            } else {
                entries.extend((0..d).map(|_| (i, None)));
            }
        }

        let mut acc = EpochStats::default();
        let mut order: Vec<usize> = (0..entries.len()).collect();
        let mut minibatches = 0;
        for _ in 0..cfg.ppo.epochs {
            order.shuffle(&mut self.rng);
            for mb in order.chunks(cfg.ppo.minibatch_size) {
                let denoms = Denominators {
                    samples: mb.len(),
                    candidates: mb
                        .iter()
                        .map(|&e| entries[e].1.as_ref().map_or(0, |m| m.candidates.len()))
                        .sum(),
                };
                let micro: Vec<(&[usize], u64)> = mb.chunks(cfg.micro_batch).map(|c| (c, self.rng.gen())).collect();
                let agent = &self.agent;
                let vocab = &self.vocab;
                let work = |(idx, seed): &(&[usize], u64)| -> Result<MicroOut<T>> {
                    let samples: Vec<UpdateSample<'_>> = idx
                        .iter()
                        .map(|&e| {
                            let (t, masked) = &entries[e];
                            UpdateSample {
                                observation: &transitions[*t].obs,
                                clean: &clean[*t],
                                masked: masked.as_ref(),
                                action: transitions[*t].action,
                                old_log_prob: transitions[*t].log_prob,
                                advantage: adv[*t],
                                ret: ret[*t],
                            }
                        })
                        .collect();
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(*seed);
                    let mut g = Graph::new();
                    let parts = agent.loss(&mut g, &samples, vocab, &cfg.ppo, cfg.ml_weight, denoms, Some(&mut drop_rng as &mut dyn rand::RngCore))?;
                    g.backward(parts.total)?;
                    let scalar = |v| g.value(v).item().as_f64();
                    Ok(MicroOut {
                        grads: g.param_grads(agent.params()),
                        l_ml: parts.mask_loss.map_or(0.0, scalar),
                        surrogate: scalar(parts.ppo.surrogate),
                        value: scalar(parts.ppo.value_loss),
                        entropy: scalar(parts.ppo.entropy),
                        clipped: parts.ppo.clipped,
                    })
                };
                let outs: Vec<Result<MicroOut<T>>> = match &self.pool {
                    Some(pool) => pool.install(|| micro.par_iter().map(work).collect()),
                    None => micro.iter().map(work).collect(),
                };
                // summed in micro-batch order so the result does not depend on scheduling
                let mut outs = outs.into_iter();
                let mut total = outs.next().expect("non-empty minibatch")?;
                for o in outs {
                    let o = o?;
                    for i in 0..total.grads.len() {
                        for (a, b) in total.grads.get_mut(i).iter_mut().zip(o.grads.get(i)) {
                            *a += *b;
                        }
                    }
                    total.l_ml += o.l_ml;
                    total.surrogate += o.surrogate;
                    total.value += o.value;
                    total.entropy += o.entropy;
                    total.clipped += o.clipped;
                }
                if !total.grads.all_finite() {
                    return Err(Error::NonFinite {
                        op: "backward".into(),
                        context: format!(" (minibatch {minibatches} gradients)"),
                    });
                }
                let norm = total.grads.clip_global_norm(T::c(cfg.ppo.max_grad_norm)).as_f64();
                self.adam.step(self.agent.params_mut(), &total.grads)?;
                acc.add(&total, norm, mb.len());
                minibatches += 1;
            }
        }
        Ok((acc.finish(self.agent.kind().uses_mask_loss()), entries.len(), minibatches))
    }
}

fn build_pool(config: &ExperimentConfig) -> Result<Option<ThreadPool>> {
    match config.effective_workers() {
        1 => Ok(None),
        n => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}"))),
    }
}

/// Loads the source weights for a transfer run and checks that they fit the
/// target configuration.
fn transfer_agent<T: Scalar>(ck: &Checkpoint<T>, config: &ExperimentConfig) -> Result<(Agent<T>, Vocabulary)> {
    let (agent, vocab) = Agent::from_checkpoint(ck)?;
    match agent.encoder() {
        Some(enc) if *enc.config() == config.encoder => {}
        Some(_) => return Err(Error::Incompatible("encoder configuration differs from the checkpoint".into())),
        None => return Err(Error::Incompatible("transfer source is not a transformer checkpoint".into())),
    }
    let missing = vocab.missing_words(&Vocabulary::for_envs(&config.env_kinds()));
    if !missing.is_empty() {
        return Err(Error::Incompatible(format!(
            "checkpoint vocabulary lacks tokens: {}",
            missing.join(", ")
        )));
    }
    Ok((agent.with_kind(config.model)?, vocab))
}

struct RolloutCtx<'a, T> {
    agent: &'a Agent<T>,
    vocab: &'a Vocabulary,
    envs: &'a [EnvConfig],
    horizon: usize,
    max_len: usize,
    update_idx: u64,
}

impl<T: Scalar> RolloutCtx<'_, T> {
    fn run(&self, actors: &mut [Actor], first: usize) -> Result<(Vec<Segment>, Vec<EpisodeRecord>)> {
        let n_actions = crate::gridworld::Action::COUNT;
        let mut segs = vec![Segment::default(); actors.len()];
        let mut episodes = Vec::new();
        for _ in 0..self.horizon {
            let obs: Vec<&Observation> = actors.iter().map(|a| &a.obs).collect();
            let (logits, values) = self.agent.act(&obs, self.vocab, self.max_len)?;
            for (j, a) in actors.iter_mut().enumerate() {
                let logp = log_softmax_row(&logits[j * n_actions..(j + 1) * n_actions]);
                let action = sample_action(&logp, &mut a.rng)?;
                let (state, next_obs, reward, done) = env_step(&a.state, action)?;
                a.episode_reward += reward;
                a.episode_len += 1;
                let obs = std::mem::replace(&mut a.obs, next_obs);
                segs[j].steps.push(Transition {
                    obs,
                    action,
                    reward,
                    done,
                    value: values[j],
                    log_prob: logp[action],
                });
                a.state = state;
                if done {
                    episodes.push(EpisodeRecord {
                        update_idx: self.update_idx,
                        actor: first + j,
                        env: a.state.env_kind,
                        template: a.state.mission.template,
                        reward: a.episode_reward,
                        length: a.episode_len,
                        mission: a.state.mission.sentence(),
                    });
                    let (state, obs) = env_reset(&self.envs[a.env_index], a.rng.gen());
                    a.state = state;
                    a.obs = obs;
                    a.episode_reward = 0.0;
                    a.episode_len = 0;
                }
            }
        }
        let obs: Vec<&Observation> = actors.iter().map(|a| &a.obs).collect();
        let (_, values) = self.agent.act(&obs, self.vocab, self.max_len)?;
        for (seg, v) in segs.iter_mut().zip(values) {
            if seg.steps.last().is_some_and(|s| !s.done) {
                seg.bootstrap_value = Some(v);
            }
        }
        Ok((segs, episodes))
    }
}

/// Draws an action from log-probabilities.
pub fn sample_action<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> Result<usize> {
    let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
    let dist = WeightedIndex::new(&probs).map_err(|e| Error::NonFinite {
        op: "policy_logits".into(),
        context: format!(" ({e}: {log_probs:?})"),
    })?;
    Ok(dist.sample(rng))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn greedy_action(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Default)]
struct EpochStats {
    l_ml: f64,
    surrogate: f64,
    value: f64,
    entropy: f64,
    grad_norm: f64,
    clipped: usize,
    samples: usize,
    minibatches: usize,
}

struct FinalStats {
    l_ml: Option<f64>,
    surrogate: f64,
    value: f64,
    entropy: f64,
    grad_norm: f64,
    clip_fraction: f64,
}

impl EpochStats {
    fn add<T>(&mut self, m: &MicroOut<T>, grad_norm: f64, samples: usize) {
        self.l_ml += m.l_ml;
        self.surrogate += m.surrogate;
        self.value += m.value;
        self.entropy += m.entropy;
        self.grad_norm += grad_norm;
        self.clipped += m.clipped;
        self.samples += samples;
        self.minibatches += 1;
    }

    /// Means over the minibatches of the update.
    fn finish(self, has_mask_loss: bool) -> FinalStats {
        let n = self.minibatches.max(1) as f64;
        FinalStats {
            l_ml: has_mask_loss.then_some(self.l_ml / n),
            surrogate: self.surrogate / n,
            value: self.value / n,
            entropy: self.entropy / n,
            grad_norm: self.grad_norm / n,
            clip_fraction: self.clipped as f64 / self.samples.max(1) as f64,
        }
    }
}

#[cfg(test)]
mod tests;
