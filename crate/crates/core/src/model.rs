//! The three trainable agents behind one interface.

use rand::RngCore;
use serde_json::json;

use crate::baselines::{CnnGru, CnnGruConfig, ModelKind};
use crate::encoder::{Encoder, EncoderConfig, Forward};
use crate::error::{Error, Result};
use crate::gridworld::Observation;
use crate::mask::MaskedSequence;
use crate::rl::{ppo_loss, total_loss, PpoConfig, PpoTargets, PpoTerms};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Graph, ParamSet, Var};
use crate::tokenizer::{tokenize, TokenSequence, Vocabulary};
use crate::Scalar;

#[derive(Debug, Clone)]
pub enum Agent<T> {
    /// Transformer trained with or without the masked-token loss.
    Transformer { kind: ModelKind, encoder: Encoder<T> },
    CnnGru(CnnGru<T>),
}

/// One optimizer sample: an observation, its masked copy (if any) and the
/// rollout targets.
#[derive(Debug, Clone, Copy)]
pub struct UpdateSample<'a> {
    pub observation: &'a Observation,
    pub clean: &'a TokenSequence,
    pub masked: Option<&'a MaskedSequence>,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Loss graph of one micro-batch. Every term is already divided by the
/// sample (or candidate) count of the whole minibatch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub mask_loss: Option<Var>,
    pub ppo: PpoTerms,
}

/// Denominators shared by the micro-batches of one minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Denominators {
    pub samples: usize,
    pub candidates: usize,
}

impl<T: Scalar> Agent<T> {
    pub fn new(kind: ModelKind, encoder: &EncoderConfig, cnn: &CnnGruConfig, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::CnnGru => Agent::CnnGru(CnnGru::new(cnn.clone(), seed)?),
            _ => Agent::Transformer {
                kind,
                encoder: Encoder::new(encoder.clone(), seed)?,
            },
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Agent::Transformer { kind, .. } => *kind,
            Agent::CnnGru(_) => ModelKind::CnnGru,
        }
    }

    pub fn encoder(&self) -> Option<&Encoder<T>> {
        match self {
            Agent::Transformer { encoder, .. } => Some(encoder),
            Agent::CnnGru(_) => None,
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        match self {
            Agent::Transformer { encoder, .. } => encoder.params(),
            Agent::CnnGru(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        match self {
            Agent::Transformer { encoder, .. } => encoder.params_mut(),
            Agent::CnnGru(m) => m.params_mut(),
        }
    }

    /// Same weights under another training objective (e.g. transfer into the
    /// no-ML variant). Only transformer kinds are interchangeable.
    pub fn with_kind(self, kind: ModelKind) -> Result<Self> {
        match (self, kind) {
            (Agent::Transformer { encoder, .. }, ModelKind::Lambert | ModelKind::LambertNoMl) => {
                Ok(Agent::Transformer { kind, encoder })
            }
            (a @ Agent::CnnGru(_), ModelKind::CnnGru) => Ok(a),
            (a, k) => Err(Error::Incompatible(format!("cannot reuse {} weights as {k}", a.kind()))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Agent<U> {
        match self {
            Agent::Transformer { kind, encoder } => Agent::Transformer {
                kind: *kind,
                encoder: encoder.cast(),
            },
            Agent::CnnGru(m) => Agent::CnnGru(m.cast()),
        }
    }

    /// Clean-input action logits (`[batch * n_actions]`, row-major) and values.
    pub fn act(&self, obs: &[&Observation], vocab: &Vocabulary, max_len: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::inference();
        let (logits, value) = match self {
            Agent::Transformer { encoder, .. } => {
                let seqs = obs
                    .iter()
                    .map(|o| tokenize(o, vocab, max_len))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<_> = seqs.iter().collect();
                let out = encoder.encode(&mut g, &refs, Forward::eval())?;
                encoder.policy_value(&mut g, &out)?
            }
            Agent::CnnGru(m) => m.forward(&mut g, obs, vocab)?,
        };
        let to_f64 = |v: Var| g.value(v).data().iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        Ok((to_f64(logits), to_f64(value)))
    }

    /// Builds the training loss for one micro-batch.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        samples: &[UpdateSample<'_>],
        vocab: &Vocabulary,
        ppo: &PpoConfig,
        ml_weight: f64,
        denoms: Denominators,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<LossParts> {
        let actions: Vec<usize> = samples.iter().map(|s| s.action).collect();
        let old: Vec<f64> = samples.iter().map(|s| s.old_log_prob).collect();
        let adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
        let ret: Vec<f64> = samples.iter().map(|s| s.ret).collect();
        let targets = PpoTargets {
            actions: &actions,
            old_log_probs: &old,
            advantages: &adv,
            returns: &ret,
        };
        match self {
            Agent::CnnGru(m) => {
                let obs: Vec<_> = samples.iter().map(|s| s.observation).collect();
                let (logits, value) = m.forward(g, &obs, vocab)?;
                let terms = ppo_loss(g, logits, logits, value, targets, ppo, denoms.samples)?;
                Ok(LossParts {
                    total: terms.total,
                    mask_loss: None,
                    ppo: terms,
                })
            }
            Agent::Transformer { kind, encoder } => {
                let inputs: Vec<&TokenSequence> = samples
                    .iter()
                    .map(|s| s.masked.map_or(s.clean, |m| &m.sequence))
                    .collect();
                let fwd = match dropout_rng {
                    Some(rng) => Forward::train(rng),
                    None => Forward::eval(),
                };
                // value and entropy come from the clean input when configured so;
                // that second pass runs without dropout
                let any_masked = samples.iter().any(|s| s.masked.is_some());
                let out = encoder.encode(g, &inputs, fwd)?;
                let (logits, value) = encoder.policy_value(g, &out)?;
                let (ent_logits, value) = if ppo.masked_value_entropy || !any_masked {
                    (logits, value)
                } else {
                    let clean: Vec<_> = samples.iter().map(|s| s.clean).collect();
                    let out_c = encoder.encode(g, &clean, Forward::eval())?;
                    encoder.policy_value(g, &out_c)?
                };
                let terms = ppo_loss(g, logits, ent_logits, value, targets, ppo, denoms.samples)?;
                let mask_loss = if kind.uses_mask_loss() {
                    let mut positions = Vec::new();
                    let mut ids = Vec::new();
                    for (i, s) in samples.iter().enumerate() {
                        if let Some(m) = s.masked {
                            positions.extend(m.candidates.iter().map(|&c| (i, c)));
                            ids.extend(m.original_ids.iter().map(|&t| t as usize));
                        }
                    }
                    if positions.is_empty() {
                        None
                    } else {
                        let logits = encoder.mlm_logits(g, &out, &positions)?;
                        let ce = g.cross_entropy(logits, &ids)?;
                        let ce = g.sum(ce);
                        Some(g.scale(ce, T::c(1.0 / denoms.candidates.max(1) as f64)))
                    }
                } else {
                    None
                };
                let total = total_loss(g, mask_loss, terms.total, ml_weight)?;
                Ok(LossParts {
                    total,
                    mask_loss,
                    ppo: terms,
                })
            }
        }
    }

    /// Self-describing checkpoint; `extra` is stored under `meta.extra`.
    pub fn to_checkpoint(&self, vocab: &Vocabulary, extra: serde_json::Value) -> Checkpoint<T> {
        let model_config = match self {
            Agent::Transformer { encoder, .. } => json!({ "encoder": encoder.config() }),
            Agent::CnnGru(m) => json!({ "cnn_gru": m.config() }),
        };
        let tensors = self
            .params()
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.clone()))
            .collect();
        Checkpoint {
            meta: json!({
                "model": self.kind(),
                "config": model_config,
                "vocabulary": vocab.manifest(),
                "extra": extra,
            }),
            tensors,
        }
    }

    /// Restores an agent and its vocabulary from a checkpoint; tensors that are
    /// not model parameters (optimizer moments) are ignored.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<(Self, Vocabulary)> {
        let meta = &ck.meta;
        let field = |key: &str| {
            meta.get(key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing meta field {key:?}")))
        };
        let kind: ModelKind = serde_json::from_value(field("model")?)?;
        let vocab = Vocabulary::from_manifest(&serde_json::from_value(field("vocabulary")?)?)?;
        let config = field("config")?;
        let mut agent = match kind {
            ModelKind::CnnGru => {
                let cfg: CnnGruConfig = serde_json::from_value(config["cnn_gru"].clone())?;
                Agent::CnnGru(CnnGru::new(cfg, 0)?)
            }
            _ => {
                let cfg: EncoderConfig = serde_json::from_value(config["encoder"].clone())?;
                Agent::Transformer {
                    kind,
                    encoder: Encoder::new(cfg, 0)?,
                }
            }
        };
        let ids: Vec<_> = agent.params().iter().map(|(id, name, _)| (id, name.to_string())).collect();
        for (id, name) in ids {
            let src = ck
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let dst = agent.params_mut().get_mut(id);
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok((agent, vocab))
    }
}

/// Stable softmax of one logits row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v - z).collect()
}

#[cfg(test)]
mod tests;
