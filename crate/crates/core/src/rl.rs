//! Advantage estimation and the clipped policy objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::Observation;
use crate::tensor::{Graph, Tensor, Var};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    /// Evaluate value and entropy on the masked input (otherwise on the clean one).
    pub masked_value_entropy: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            minibatch_size: 256,
            learning_rate: 1e-4,
            max_grad_norm: 0.5,
            normalize_advantages: true,
            masked_value_entropy: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!("clip_eps {} outside (0, 1)", self.clip_eps)));
        }
        if !unit(self.gamma) || !unit(self.gae_lambda) {
            return Err(Error::Config("gamma and gae_lambda must lie in [0, 1]".into()));
        }
        if self.epochs == 0 || self.minibatch_size == 0 {
            return Err(Error::Config("epochs and minibatch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("learning_rate and max_grad_norm must be positive".into()));
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return Err(Error::Config("loss coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Observation the action was chosen from.
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub value: f64,
    pub log_prob: f64,
}

/// One actor's contiguous steps. `bootstrap_value` is the value of the state
/// after the last step, required unless that step ended an episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Segment {
    pub steps: Vec<Transition>,
    pub bootstrap_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub segments: Vec<Segment>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Transitions in actor-major order, matching [`compute_advantages`].
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.segments.iter().flat_map(|s| s.steps.iter())
    }
}

/// Generalized advantage estimates and returns for one segment.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: Option<f64>,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::shape("gae", &[n], &[values.len(), dones.len()]));
    }
    let next_value = match (dones.last(), bootstrap) {
        (None, _) => return Ok((Vec::new(), Vec::new())),
        (Some(true), b) => b.unwrap_or(0.0),
        (Some(false), Some(b)) => b,
        (Some(false), None) => {
            return Err(Error::invalid("compute_advantages", "missing bootstrap value for truncated segment"))
        }
    };
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let v_next = if t + 1 < n { values[t + 1] } else { next_value };
        let delta = rewards[t] + gamma * v_next * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Advantages and returns for every transition, actor-major.
pub fn compute_advantages(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut adv = Vec::with_capacity(buffer.len());
    let mut ret = Vec::with_capacity(buffer.len());
    for seg in &buffer.segments {
        let r: Vec<f64> = seg.steps.iter().map(|s| s.reward).collect();
        let v: Vec<f64> = seg.steps.iter().map(|s| s.value).collect();
        let d: Vec<bool> = seg.steps.iter().map(|s| s.done).collect();
        let (a, rt) = gae(&r, &v, &d, seg.bootstrap_value, gamma, lambda)?;
        adv.extend(a);
        ret.extend(rt);
    }
    Ok((adv, ret))
}

/// Shifts to mean 0 and scales to unit (population) deviation.
pub fn standardize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in xs {
        *x = (*x - mean) / (std + 1e-8);
    }
}

/// Per-sample targets of one (micro-)batch.
#[derive(Debug, Clone, Copy)]
pub struct PpoTargets<'a> {
    pub actions: &'a [usize],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

/// Graph nodes of the policy loss and its parts, each already divided by the
/// minibatch size.
#[derive(Debug, Clone, Copy)]
pub struct PpoTerms {
    pub total: Var,
    pub surrogate: Var,
    pub value_loss: Var,
    pub entropy: Var,
    /// Per-sample probability ratio `[n]`.
    pub ratio: Var,
    /// Samples whose ratio left the clip interval.
    pub clipped: usize,
}

/// Clipped surrogate + `c1 * value error - c2 * entropy`.
///
/// `policy_logits` come from the input the ratio is evaluated on; `value` and
/// `entropy_logits` may come from a different forward pass. Sums are divided by
/// `denom` so that micro-batches of one minibatch add up to its mean.
pub fn ppo_loss<T: Scalar>(
    g: &mut Graph<T>,
    policy_logits: Var,
    entropy_logits: Var,
    value: Var,
    targets: PpoTargets<'_>,
    config: &PpoConfig,
    denom: usize,
) -> Result<PpoTerms> {
    let n = targets.actions.len();
    let lens = [targets.old_log_probs.len(), targets.advantages.len(), targets.returns.len()];
    if lens.iter().any(|&l| l != n) || g.shape(policy_logits).first() != Some(&n) || g.shape(value) != [n] {
        return Err(Error::shape("ppo_loss", g.shape(policy_logits), &[n]));
    }
    let inv = T::c(1.0 / denom.max(1) as f64);
    let col = |g: &mut Graph<T>, xs: &[f64]| -> Result<Var> {
        Ok(g.constant(Tensor::from_vec(&[n], xs.iter().map(|&x| T::c(x)).collect())?))
    };

    let logp_all = g.log_softmax(policy_logits)?;
    let logp = g.pick_cols(logp_all, targets.actions)?;
    let old = col(g, targets.old_log_probs)?;
    let diff = g.sub(logp, old)?;
    let ratio = g.exp(diff);
    let eps = config.clip_eps;
    let mut clipped = 0;
    for (i, r) in g.value(ratio).data().iter().enumerate() {
        let r = r.as_f64();
        if !r.is_finite() {
            return Err(Error::NonFinite {
                op: "ppo_ratio".into(),
                context: format!(
                    " (sample {i}: log_prob {}, old {}, advantage {})",
                    g.value(logp).data()[i].as_f64(),
                    targets.old_log_probs[i],
                    targets.advantages[i]
                ),
            });
        }
        if (r - 1.0).abs() > eps {
            clipped += 1;
        }
    }
    let adv = col(g, targets.advantages)?;
    let unclipped = g.mul(ratio, adv)?;
    let bounded = g.clamp(ratio, T::c(1.0 - eps), T::c(1.0 + eps));
    let bounded = g.mul(bounded, adv)?;
    let objective = g.minimum(unclipped, bounded)?;
    let objective = g.sum(objective);
    let surrogate = g.scale(objective, -inv);

    let ret = col(g, targets.returns)?;
    let err = g.sub(value, ret)?;
    let sq = g.square(err);
    let sq = g.sum(sq);
    let value_loss = g.scale(sq, inv);

    let ent_logp = if entropy_logits == policy_logits {
        logp_all
    } else {
        g.log_softmax(entropy_logits)?
    };
    let probs = g.exp(ent_logp);
    let plogp = g.mul(probs, ent_logp)?;
    let plogp = g.sum(plogp);
    let entropy = g.scale(plogp, -inv);

    let v_term = g.scale(value_loss, T::c(config.value_coef));
    let e_term = g.scale(entropy, T::c(-config.entropy_coef));
    let total = g.add(surrogate, v_term)?;
    let total = g.add(total, e_term)?;
    Ok(PpoTerms {
        total,
        surrogate,
        value_loss,
        entropy,
        ratio,
        clipped,
    })
}

/// `w_ml * L_ml + L_ppo`; without a masked-token term the result is `L_ppo`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, mask_loss: Option<Var>, ppo: Var, ml_weight: f64) -> Result<Var> {
    let check = |g: &Graph<T>, v: Var, what: &str| -> Result<()> {
        if g.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                op: "total_loss".into(),
                context: format!(" ({what})"),
            })
        }
    };
    check(g, ppo, "policy loss")?;
    match mask_loss {
        None => Ok(ppo),
        Some(ml) => {
            check(g, ml, "masked-token loss")?;
            let weighted = g.scale(ml, T::c(ml_weight));
            g.add(weighted, ppo)
        }
    }
}

#[cfg(test)]
mod tests;
