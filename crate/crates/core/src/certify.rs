//! Finite-difference certification of every differentiable op and of a
//! complete small-model training loss, in `f64`.

use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::ModelKind;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::gridworld::{env_reset, env_step, EnvConfig, EnvKind};
use crate::mask::{duplicate, MaskConfig};
use crate::model::{log_softmax_row, Agent, Denominators, UpdateSample};
use crate::nn::truncated_normal;
use crate::rl::PpoConfig;
use crate::tensor::gradcheck::{check_inputs, check_params, GradCheck, STEP};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{tokenize, Vocabulary};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CertReport {
    /// Worst result per check name.
    pub checks: Vec<GradCheck>,
    pub max_rel_err: f64,
    pub elapsed: Duration,
}

impl CertReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// `rounds` random-shape passes over the op set, then the end-to-end loss.
pub fn run(rounds: usize, seed: u64) -> Result<CertReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks: Vec<GradCheck> = Vec::new();
    let mut merge = |c: GradCheck| match checks.iter_mut().find(|x| x.name == c.name) {
        Some(x) => {
            x.max_rel_err = x.max_rel_err.max(c.max_rel_err);
            x.checked += c.checked;
        }
        None => checks.push(c),
    };
    for _ in 0..rounds {
        for c in op_checks(&mut rng)? {
            merge(c);
        }
    }
    merge(end_to_end_check(seed)?);
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(CertReport {
        checks,
        max_rel_err,
        elapsed: start.elapsed(),
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.5);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// One pass over every differentiable op with freshly drawn shapes.
pub fn op_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    let d = |rng: &mut ChaCha8Rng| rng.gen_range(1..5usize);
    let (m, k, n, b) = (d(rng), d(rng), d(rng), d(rng));
    let mut out = Vec::new();
    let u = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);

    out.push(check_inputs("matmul", &[u(rng, &[m, k]), u(rng, &[k, n])], STEP, |g, v| g.matmul(v[0], v[1]))?);
    let alpha = rng.gen_range(0.2..2.0);
    out.push(check_inputs("bmm", &[u(rng, &[b, m, k]), u(rng, &[b, k, n])], STEP, |g, v| {
        g.bmm(v[0], v[1], false, alpha)
    })?);
    out.push(check_inputs("bmm_trans_b", &[u(rng, &[b, m, k]), u(rng, &[b, n, k])], STEP, |g, v| {
        g.bmm(v[0], v[1], true, alpha)
    })?);
    let pair = [u(rng, &[m, n]), u(rng, &[m, n])];
    out.push(check_inputs("add", &pair, STEP, |g, v| g.add(v[0], v[1]))?);
    out.push(check_inputs("sub", &pair, STEP, |g, v| g.sub(v[0], v[1]))?);
    out.push(check_inputs("mul", &pair, STEP, |g, v| g.mul(v[0], v[1]))?);
    let a = u(rng, &[m, n]);
    let gap = away_from_zero(rng, &[m, n]);
    let shifted = Tensor::from_vec(&[m, n], a.data().iter().zip(gap.data()).map(|(x, y)| x + y).collect())?;
    out.push(check_inputs("minimum", &[a, shifted], STEP, |g, v| g.minimum(v[0], v[1]))?);
    out.push(check_inputs("add_bias", &[u(rng, &[b, m, n]), u(rng, &[n])], STEP, |g, v| g.add_bias(v[0], v[1]))?);
    let c = rng.gen_range(-2.0..2.0);
    out.push(check_inputs("scale", &[u(rng, &[m, n])], STEP, |g, v| Ok(g.scale(v[0], c)))?);
    let ids: Vec<usize> = (0..m + 2).map(|_| rng.gen_range(0..k + 1)).collect();
    out.push(check_inputs("embedding", &[u(rng, &[k + 1, n])], STEP, |g, v| g.embedding(v[0], &ids))?);
    let axis = rng.gen_range(0..3);
    out.push(check_inputs("softmax", &[uniform(rng, &[b, m, n + 1], -2.0, 2.0)], STEP, |g, v| {
        g.softmax(v[0], axis)
    })?);
    out.push(check_inputs("log_softmax", &[uniform(rng, &[m, n + 1], -2.0, 2.0)], STEP, |g, v| g.log_softmax(v[0]))?);
    // width 2 normalizes to +-1 whatever the input, leaving a degenerate Jacobian
    let w = n + 2;
    out.push(check_inputs(
        "layer_norm",
        &[uniform(rng, &[m, w], -2.0, 2.0), uniform(rng, &[w], 0.5, 1.5), u(rng, &[w])],
        STEP,
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-12),
    )?);
    let x = uniform(rng, &[m, n], -3.0, 3.0);
    out.push(check_inputs("gelu", std::slice::from_ref(&x), STEP, |g, v| Ok(g.gelu(v[0])))?);
    out.push(check_inputs("sigmoid", std::slice::from_ref(&x), STEP, |g, v| Ok(g.sigmoid(v[0])))?);
    out.push(check_inputs("tanh", std::slice::from_ref(&x), STEP, |g, v| Ok(g.tanh(v[0])))?);
    out.push(check_inputs("exp", std::slice::from_ref(&x), STEP, |g, v| Ok(g.exp(v[0])))?);
    out.push(check_inputs("square", std::slice::from_ref(&x), STEP, |g, v| Ok(g.square(v[0])))?);
    out.push(check_inputs("relu", &[away_from_zero(rng, &[m, n])], STEP, |g, v| Ok(g.relu(v[0])))?);
    let mut clamped = away_from_zero(rng, &[m, n]);
    for v in clamped.data_mut() {
        // keep clear of the bounds at +-1
        if (v.abs() - 1.0).abs() < 0.1 {
            *v *= 0.5;
        }
    }
    out.push(check_inputs("clamp", &[clamped], STEP, |g, v| Ok(g.clamp(v[0], -1.0, 1.0)))?);
    let cat_axis = rng.gen_range(0..2);
    let (s1, s2) = if cat_axis == 0 { ([m, n], [k, n]) } else { ([m, n], [m, k]) };
    out.push(check_inputs("concat", &[u(rng, &s1), u(rng, &s2)], STEP, |g, v| g.concat(&[v[0], v[1]], cat_axis))?);
    let start = rng.gen_range(0..n + 1);
    out.push(check_inputs("slice", &[u(rng, &[b, m, n + 2])], STEP, |g, v| g.slice(v[0], 2, start, 1))?);
    out.push(check_inputs("transpose", &[u(rng, &[b, m, n])], STEP, |g, v| g.transpose(v[0], 0, 2))?);
    out.push(check_inputs("reshape", &[u(rng, &[b, m, n])], STEP, |g, v| g.reshape(v[0], &[b * m, n]))?);
    let mask: Rc<[bool]> = (0..b * n).map(|_| rng.gen_bool(0.3)).collect();
    out.push(check_inputs("masked_fill", &[u(rng, &[b, m, n])], STEP, |g, v| {
        g.masked_fill(v[0], mask.clone(), n, -7.0)
    })?);
    let drop_seed: u64 = rng.gen();
    out.push(check_inputs("dropout", &[u(rng, &[m, n])], STEP, |g, v| {
        let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
        Ok(g.dropout(v[0], 0.3, &mut r))
    })?);
    out.push(check_inputs("sum", &[u(rng, &[m, n])], STEP, |g, v| Ok(g.sum(v[0])))?);
    out.push(check_inputs("mean", &[u(rng, &[m, n])], STEP, |g, v| Ok(g.mean(v[0])))?);
    out.push(check_inputs("sum_last", &[u(rng, &[b, m, n])], STEP, |g, v| g.sum_last(v[0]))?);
    let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n + 1)).collect();
    out.push(check_inputs("cross_entropy", &[uniform(rng, &[m, n + 1], -2.0, 2.0)], STEP, |g, v| {
        g.cross_entropy(v[0], &targets)
    })?);
    let rows: Vec<usize> = (0..k + 1).map(|_| rng.gen_range(0..m)).collect();
    out.push(check_inputs("gather_rows", &[u(rng, &[m, n])], STEP, |g, v| g.gather_rows(v[0], &rows))?);
    let cols: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
    out.push(check_inputs("pick_cols", &[u(rng, &[m, n])], STEP, |g, v| g.pick_cols(v[0], &cols))?);
    let side = rng.gen_range(2..5);
    out.push(check_inputs("unfold", &[u(rng, &[b, side, side + 1, n])], STEP, |g, v| g.unfold(v[0], 2))?);
    Ok(out)
}

/// Configuration of the certified end-to-end model.
pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 4,
        n_heads: 1,
        n_layers: 1,
        ffn_dim: 8,
        ..EncoderConfig::default()
    }
}

/// Gradient of the full training loss (masked-token + clipped policy +
/// value + entropy, with dropout under a fixed mask) of a d=4, 1-head,
/// 1-layer encoder, over every parameter.
pub fn end_to_end_check(seed: u64) -> Result<GradCheck> {
    let cfg = tiny_encoder_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = Encoder::<f64>::new(cfg.clone(), seed)?;
    // wider init keeps the layer norms well conditioned for differencing
    let ids: Vec<_> = enc.params().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let shape = enc.params().get(id).shape().to_vec();
        *enc.params_mut().get_mut(id) = truncated_normal(&shape, 0.5, &mut rng);
    }

    let vocab = Vocabulary::full();
    let mut observations = Vec::new();
    for (i, kind) in [EnvKind::GoToObject, EnvKind::Fetch, EnvKind::GoToDoor].into_iter().enumerate() {
        let (state, obs) = env_reset(&EnvConfig::new(kind).with_grid_size(6), seed + i as u64);
        let (_, obs2, _, _) = env_step(&state, 1)?;
        observations.push(obs);
        observations.push(obs2);
    }
    let clean = observations
        .iter()
        .map(|o| tokenize(o, &vocab, cfg.max_positions))
        .collect::<Result<Vec<_>>>()?;
    let mask = MaskConfig {
        mask_rate: 0.06,
        ..MaskConfig::default()
    };
    let masked = clean
        .iter()
        .map(|s| Ok(duplicate(s, 1, &mask, &vocab, &mut rng)?.remove(0)))
        .collect::<Result<Vec<_>>>()?;

    let agent = Agent::Transformer {
        kind: ModelKind::Lambert,
        encoder: enc.clone(),
    };
    let refs: Vec<_> = observations.iter().collect();
    let (logits, _) = agent.act(&refs, &vocab, cfg.max_positions)?;
    let n = observations.len();
    let offsets = [0.05, -0.1, 0.3, -0.02, 0.12, -0.4];
    let samples: Vec<UpdateSample<'_>> = (0..n)
        .map(|i| {
            let action = i % 7;
            UpdateSample {
                observation: &observations[i],
                clean: &clean[i],
                masked: Some(&masked[i]),
                action,
                old_log_prob: log_softmax_row(&logits[i * 7..(i + 1) * 7])[action] + offsets[i % offsets.len()],
                advantage: rng.gen_range(-1.5..1.5),
                ret: rng.gen_range(0.0..1.0),
            }
        })
        .collect();
    let denoms = Denominators {
        samples: n,
        candidates: masked.iter().map(|m| m.candidates.len()).sum(),
    };
    let ppo = PpoConfig::default();
    let drop_seed: u64 = rng.gen();
    check_params("end_to_end_loss", enc.params(), STEP, |g: &mut Graph<f64>, p| -> Result<Var> {
        let agent = Agent::Transformer {
            kind: ModelKind::Lambert,
            encoder: Encoder::from_params(cfg.clone(), p)?,
        };
        let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
        Ok(agent.loss(g, &samples, &vocab, &ppo, 1.0, denoms, Some(&mut r))?.total)
    })
}
