//! Multimodal transformer encoder with masked-token, actor and critic heads.

use std::rc::Rc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::Action;
use crate::nn::{truncated_normal, LayerNorm, Linear, INIT_STD};
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::tokenizer::{TokenSequence, Vocabulary, DEFAULT_MAX_LEN};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub n_segments: usize,
    pub n_actions: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 3,
            ffn_dim: 256,
            vocab_size: Vocabulary::full().size(),
            max_positions: DEFAULT_MAX_LEN,
            n_segments: 2,
            n_actions: Action::COUNT,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.ffn_dim,
            self.vocab_size,
            self.max_positions,
            self.n_segments,
            self.n_actions,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.ffn_dim);
        let embeddings = (self.vocab_size + self.max_positions + self.n_segments) * d;
        let layer = 4 * Linear::param_count(d, d)
            + Linear::param_count(d, f)
            + Linear::param_count(f, d)
            + 2 * 2 * d;
        embeddings
            + self.n_layers * layer
            + Linear::param_count(d, self.vocab_size)
            + Linear::param_count(d, self.n_actions)
            + Linear::param_count(d, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerIds {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_attn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ln_ffn: LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct EncoderIds {
    token: ParamId,
    position: ParamId,
    segment: ParamId,
    layers: Vec<LayerIds>,
    mlm: Linear,
    actor: Linear,
    critic: Linear,
}

/// Options for one forward pass. Dropout is active only when an RNG is given.
pub struct Forward<'a> {
    pub dropout_rng: Option<&'a mut dyn RngCore>,
    pub capture_attention: bool,
}

impl<'a> Forward<'a> {
    pub fn eval() -> Self {
        Self {
            dropout_rng: None,
            capture_attention: false,
        }
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Self {
            dropout_rng: Some(rng),
            capture_attention: false,
        }
    }

    pub fn with_attention(mut self) -> Self {
        self.capture_attention = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Encoded<T> {
    /// Final-layer states `[batch, seq_len, d_model]`.
    pub hidden: Var,
    pub batch: usize,
    pub seq_len: usize,
    /// Per layer, softmax weights `[batch, heads, seq_len, seq_len]`.
    pub attention: Option<Vec<Tensor<T>>>,
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    config: EncoderConfig,
    params: ParamSet<T>,
    ids: EncoderIds,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.d_model;
        let mut table = |params: &mut ParamSet<T>, name: &str, rows: usize| {
            params.insert(name, truncated_normal(&[rows, d], INIT_STD, &mut rng))
        };
        let token = table(&mut params, "embeddings.token", config.vocab_size);
        let position = table(&mut params, "embeddings.position", config.max_positions);
        let segment = table(&mut params, "embeddings.segment", config.n_segments);
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("layers.{l}");
                LayerIds {
                    q: Linear::new(&mut params, &format!("{p}.attn.q"), d, d, &mut rng),
                    k: Linear::new(&mut params, &format!("{p}.attn.k"), d, d, &mut rng),
                    v: Linear::new(&mut params, &format!("{p}.attn.v"), d, d, &mut rng),
                    o: Linear::new(&mut params, &format!("{p}.attn.o"), d, d, &mut rng),
                    ln_attn: LayerNorm::new(&mut params, &format!("{p}.attn.ln"), d),
                    ffn_in: Linear::new(&mut params, &format!("{p}.ffn.in"), d, config.ffn_dim, &mut rng),
                    ffn_out: Linear::new(&mut params, &format!("{p}.ffn.out"), config.ffn_dim, d, &mut rng),
                    ln_ffn: LayerNorm::new(&mut params, &format!("{p}.ffn.ln"), d),
                }
            })
            .collect();
        let mlm = Linear::new(&mut params, "heads.mlm", d, config.vocab_size, &mut rng);
        let actor = Linear::new(&mut params, "heads.actor", d, config.n_actions, &mut rng);
        let critic = Linear::new(&mut params, "heads.critic", d, 1, &mut rng);
        assert_eq!(params.count(), config.param_count(), "parameter count drifted from config");
        Ok(Self {
            config,
            params,
            ids: EncoderIds {
                token,
                position,
                segment,
                layers,
                mlm,
                actor,
                critic,
            },
        })
    }

    /// Rebuilds an encoder around stored parameters, checking names and shapes.
    pub fn from_params(config: EncoderConfig, params: &ParamSet<T>) -> Result<Self> {
        let mut enc = Self::new(config, 0)?;
        enc.params.copy_from(params)?;
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Parameters of the masked-token head.
    pub fn mlm_param_ids(&self) -> [ParamId; 2] {
        [self.ids.mlm.weight, self.ids.mlm.bias]
    }

    pub fn actor_param_ids(&self) -> [ParamId; 2] {
        [self.ids.actor.weight, self.ids.actor.bias]
    }

    pub fn critic_param_ids(&self) -> [ParamId; 2] {
        [self.ids.critic.weight, self.ids.critic.bias]
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// `token_emb[id] + pos_emb[pos] + seg_emb[seg]`, shape `[batch, len, d]`.
    pub fn embed(&self, g: &mut Graph<T>, batch: &[&TokenSequence]) -> Result<Var> {
        let seq_len = check_batch(batch, self.config.max_positions)?;
        let tokens: Vec<usize> = batch.iter().flat_map(|s| s.token_ids.iter().map(|&t| t as usize)).collect();
        let positions: Vec<usize> = batch
            .iter()
            .flat_map(|s| s.position_ids.iter().map(|&p| p as usize))
            .collect();
        let segments: Vec<usize> = batch
            .iter()
            .flat_map(|s| s.segment_ids.iter().map(|&p| p as usize))
            .collect();
        let tt = g.param(&self.params, self.ids.token);
        let pt = g.param(&self.params, self.ids.position);
        let st = g.param(&self.params, self.ids.segment);
        let te = g.embedding(tt, &tokens)?;
        let pe = g.embedding(pt, &positions)?;
        let se = g.embedding(st, &segments)?;
        let sum = g.add(te, pe)?;
        let sum = g.add(sum, se)?;
        g.reshape(sum, &[batch.len(), seq_len, self.config.d_model])
    }

    pub fn encode(&self, g: &mut Graph<T>, batch: &[&TokenSequence], mut fwd: Forward<'_>) -> Result<Encoded<T>> {
        let seq_len = check_batch(batch, self.config.max_positions)?;
        let b = batch.len();
        let cfg = &self.config;
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let pad: Rc<[bool]> = batch
            .iter()
            .flat_map(|s| s.attention_mask.iter().map(|&m| m == 0))
            .collect();
        let inv_sqrt = T::c(1.0 / (dh as f64).sqrt());
        let rate = cfg.dropout;
        let mut x = self.embed(g, batch)?;
        let mut attention = fwd.capture_attention.then(Vec::new);
        for layer in &self.ids.layers {
            let split = |g: &mut Graph<T>, lin: &Linear, x: Var| -> Result<Var> {
                let y = lin.forward(g, &self.params, x)?;
                let y = g.reshape(y, &[b, seq_len, h, dh])?;
                g.transpose(y, 1, 2)
            };
            let q = split(g, &layer.q, x)?;
            let k = split(g, &layer.k, x)?;
            let v = split(g, &layer.v, x)?;
            let scores = g.bmm(q, k, true, inv_sqrt)?;
            let scores = g.masked_fill(scores, pad.clone(), seq_len, T::neg_infinity())?;
            let probs = g.softmax(scores, 3)?;
            if let Some(maps) = attention.as_mut() {
                maps.push(g.value(probs).clone());
            }
            let probs = match fwd.dropout_rng.as_deref_mut() {
                Some(rng) => g.dropout(probs, rate, rng),
                None => probs,
            };
            let ctx = g.bmm(probs, v, false, T::one())?;
            let ctx = g.transpose(ctx, 1, 2)?;
            let ctx = g.reshape(ctx, &[b, seq_len, d])?;
            let attn_out = layer.o.forward(g, &self.params, ctx)?;
            let attn_out = match fwd.dropout_rng.as_deref_mut() {
                Some(rng) => g.dropout(attn_out, rate, rng),
                None => attn_out,
            };
            let res = g.add(x, attn_out)?;
            x = layer.ln_attn.forward(g, &self.params, res, cfg.layer_norm_eps)?;

            let hid = layer.ffn_in.forward(g, &self.params, x)?;
            let hid = g.gelu(hid);
            let out = layer.ffn_out.forward(g, &self.params, hid)?;
            let out = match fwd.dropout_rng.as_deref_mut() {
                Some(rng) => g.dropout(out, rate, rng),
                None => out,
            };
            let res = g.add(x, out)?;
            x = layer.ln_ffn.forward(g, &self.params, res, cfg.layer_norm_eps)?;
        }
        Ok(Encoded {
            hidden: x,
            batch: b,
            seq_len,
            attention,
        })
    }

    /// Masked-token logits at `(sequence, slot)` pairs, shape `[n, vocab]`.
    pub fn mlm_logits(&self, g: &mut Graph<T>, enc: &Encoded<T>, positions: &[(usize, usize)]) -> Result<Var> {
        let rows = positions
            .iter()
            .map(|&(s, p)| {
                if s >= enc.batch || p >= enc.seq_len {
                    Err(Error::invalid(
                        "mlm_logits",
                        format!("position ({s}, {p}) outside batch {}x{}", enc.batch, enc.seq_len),
                    ))
                } else {
                    Ok(s * enc.seq_len + p)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let flat = g.reshape(enc.hidden, &[enc.batch * enc.seq_len, self.config.d_model])?;
        let picked = g.gather_rows(flat, &rows)?;
        self.ids.mlm.forward(g, &self.params, picked)
    }

    /// Final-layer states of the CLS slot, `[batch, d]`.
    pub fn cls_hidden(&self, g: &mut Graph<T>, enc: &Encoded<T>) -> Result<Var> {
        let flat = g.reshape(enc.hidden, &[enc.batch * enc.seq_len, self.config.d_model])?;
        let rows: Vec<usize> = (0..enc.batch).map(|s| s * enc.seq_len).collect();
        g.gather_rows(flat, &rows)
    }

    /// Action logits `[batch, n_actions]` and values `[batch]` from the CLS state.
    pub fn policy_value(&self, g: &mut Graph<T>, enc: &Encoded<T>) -> Result<(Var, Var)> {
        let cls = self.cls_hidden(g, enc)?;
        let logits = self.ids.actor.forward(g, &self.params, cls)?;
        let value = self.ids.critic.forward(g, &self.params, cls)?;
        let value = g.reshape(value, &[enc.batch])?;
        Ok((logits, value))
    }
}

/// Common sequence length of a non-empty batch.
pub(crate) fn check_batch(batch: &[&TokenSequence], max_positions: usize) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| Error::invalid("encode", "empty batch"))?;
    let len = first.len();
    for s in batch {
        let ok = s.len() == len
            && s.position_ids.len() == len
            && s.segment_ids.len() == len
            && s.attention_mask.len() == len;
        if !ok {
            return Err(Error::shape("encode", &[len], &[s.len()]));
        }
    }
    if len > max_positions {
        return Err(Error::invalid(
            "encode",
            format!("sequence length {len} exceeds {max_positions} positions"),
        ));
    }
    Ok(len)
}
