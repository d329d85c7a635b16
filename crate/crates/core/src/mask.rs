//! Masked-token corruption of fused sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{Modality, TokenSequence, Vocabulary, MASK};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub mask_rate: f64,
    pub duplicates: usize,
    /// Split the expected candidate budget evenly between vision and language.
    pub modality_balanced: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.05,
            duplicates: 2,
            modality_balanced: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask_rate {} outside [0, 1)", self.mask_rate)));
        }
        if self.duplicates == 0 {
            return Err(Error::Config("duplicates must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-slot selection probabilities `(p_vision, p_language)`, clamped to 1.
pub fn selection_probs(rate: f64, n: usize, m: usize, balanced: bool) -> (f64, f64) {
    if !balanced || n == 0 || m == 0 {
        return (rate, rate);
    }
    let total = (n + m) as f64;
    let pv = rate * total / (2.0 * n as f64);
    let pl = rate * total / (2.0 * m as f64);
    if pv > 1.0 || pl > 1.0 {
        log::warn!("mask selection probability clamped to 1 (rate {rate}, N {n}, M {m})");
    }
    (pv.min(1.0), pl.min(1.0))
}

pub fn sample_candidates<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    balanced: bool,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("sample_candidates", format!("rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(Vec::new());
    }
    let (pv, pl) = selection_probs(rate, seq.n_vision, seq.n_language, balanced);
    let mut out = Vec::new();
    out.extend(seq.vision_slots().filter(|_| rng.gen::<f64>() < pv));
    out.extend(seq.language_slots().filter(|_| rng.gen::<f64>() < pl));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

impl Corruption {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let u: f64 = rng.gen();
        if u < 0.8 {
            Corruption::Mask
        } else if u < 0.9 {
            Corruption::Random
        } else {
            Corruption::Keep
        }
    }
}

/// Modality block a candidate slot draws random replacements from.
pub fn slot_modality(seq: &TokenSequence, slot: usize) -> Option<Modality> {
    let half = seq.n_vision / 2;
    if seq.vision_slots().contains(&slot) {
        Some(if slot <= half {
            Modality::VisionType
        } else {
            Modality::VisionColor
        })
    } else if seq.language_slots().contains(&slot) {
        Some(Modality::Language)
    } else {
        None
    }
}

/// Applies one corruption branch to `slot` in place.
pub fn apply_corruption<R: Rng + ?Sized>(
    seq: &mut TokenSequence,
    slot: usize,
    branch: Corruption,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<()> {
    let modality = slot_modality(seq, slot)
        .ok_or_else(|| Error::invalid("corrupt", format!("slot {slot} is not a candidate")))?;
    match branch {
        Corruption::Mask => seq.token_ids[slot] = MASK,
        Corruption::Random => seq.token_ids[slot] = rng.gen_range(vocab.block(modality)),
        Corruption::Keep => {}
    }
    Ok(())
}

/// Corrupts `candidates` with the 80/10/10 rule; returns the ground-truth IDs.
pub fn corrupt<R: Rng + ?Sized>(
    seq: &TokenSequence,
    candidates: &[usize],
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<(TokenSequence, Vec<u32>)> {
    let mut out = seq.clone();
    let mut originals = Vec::with_capacity(candidates.len());
    for &slot in candidates {
        originals.push(seq.token_ids[slot]);
        let branch = Corruption::draw(rng);
        apply_corruption(&mut out, slot, branch, vocab, rng)?;
    }
    Ok((out, originals))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub sequence: TokenSequence,
    pub candidates: Vec<usize>,
    pub original_ids: Vec<u32>,
}

/// `d` independently corrupted copies of `seq`.
pub fn duplicate<R: Rng + ?Sized>(
    seq: &TokenSequence,
    d: usize,
    config: &MaskConfig,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<MaskedSequence>> {
    if d == 0 {
        return Err(Error::invalid("duplicate", "at least one copy required"));
    }
    (0..d)
        .map(|_| {
            let candidates = sample_candidates(seq, config.mask_rate, config.modality_balanced, rng)?;
            let (sequence, original_ids) = corrupt(seq, &candidates, vocab, rng)?;
            Ok(MaskedSequence {
                sequence,
                candidates,
                original_ids,
            })
        })
        .collect()
}

/// Mean cross-entropy over all candidates; an empty candidate set costs 0.
pub fn mask_loss<T: Scalar>(g: &mut Graph<T>, logits: Option<Var>, original_ids: &[u32]) -> Result<Var> {
    match logits {
        None if original_ids.is_empty() => Ok(g.constant(Tensor::scalar(T::zero()))),
        None => Err(Error::invalid("mask_loss", "targets without logits")),
        Some(l) => {
            if g.shape(l).first() != Some(&original_ids.len()) {
                return Err(Error::shape("mask_loss", g.shape(l), &[original_ids.len()]));
            }
            if original_ids.is_empty() {
                return Ok(g.constant(Tensor::scalar(T::zero())));
            }
            let targets: Vec<usize> = original_ids.iter().map(|&t| t as usize).collect();
            let ce = g.cross_entropy(l, &targets)?;
            Ok(g.mean(ce))
        }
    }
}
