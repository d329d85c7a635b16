use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gridworld::{env_reset, EnvConfig, EnvKind};
use crate::mask::{duplicate, MaskConfig};
use crate::tokenizer::DEFAULT_MAX_LEN;

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 32,
        dropout: 0.0,
        ..EncoderConfig::default()
    }
}

struct Fixture {
    obs: Vec<Observation>,
    clean: Vec<TokenSequence>,
    masked: Vec<MaskedSequence>,
}

fn fixture(n: usize, rate: f64) -> Fixture {
    let vocab = Vocabulary::full();
    let obs: Vec<_> = (0..n)
        .map(|i| env_reset(&EnvConfig::new(EnvKind::ALL[i % 3]), 40 + i as u64).1)
        .collect();
    let clean: Vec<_> = obs.iter().map(|o| tokenize(o, &vocab, DEFAULT_MAX_LEN).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = MaskConfig {
        mask_rate: rate,
        ..MaskConfig::default()
    };
    let masked = clean
        .iter()
        .map(|s| duplicate(s, 1, &cfg, &vocab, &mut rng).unwrap().remove(0))
        .collect();
    Fixture { obs, clean, masked }
}

fn samples<'a>(f: &'a Fixture, old: &[f64], adv: &[f64]) -> Vec<UpdateSample<'a>> {
    (0..f.obs.len())
        .map(|i| UpdateSample {
            observation: &f.obs[i],
            clean: &f.clean[i],
            masked: Some(&f.masked[i]),
            action: i % 7,
            old_log_prob: old[i],
            advantage: adv[i],
            ret: 0.1 * i as f64,
        })
        .collect()
}

fn old_log_probs(agent: &Agent<f64>, f: &Fixture) -> Vec<f64> {
    let vocab = Vocabulary::full();
    let refs: Vec<_> = f.obs.iter().collect();
    let (logits, _) = agent.act(&refs, &vocab, DEFAULT_MAX_LEN).unwrap();
    logits
        .chunks(7)
        .enumerate()
        .map(|(i, row)| log_softmax_row(row)[i % 7])
        .collect()
}

fn grads(agent: &Agent<f64>, s: &[UpdateSample<'_>], denoms: Denominators) -> (crate::tensor::Grads<f64>, f64) {
    let vocab = Vocabulary::full();
    let mut g = Graph::new();
    let parts = agent
        .loss(&mut g, s, &vocab, &PpoConfig::default(), 1.0, denoms, None)
        .unwrap();
    let total = g.value(parts.total).item();
    g.backward(parts.total).unwrap();
    (g.param_grads(agent.params()), total)
}

fn candidates(f: &Fixture) -> usize {
    f.masked.iter().map(|m| m.candidates.len()).sum()
}

#[test]
fn unmasked_update_at_old_parameters_has_unit_ratio() {
    let agent = Agent::<f64>::new(ModelKind::Lambert, &small_encoder(), &CnnGruConfig::default(), 1).unwrap();
    let f = fixture(4, 0.0);
    assert_eq!(candidates(&f), 0);
    let old = old_log_probs(&agent, &f);
    let adv = [0.5, -1.0, 2.0, 0.25];
    let s = samples(&f, &old, &adv);
    let vocab = Vocabulary::full();
    let mut g = Graph::new();
    let d = Denominators {
        samples: 4,
        candidates: 0,
    };
    let parts = agent
        .loss(&mut g, &s, &vocab, &PpoConfig::default(), 1.0, d, None)
        .unwrap();
    let mean_adv = adv.iter().sum::<f64>() / 4.0;
    assert!((g.value(parts.ppo.surrogate).item() + mean_adv).abs() < 1e-6);
    assert!(parts.mask_loss.is_none());
    assert_eq!(parts.ppo.clipped, 0);
}

#[test]
fn no_ml_variant_leaves_mlm_head_without_gradient() {
    let lambert = Agent::<f64>::new(ModelKind::Lambert, &small_encoder(), &CnnGruConfig::default(), 2).unwrap();
    let no_ml = lambert.clone().with_kind(ModelKind::LambertNoMl).unwrap();
    let f = fixture(6, 0.3);
    assert!(candidates(&f) > 0);
    let old = old_log_probs(&lambert, &f);
    let adv = [0.5, -1.0, 2.0, 0.25, 1.0, -0.3];
    let s = samples(&f, &old, &adv);
    let d = Denominators {
        samples: 6,
        candidates: candidates(&f),
    };
    let enc = lambert.encoder().unwrap();
    let (with_ml, _) = grads(&lambert, &s, d);
    let (without, _) = grads(&no_ml, &s, d);
    for id in enc.mlm_param_ids() {
        assert!(with_ml.of(id).iter().any(|&g| g != 0.0));
        assert!(without.of(id).iter().all(|&g| g == 0.0));
    }
}

#[test]
fn no_ml_variant_acts_identically() {
    let lambert = Agent::<f32>::new(ModelKind::Lambert, &small_encoder(), &CnnGruConfig::default(), 3).unwrap();
    let no_ml = lambert.clone().with_kind(ModelKind::LambertNoMl).unwrap();
    let f = fixture(3, 0.0);
    let refs: Vec<_> = f.obs.iter().collect();
    let vocab = Vocabulary::full();
    assert_eq!(
        lambert.act(&refs, &vocab, DEFAULT_MAX_LEN).unwrap(),
        no_ml.act(&refs, &vocab, DEFAULT_MAX_LEN).unwrap()
    );
    assert!(lambert.with_kind(ModelKind::CnnGru).is_err());
}

#[test]
fn micro_batches_sum_to_the_full_minibatch() {
    let agent = Agent::<f64>::new(ModelKind::Lambert, &small_encoder(), &CnnGruConfig::default(), 4).unwrap();
    let f = fixture(6, 0.3);
    let old = old_log_probs(&agent, &f);
    let adv = [0.5, -1.0, 2.0, 0.25, 1.0, -0.3];
    let s = samples(&f, &old, &adv);
    let d = Denominators {
        samples: 6,
        candidates: candidates(&f),
    };
    let (full, loss_full) = grads(&agent, &s, d);
    let (a, la) = grads(&agent, &s[..2], d);
    let (b, lb) = grads(&agent, &s[2..], d);
    assert!((loss_full - la - lb).abs() < 1e-12);
    for i in 0..full.len() {
        for ((x, y), z) in full.get(i).iter().zip(a.get(i)).zip(b.get(i)) {
            assert!((x - y - z).abs() < 1e-12);
        }
    }
}

#[test]
fn cnn_gru_loss_ignores_masks() {
    let agent = Agent::<f64>::new(ModelKind::CnnGru, &small_encoder(), &CnnGruConfig::default(), 5).unwrap();
    let f = fixture(3, 0.3);
    let old = old_log_probs(&agent, &f);
    let s = samples(&f, &old, &[1.0, 0.0, -1.0]);
    let d = Denominators {
        samples: 3,
        candidates: 0,
    };
    let (_, with_masks) = grads(&agent, &s, d);
    let unmasked: Vec<_> = s.iter().map(|x| UpdateSample { masked: None, ..*x }).collect();
    let (_, without) = grads(&agent, &unmasked, d);
    assert_eq!(with_masks, without);
}

#[test]
fn checkpoint_round_trip_preserves_policy_bitwise() {
    let vocab = Vocabulary::full();
    for kind in [ModelKind::Lambert, ModelKind::CnnGru] {
        let agent = Agent::<f32>::new(kind, &small_encoder(), &CnnGruConfig::default(), 6).unwrap();
        let ck = agent.to_checkpoint(&vocab, serde_json::json!({"note": 1}));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        let (restored, v2) = Agent::<f32>::from_checkpoint(&back).unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(restored.kind(), kind);
        let f = fixture(2, 0.0);
        let refs: Vec<_> = f.obs.iter().collect();
        assert_eq!(
            agent.act(&refs, &vocab, DEFAULT_MAX_LEN).unwrap(),
            restored.act(&refs, &vocab, DEFAULT_MAX_LEN).unwrap()
        );
    }
}

#[test]
fn checkpoint_missing_tensor_is_reported() {
    let vocab = Vocabulary::full();
    let agent = Agent::<f32>::new(ModelKind::Lambert, &small_encoder(), &CnnGruConfig::default(), 7).unwrap();
    let mut ck = agent.to_checkpoint(&vocab, serde_json::Value::Null);
    ck.tensors.retain(|(n, _)| n != "heads.actor.bias");
    match Agent::<f32>::from_checkpoint(&ck) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("heads.actor.bias")),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn softmax_helpers_agree() {
    let row = [0.3, -2.0, 1.5];
    let p = softmax_row(&row);
    let lp = log_softmax_row(&row);
    for (a, b) in p.iter().zip(&lp) {
        assert!((a.ln() - b).abs() < 1e-12);
    }
}
