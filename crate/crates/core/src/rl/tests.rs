use proptest::prelude::*;

use super::*;

fn closed_form_gae(rewards: &[f64], values: &[f64], dones: &[bool], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    // A_t = sum_k (gamma * lambda)^k delta_{t+k}, truncated at the first terminal
    let n = rewards.len();
    let next = |t: usize| if t + 1 < n { values[t + 1] } else { boot };
    let delta: Vec<f64> = (0..n)
        .map(|t| rewards[t] + if dones[t] { 0.0 } else { gamma * next(t) } - values[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut w = 1.0;
            for k in t..n {
                total += w * delta[k];
                if dones[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            total
        })
        .collect()
}

#[test]
fn zero_discount_gives_one_step_error() {
    let r = [0.5, 0.0, 1.0];
    let v = [0.2, 0.4, -0.1];
    let (a, ret) = gae(&r, &v, &[false, false, false], Some(3.0), 0.0, 0.7).unwrap();
    for t in 0..3 {
        assert!((a[t] - (r[t] - v[t])).abs() < 1e-15);
        assert!((ret[t] - r[t]).abs() < 1e-15);
    }
}

#[test]
fn single_step_episode() {
    let (a, ret) = gae(&[1.0], &[0.0], &[true], None, 0.99, 0.95).unwrap();
    assert_eq!((a[0], ret[0]), (1.0, 1.0));
}

#[test]
fn three_step_trace_matches_closed_form() {
    let r = [0.0, 0.0, 0.82];
    let v = [0.3, 0.5, 0.6];
    let d = [false, false, false];
    let (a, ret) = gae(&r, &v, &d, Some(0.4), 0.99, 0.95).unwrap();
    let oracle = closed_form_gae(&r, &v, &d, 0.4, 0.99, 0.95);
    for t in 0..3 {
        assert!((a[t] - oracle[t]).abs() < 1e-12);
        assert!((ret[t] - (oracle[t] + v[t])).abs() < 1e-12);
    }
    // delta_2 = 0.82 + 0.99 * 0.4 - 0.6
    assert!((a[2] - 0.616).abs() < 1e-12);
}

#[test]
fn missing_bootstrap_is_an_error() {
    assert!(gae(&[0.0, 0.0], &[0.1, 0.1], &[false, false], None, 0.99, 0.95).is_err());
    assert!(gae(&[0.0, 0.0], &[0.1, 0.1], &[false, true], None, 0.99, 0.95).is_ok());
}

#[test]
fn standardized_advantages_have_unit_moments() {
    let mut xs = vec![1.0, 4.0, -2.0, 0.5, 3.0];
    standardize(&mut xs);
    let mean = xs.iter().sum::<f64>() / 5.0;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-6);
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v - z).collect()
}

#[test]
fn identical_policies_give_unit_ratio() {
    let rows = vec![0.1, -0.3, 0.7, 0.0, 0.2, -1.0, 0.4, 1.1, 0.0, -0.2, 0.3, 0.5, -0.8, 0.9];
    let actions = [2usize, 6];
    let old: Vec<f64> = rows
        .chunks(7)
        .zip(actions)
        .map(|(r, a)| log_softmax_row(r)[a])
        .collect();
    let adv = [0.8, -1.3];
    let mut g = Graph::<f64>::new();
    let logits = g.variable(Tensor::from_vec(&[2, 7], rows).unwrap());
    let value = g.variable(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
    let t = PpoTargets {
        actions: &actions,
        old_log_probs: &old,
        advantages: &adv,
        returns: &[0.0, 0.0],
    };
    let terms = ppo_loss(&mut g, logits, logits, value, t, &PpoConfig::default(), 2).unwrap();
    assert!((g.value(terms.surrogate).item() + (0.8 - 1.3) / 2.0).abs() < 1e-12);
    assert_eq!(terms.clipped, 0);
}

#[test]
fn saturated_clip_blocks_the_surrogate_gradient() {
    let cfg = PpoConfig::default();
    let row = [0.3, -0.1, 0.2, 0.0, 0.5, -0.6, 0.1];
    let old = log_softmax_row(&row)[4] - (1.0 + 2.0 * cfg.clip_eps).ln();
    let mut g = Graph::<f64>::new();
    let logits = g.variable(Tensor::from_vec(&[1, 7], row.to_vec()).unwrap());
    let value = g.constant(Tensor::from_vec(&[1], vec![0.0]).unwrap());
    let t = PpoTargets {
        actions: &[4],
        old_log_probs: &[old],
        advantages: &[1.5],
        returns: &[0.0],
    };
    let terms = ppo_loss(&mut g, logits, logits, value, t, &cfg, 1).unwrap();
    assert_eq!(terms.clipped, 1);
    assert!((g.value(terms.surrogate).item() + 1.2 * 1.5).abs() < 1e-12);
    g.backward(terms.surrogate).unwrap();
    assert!(g.grad(logits).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn two_sample_loss_matches_scalar_oracle() {
    let cfg = PpoConfig::default();
    let rows = [[0.2, 0.1, -0.5, 0.3, 0.0, 0.7, -0.2], [1.0, -1.0, 0.5, 0.2, 0.1, 0.0, -0.3]];
    let actions = [5usize, 0];
    let old = [-1.9, -1.1];
    let adv = [0.6, -0.4];
    let ret = [0.5, 0.2];
    let vals = [0.45f64, -0.1];
    let mut expect_surr = 0.0;
    let mut expect_ent = 0.0;
    for i in 0..2 {
        let lp = log_softmax_row(&rows[i]);
        let r = (lp[actions[i]] - old[i]).exp();
        let c = r.clamp(0.8, 1.2);
        expect_surr -= (r * adv[i]).min(c * adv[i]) / 2.0;
        expect_ent -= lp.iter().map(|l| l.exp() * l).sum::<f64>() / 2.0;
    }
    let expect_vf = ((vals[0] - ret[0]).powi(2) + (vals[1] - ret[1]).powi(2)) / 2.0;
    let expect = expect_surr + 0.5 * expect_vf - 0.01 * expect_ent;

    let mut g = Graph::<f64>::new();
    let logits = g.variable(Tensor::from_vec(&[2, 7], rows.concat()).unwrap());
    let value = g.variable(Tensor::from_vec(&[2], vals.to_vec()).unwrap());
    let t = PpoTargets {
        actions: &actions,
        old_log_probs: &old,
        advantages: &adv,
        returns: &ret,
    };
    let terms = ppo_loss(&mut g, logits, logits, value, t, &cfg, 2).unwrap();
    assert!((g.value(terms.total).item() - expect).abs() < 1e-12);
    assert!((g.value(terms.surrogate).item() - expect_surr).abs() < 1e-12);
    assert!((g.value(terms.value_loss).item() - expect_vf).abs() < 1e-12);
    assert!((g.value(terms.entropy).item() - expect_ent).abs() < 1e-12);
}

#[test]
fn non_finite_ratio_aborts_with_diagnostics() {
    let mut g = Graph::<f64>::new();
    let logits = g.variable(Tensor::zeros(&[1, 7]));
    let value = g.variable(Tensor::zeros(&[1]));
    let t = PpoTargets {
        actions: &[0],
        old_log_probs: &[-1000.0],
        advantages: &[1.0],
        returns: &[0.0],
    };
    match ppo_loss(&mut g, logits, logits, value, t, &PpoConfig::default(), 1) {
        Err(Error::NonFinite { op, context }) => {
            assert_eq!(op, "ppo_ratio");
            assert!(context.contains("sample 0"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn total_loss_sums_and_excludes() {
    let mut g = Graph::<f64>::new();
    let ml = g.variable(Tensor::scalar(0.7));
    let ppo = g.variable(Tensor::scalar(1.3));
    let l = total_loss(&mut g, Some(ml), ppo, 1.0).unwrap();
    assert!((g.value(l).item() - 2.0).abs() < 1e-15);
    let only = total_loss(&mut g, None, ppo, 1.0).unwrap();
    assert_eq!(only, ppo);
    let bad = g.variable(Tensor::scalar(f64::NAN));
    assert!(total_loss(&mut g, Some(bad), ppo, 1.0).is_err());
}

#[test]
fn total_gradient_is_sum_of_parts() {
    let x0 = Tensor::from_vec(&[3], vec![0.3, -0.2, 0.9]).unwrap();
    let grad_of = |which: u8| {
        let mut g = Graph::<f64>::new();
        let x = g.variable(x0.clone());
        let sq = g.square(x);
        let a = g.sum(sq);
        let e = g.exp(x);
        let b = g.sum(e);
        let l = match which {
            0 => a,
            1 => b,
            _ => total_loss(&mut g, Some(a), b, 1.0).unwrap(),
        };
        g.backward(l).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    let (ga, gb, gl) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..3 {
        assert!((gl[i] - ga[i] - gb[i]).abs() < 1e-14);
    }
}

proptest! {
    #[test]
    fn segmentation_at_done_is_invisible(
        steps in proptest::collection::vec((0.0f64..1.0, -1.0f64..1.0, any::<bool>()), 2..40),
        cut in 1usize..39,
        boot in -1.0f64..1.0,
    ) {
        let mut steps = steps;
        let cut = cut.min(steps.len() - 1);
        steps[cut - 1].2 = true;
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (whole, _) = gae(&r, &v, &d, Some(boot), 0.99, 0.95).unwrap();
        let (head, _) = gae(&r[..cut], &v[..cut], &d[..cut], None, 0.99, 0.95).unwrap();
        let (tail, _) = gae(&r[cut..], &v[cut..], &d[cut..], Some(boot), 0.99, 0.95).unwrap();
        let joined: Vec<f64> = head.into_iter().chain(tail).collect();
        for (a, b) in whole.iter().zip(&joined) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let oracle = closed_form_gae(&r, &v, &d, boot, 0.99, 0.95);
        for (a, b) in whole.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_lies_between_zero_and_log_actions(row in proptest::collection::vec(-30.0f64..30.0, 7)) {
        let mut g = Graph::<f64>::new();
        let logits = g.variable(Tensor::from_vec(&[1, 7], row).unwrap());
        let value = g.variable(Tensor::zeros(&[1]));
        let t = PpoTargets { actions: &[0], old_log_probs: &[0.0], advantages: &[0.0], returns: &[0.0] };
        let cfg = PpoConfig { clip_eps: 0.2, ..PpoConfig::default() };
        if let Ok(terms) = ppo_loss(&mut g, logits, logits, value, t, &cfg, 1) {
            let s = g.value(terms.entropy).item();
            prop_assert!(s >= -1e-12 && s <= 7f64.ln() + 1e-12);
        }
    }
}
