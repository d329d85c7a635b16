use super::*;
use crate::baselines::ModelKind;
use crate::encoder::EncoderConfig;
use crate::gridworld::mission_grammar;
use crate::rl::PpoConfig;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        envs: vec![EnvConfig::new(EnvKind::GoToObject).with_grid_size(5)],
        encoder: EncoderConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ffn_dim: 16,
            ..EncoderConfig::default()
        },
        ppo: PpoConfig {
            epochs: 2,
            minibatch_size: 8,
            ..PpoConfig::default()
        },
        actors: 2,
        horizon: 6,
        total_env_steps: 24,
        micro_batch: 3,
        eval_every: 2,
        eval_episodes: 4,
        checkpoint_every: 1,
        seeds: vec![0],
        strict_determinism: true,
        ..ExperimentConfig::default()
    }
}

fn multitask() -> ExperimentConfig {
    ExperimentConfig {
        regime: Regime::Multitask,
        envs: vec![
            EnvConfig::new(EnvKind::Fetch).with_grid_size(5),
            EnvConfig::new(EnvKind::GoToDoor).with_grid_size(5),
        ],
        actors: 4,
        horizon: 30,
        ..tiny()
    }
}

#[test]
fn iteration_accounts_steps_and_dataset() {
    let cfg = tiny();
    let mut t = Trainer::<f32>::new(cfg.clone(), 0).unwrap();
    for u in 1..=3u64 {
        let r = t.run_iteration().unwrap();
        assert_eq!(t.env_steps(), u * 12);
        assert_eq!(r.log.env_steps, u * 12);
        assert_eq!(r.log.update_idx, u);
        assert_eq!(r.dataset_size, 12 * cfg.mask.duplicates);
        // 24 entries in minibatches of 8, twice
        assert_eq!(r.minibatches, 6);
        assert!(r.log.l_ml.is_some());
        assert!((0.0..=1.0).contains(&r.log.clip_fraction));
    }
}

#[test]
fn cnn_gru_uses_the_same_budget_without_mask_loss() {
    let cfg = ExperimentConfig {
        model: ModelKind::CnnGru,
        ..tiny()
    };
    let mut t = Trainer::<f32>::new(cfg, 0).unwrap();
    let r = t.run_iteration().unwrap();
    assert_eq!(r.dataset_size, 24);
    assert_eq!(r.log.l_ml, None);
}

#[test]
fn multitask_splits_samples_evenly_and_sees_both_grammars() {
    let mut t = Trainer::<f32>::new(multitask(), 3).unwrap();
    let r = t.run_iteration().unwrap();
    assert_eq!(r.samples_per_env, vec![60, 60]);
    let (buffer, _) = t.collect_rollout(2).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for tr in buffer.transitions() {
        seen.insert(tr.obs.mission_text[..2].join(" "));
    }
    let door = seen.iter().any(|m| m == "go to");
    let fetch = seen.iter().any(|m| m != "go to");
    assert!(door && fetch, "{seen:?}");
    for e in &r.episodes {
        let env_index = t.actors()[e.actor].env_index;
        assert_eq!(e.env, t.config().envs[env_index].env_kind);
        assert!(mission_grammar(e.env).contains(&e.template));
    }
}

#[test]
fn identical_seeds_give_identical_updates() {
    let mut a = Trainer::<f32>::new(tiny(), 5).unwrap();
    let mut b = Trainer::<f32>::new(tiny(), 5).unwrap();
    assert_eq!(a.run_iteration().unwrap(), b.run_iteration().unwrap());
    assert_eq!(a.checkpoint().to_bytes().unwrap(), b.checkpoint().to_bytes().unwrap());
    let mut c = Trainer::<f32>::new(tiny(), 6).unwrap();
    assert_ne!(a.run_iteration().unwrap().log, c.run_iteration().unwrap().log);
}

#[test]
fn worker_count_does_not_change_results() {
    let serial = tiny();
    let parallel = ExperimentConfig {
        workers: 2,
        strict_determinism: false,
        ..tiny()
    };
    let mut a = Trainer::<f32>::new(serial, 1).unwrap();
    let mut b = Trainer::<f32>::new(parallel, 1).unwrap();
    for _ in 0..2 {
        assert_eq!(a.run_iteration().unwrap(), b.run_iteration().unwrap());
    }
    assert_eq!(a.checkpoint().tensors, b.checkpoint().tensors);
}

#[test]
fn resume_continues_bitwise() {
    let mut straight = Trainer::<f32>::new(tiny(), 2).unwrap();
    straight.run_iteration().unwrap();
    let bytes = straight.checkpoint().to_bytes().unwrap();
    let second = straight.run_iteration().unwrap();

    let ck = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::<f32>::resume(tiny(), &ck).unwrap();
    assert_eq!(resumed.update(), 1);
    assert_eq!(resumed.run_iteration().unwrap(), second);
    assert_eq!(
        resumed.checkpoint().to_bytes().unwrap(),
        straight.checkpoint().to_bytes().unwrap()
    );
}

#[test]
fn resume_rejects_a_changed_config() {
    let t = Trainer::<f32>::new(tiny(), 2).unwrap();
    let ck = t.checkpoint();
    let mut other = tiny();
    other.ppo.clip_eps = 0.1;
    assert!(matches!(Trainer::<f32>::resume(other, &ck), Err(Error::Config(m)) if m.contains("hash")));
}

#[test]
fn non_finite_parameters_abort_with_update_index() {
    let mut t = Trainer::<f32>::new(tiny(), 0).unwrap();
    t.run_iteration().unwrap();
    let id = t.agent.params().id("heads.actor.bias").unwrap();
    t.agent.params_mut().get_mut(id).data_mut()[0] = f32::NAN;
    match t.run_iteration() {
        Err(Error::AtUpdate { update, source }) => {
            assert_eq!(update, 2);
            assert!(matches!(*source, Error::NonFinite { .. }), "{source}");
        }
        other => panic!("{:?}", other.map(|r| r.log)),
    }
}

fn save_source(dir: &std::path::Path, vocab: &Vocabulary) -> std::path::PathBuf {
    let t = Trainer::<f32>::new(tiny(), 9).unwrap();
    let path = dir.join("source.ckpt");
    t.agent().to_checkpoint(vocab, serde_json::Value::Null).save(&path).unwrap();
    path
}

#[test]
fn transfer_loads_source_weights_and_resets_the_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    let path = save_source(dir.path(), &Vocabulary::full());
    let cfg = ExperimentConfig {
        regime: Regime::Transfer,
        model: ModelKind::LambertNoMl,
        checkpoint_in: Some(path.clone()),
        ..tiny()
    };
    let t = Trainer::<f32>::new(cfg, 4).unwrap();
    let (src, _) = Agent::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(t.agent().kind(), ModelKind::LambertNoMl);
    assert_eq!(t.agent().params(), src.params());
    assert_eq!(t.adam.state.step, 0);
    let obs: Vec<_> = t.actors().iter().map(|a| &a.obs).collect();
    assert_eq!(
        t.agent().act(&obs, t.vocab(), 112).unwrap(),
        src.act(&obs, t.vocab(), 112).unwrap()
    );
}

#[test]
fn transfer_reports_incompatibilities() {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig {
        regime: Regime::Transfer,
        checkpoint_in: Some(dir.path().join("absent.ckpt")),
        ..tiny()
    };
    assert!(matches!(Trainer::<f32>::new(base.clone(), 0), Err(Error::Config(m)) if m.contains("does not exist")));

    let door_only = save_source(dir.path(), &Vocabulary::for_envs(&[EnvKind::GoToDoor]));
    let cfg = ExperimentConfig {
        checkpoint_in: Some(door_only.clone()),
        ..base.clone()
    };
    match Trainer::<f32>::new(cfg, 0) {
        Err(Error::Incompatible(m)) => assert!(m.contains("ball") && m.contains("key"), "{m}"),
        other => panic!("{:?}", other.err()),
    }

    let full = save_source(dir.path(), &Vocabulary::full());
    let mut cfg = ExperimentConfig {
        checkpoint_in: Some(full),
        ..base
    };
    cfg.encoder.ffn_dim = 32;
    assert!(matches!(Trainer::<f32>::new(cfg, 0), Err(Error::Incompatible(_))));
}

#[test]
fn stats_use_half_the_sample_deviation() {
    let s = Stats::of(&[1.0, 2.0, 3.0, 4.0]);
    let var: f64 = [2.25, 0.25, 0.25, 2.25].iter().sum::<f64>() / 3.0;
    assert!((s.mean - 2.5).abs() < 1e-15);
    assert!((s.half_sigma - 0.5 * var.sqrt()).abs() < 1e-15);
    assert_eq!(Stats::of(&[0.7]).half_sigma, 0.0);
    assert_eq!(Stats::of(&[]).n, 0);
}

#[test]
fn evaluation_is_repeatable_and_groups_by_template() {
    let t = Trainer::<f32>::new(multitask(), 0).unwrap();
    let envs = &t.config().envs;
    let run = |policy| evaluate(t.agent(), t.vocab(), envs, 40, 11, policy, 112).unwrap();
    let a = run(EvalPolicy::Sample);
    assert_eq!(a, run(EvalPolicy::Sample));
    assert_eq!(a.episodes.len(), 40);
    assert_eq!(a.per_env.values().map(|s| s.n).sum::<usize>(), 40);
    assert_eq!(a.per_template.values().map(|s| s.n).sum::<usize>(), 40);
    for (tpl, s) in &a.per_template {
        assert!(mission_grammar(EnvKind::Fetch).contains(tpl) || mission_grammar(EnvKind::GoToDoor).contains(tpl));
        assert!((0.0..=1.0).contains(&s.mean));
    }
    assert_eq!(run(EvalPolicy::Greedy), run(EvalPolicy::Greedy));
}

#[test]
fn untrained_agent_is_near_the_random_policy() {
    let cfg = ExperimentConfig {
        envs: vec![EnvConfig::new(EnvKind::GoToObject).with_grid_size(6)],
        ..tiny()
    };
    let t = Trainer::<f32>::new(cfg, 0).unwrap();
    let envs = &t.config().envs;
    let agent = evaluate(t.agent(), t.vocab(), envs, 300, 1, EvalPolicy::Sample, 112).unwrap();
    let random = random_policy(envs, 300, 2).unwrap();
    // both are means of 300 bounded rewards; their standard errors are below 0.03
    let se = (agent.overall.half_sigma.powi(2) + random.overall.half_sigma.powi(2)).sqrt() * 2.0 / 300f64.sqrt();
    assert!(
        (agent.overall.mean - random.overall.mean).abs() < 4.0 * se + 0.05,
        "{} vs {}",
        agent.overall.mean,
        random.overall.mean
    );
}

#[test]
fn run_directory_layout_and_resume_rules() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        out_dir: dir.path().join("run"),
        seeds: vec![0, 1],
        ..tiny()
    };
    let summary = train(&cfg, None).unwrap();
    assert_eq!(summary.seeds.len(), 2);
    assert!(summary.seeds.iter().all(|s| s.updates == 2 && s.env_steps == 24));
    let m = read_manifest(&cfg.out_dir).unwrap();
    assert_eq!(m.config_hash, cfg.hash());
    assert!(m.finished_unix.is_some());
    for f in ["config.json", "vocab.json", "seed_0/train.csv", "seed_0/eval.json", "seed_1/final.ckpt", "seed_0/ckpt/update_000001.ckpt"] {
        assert!(m.artifacts.iter().any(|a| a == f), "{f} missing from {:?}", m.artifacts);
    }
    let train_csv = std::fs::read_to_string(cfg.out_dir.join("seed_0/train.csv")).unwrap();
    assert_eq!(
        train_csv.lines().next().unwrap(),
        "update_idx,env_steps,mean_episode_reward,L_ml,L_ppo_surrogate,L_vf,entropy,grad_norm,clip_fraction"
    );
    assert_eq!(train_csv.lines().count(), 3);
    let resolved: ExperimentConfig =
        serde_json::from_slice(&std::fs::read(cfg.out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved, cfg);

    assert!(matches!(train(&cfg, None), Err(Error::Config(m)) if m.contains("--resume")));

    let ck = cfg.out_dir.join("seed_0/ckpt/update_000001.ckpt");
    let mut changed = cfg.clone();
    changed.ml_weight = 0.5;
    assert!(matches!(train(&changed, Some(&ck)), Err(Error::Config(m)) if m.contains("hash")));

    // resuming seed 0 from update 1 rewrites update 2 identically
    let before = std::fs::read(cfg.out_dir.join("seed_0/final.ckpt")).unwrap();
    let again = train(&cfg, Some(&ck)).unwrap();
    assert_eq!(again.seeds[0].updates, 2);
    assert_eq!(std::fs::read(cfg.out_dir.join("seed_0/final.ckpt")).unwrap(), before);
    assert_eq!(std::fs::read_to_string(cfg.out_dir.join("seed_0/train.csv")).unwrap(), train_csv);
}

#[test]
fn truncation_keeps_rows_up_to_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    std::fs::write(&p, "update_idx,x\n1,a\n2,b\n3,c\n").unwrap();
    truncate_csv(&p, 2).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "update_idx,x\n1,a\n2,b\n");
    truncate_csv(&p, 0).unwrap();
    assert!(!p.exists());
}
