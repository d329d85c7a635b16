use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
actors = 2
horizon = 6
total_env_steps = 24
micro_batch = 3
eval_every = 2
eval_episodes = 4
checkpoint_every = 1
seeds = [0]
strict_determinism = true

[[envs]]
env_kind = "GoToObject"
grid_size = 5

[encoder]
d_model = 8
n_heads = 2
n_layers = 2
ffn_dim = 16

[ppo]
epochs = 2
minibatch_size = 8
"#;

fn lambert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lambert"))
        .args(args)
        .env_remove("LAMBERT_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lambert")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, format!("{extra}\n{TINY}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_fails_with_message() {
    let o = lambert(&["train", "--config", "/nonexistent/missing.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learning_rate_typo = 3");
    let o = lambert(&["train", "--config", &cfg, "--out-dir", s(&dir.path().join("run"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate_typo"), "{}", stderr(&o));
}

#[test]
fn dry_run_prints_config_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    let o = lambert(&["--dry-run", "train", "--config", &cfg, "--out-dir", s(&run), "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seeds"], serde_json::json!([7]));
    assert_eq!(v["out_dir"], serde_json::json!(s(&run)));
    assert!(!run.exists());
}

#[test]
fn out_dir_falls_back_to_env_var() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = Command::new(env!("CARGO_BIN_EXE_lambert"))
        .args(["--dry-run", "train", "--config", &cfg])
        .env("LAMBERT_OUT", "/somewhere/else")
        .output()
        .unwrap();
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["out_dir"], "/somewhere/else");
}

#[test]
fn odd_actor_count_in_multitask_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let body = TINY
        .replace("actors = 2", "actors = 3\nregime = \"multitask\"")
        .replace(
            "[[envs]]",
            "[[envs]]\nenv_kind = \"GoToDoor\"\ngrid_size = 5\n\n[[envs]]",
        );
    let cfg = dir.path().join("mt.toml");
    fs::write(&cfg, body).unwrap();
    let o = lambert(&["train", "--config", s(&cfg), "--out-dir", s(&dir.path().join("run"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("odd"), "{}", stderr(&o));
}

#[test]
fn train_eval_attn_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("runs").join("tiny");
    let o = lambert(&["train", "--config", &cfg, "--out-dir", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["manifest.json", "config.json", "seed_0/train.csv", "seed_0/final.ckpt", "seed_0/eval.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // a second fresh run into the same directory needs --resume
    let o = lambert(&["train", "--config", &cfg, "--out-dir", s(&run)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--resume"));

    // resuming with a changed config is refused
    let changed = dir.path().join("changed.toml");
    fs::write(&changed, TINY.replace("eval_episodes = 4", "eval_episodes = 5")).unwrap();
    let ck = run.join("seed_0/ckpt/update_000001.ckpt");
    let o = lambert(&["train", "--config", s(&changed), "--out-dir", s(&run), "--resume", s(&ck)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));

    let ckpt = run.join("seed_0/final.ckpt");
    let eval_out = dir.path().join("eval");
    let o = lambert(&[
        "eval", "--ckpt", s(&ckpt), "--env", "GoToObject", "--episodes", "6", "--grid-size", "5", "--out-dir",
        s(&eval_out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(eval_out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(metrics["report"]["overall"]["n"], 6);
    let missions = fs::read_to_string(eval_out.join("missions.csv")).unwrap();
    assert_eq!(missions.lines().next().unwrap(), "template,mean_reward,half_sigma,n_episodes");

    let attn_out = dir.path().join("attn");
    let o = lambert(&[
        "attn", "--ckpt", s(&ckpt), "--env", "GoToObject", "--steps", "3", "--grid-size", "5", "--layers", "0,1",
        "--out-dir", s(&attn_out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = fs::read_to_string(attn_out.join("attention.jsonl")).unwrap();
    let recs: Vec<serde_json::Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!recs.is_empty());
    assert!(recs.iter().all(|r| r["schema_version"] == 1));

    // layer past the encoder depth
    let o = lambert(&[
        "attn", "--ckpt", s(&ckpt), "--env", "GoToObject", "--steps", "1", "--grid-size", "5", "--layers", "9",
        "--out-dir", s(&attn_out),
    ]);
    assert!(!o.status.success());

    let curves = dir.path().join("curves.csv");
    let o = lambert(&["export-curves", "--runs", s(&dir.path().join("runs")), "--out", s(&curves)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&curves).unwrap();
    assert_eq!(text.lines().next().unwrap(), "env_steps,model,regime,seed_mean,half_sigma");
    assert!(text.lines().count() > 1);
}

#[test]
fn eval_missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = lambert(&[
        "eval", "--ckpt", "/nonexistent.ckpt", "--env", "Fetch", "--episodes", "1", "--out-dir", s(dir.path()),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does not exist"));
}

#[test]
fn grad_check_single_round_passes() {
    let o = lambert(&["grad-check", "--rounds", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}
