use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{CnnGruConfig, ModelKind};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::gridworld::{EnvConfig, EnvKind, MissionTemplate};
use crate::mask::MaskConfig;
use crate::rl::PpoConfig;
use crate::tensor::AdamConfig;
use crate::tokenizer::{Vocabulary, N_VISION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Scratch,
    Multitask,
    Transfer,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Scratch => "scratch",
            Regime::Multitask => "multitask",
            Regime::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPolicy {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub regime: Regime,
    pub model: ModelKind,
    /// One environment, or two for the multitask regime.
    pub envs: Vec<EnvConfig>,
    pub encoder: EncoderConfig,
    pub cnn_gru: CnnGruConfig,
    pub ppo: PpoConfig,
    pub mask: MaskConfig,
    /// Weight of the masked-token loss in the total loss.
    pub ml_weight: f64,
    /// Parallel actors N.
    pub actors: usize,
    /// Steps per actor per update T.
    pub horizon: usize,
    pub total_env_steps: u64,
    /// Samples per forward/backward pass; minibatches are split into these.
    pub micro_batch: usize,
    /// Evaluate every this many updates (0: only at the end).
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_policy: EvalPolicy,
    /// Checkpoint every this many updates (0: only at the end).
    pub checkpoint_every: u64,
    pub seeds: Vec<u64>,
    /// Source checkpoint of the transfer regime.
    pub checkpoint_in: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub strict_determinism: bool,
    pub precision: Precision,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Scratch,
            model: ModelKind::Lambert,
            envs: vec![EnvConfig::new(EnvKind::GoToObject).with_grid_size(6)],
            encoder: EncoderConfig::default(),
            cnn_gru: CnnGruConfig::default(),
            ppo: PpoConfig::default(),
            mask: MaskConfig::default(),
            ml_weight: 1.0,
            actors: 16,
            horizon: 504,
            total_env_steps: 1_000_000,
            micro_batch: 32,
            eval_every: 10,
            eval_episodes: 100,
            eval_policy: EvalPolicy::Greedy,
            checkpoint_every: 10,
            seeds: vec![0, 1, 2],
            checkpoint_in: None,
            out_dir: PathBuf::from("runs/default"),
            workers: 1,
            strict_determinism: false,
            precision: Precision::F32,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML or JSON by file extension; unknown fields are rejected.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let cfg: Self = match ext {
            "toml" => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            "json" => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => {
                return Err(Error::Config(format!(
                    "{}: expected a .toml or .json file",
                    path.display()
                )))
            }
        };
        Ok(cfg)
    }

    /// Every field, defaults included, as pretty JSON.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the fields that shape the learning run. Output location,
    /// seed list and worker settings are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.seeds.clear();
        c.workers = 1;
        c.strict_determinism = false;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn effective_workers(&self) -> usize {
        if self.strict_determinism {
            1
        } else {
            self.workers.max(1)
        }
    }

    pub fn steps_per_update(&self) -> usize {
        self.actors * self.horizon
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.ppo.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn env_kinds(&self) -> Vec<EnvKind> {
        self.envs.iter().map(|e| e.env_kind).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.cnn_gru.validate()?;
        self.ppo.validate()?;
        self.mask.validate()?;
        for e in &self.envs {
            e.validate()?;
        }
        match (self.regime, self.envs.len()) {
            (Regime::Multitask, 2) => {
                if self.envs[0].env_kind == self.envs[1].env_kind {
                    return Err(Error::Config("multitask needs two different environments".into()));
                }
                if self.actors % 2 != 0 {
                    return Err(Error::Config(format!(
                        "multitask splits actors evenly; got odd count {}",
                        self.actors
                    )));
                }
            }
            (Regime::Multitask, n) => {
                return Err(Error::Config(format!("multitask needs exactly 2 environments, got {n}")))
            }
            (_, 1) => {}
            (r, n) => {
                return Err(Error::Config(format!(
                    "{} regime needs exactly 1 environment, got {n}",
                    r.name()
                )))
            }
        }
        if self.regime == Regime::Transfer && self.checkpoint_in.is_none() {
            return Err(Error::Config("transfer regime needs checkpoint_in".into()));
        }
        if self.actors == 0 || self.horizon == 0 || self.micro_batch == 0 {
            return Err(Error::Config("actors, horizon and micro_batch must be positive".into()));
        }
        let dataset = self.steps_per_update() * self.mask.duplicates;
        if self.ppo.minibatch_size >= dataset {
            return Err(Error::Config(format!(
                "minibatch_size {} must be smaller than actors * horizon * duplicates = {dataset}",
                self.ppo.minibatch_size
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if !(self.ml_weight >= 0.0) {
            return Err(Error::Config("ml_weight must be non-negative".into()));
        }
        let vocab = Vocabulary::full();
        if self.encoder.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "encoder.vocab_size {} differs from the vocabulary size {}",
                self.encoder.vocab_size,
                vocab.size()
            )));
        }
        if self.cnn_gru.word_rows != vocab.words().len() + 1 {
            return Err(Error::Config(format!(
                "cnn_gru.word_rows must be {}",
                vocab.words().len() + 1
            )));
        }
        let longest = MissionTemplate::ALL
            .iter()
            .map(|t| t.pattern().split(' ').count())
            .max()
            .unwrap_or(0);
        if self.encoder.max_positions < N_VISION + longest + 3 {
            return Err(Error::Config(format!(
                "encoder.max_positions {} cannot hold the longest sequence",
                self.encoder.max_positions
            )));
        }
        if self.encoder.n_actions != crate::gridworld::Action::COUNT || self.cnn_gru.n_actions != crate::gridworld::Action::COUNT {
            return Err(Error::Config("n_actions must match the action space".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_factor_the_update_size() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.steps_per_update(), 8064);
        assert_eq!((c.mask.duplicates, c.ppo.epochs, c.ppo.minibatch_size), (2, 4, 256));
    }

    #[test]
    fn odd_actor_count_rejected_for_multitask() {
        let c = ExperimentConfig {
            regime: Regime::Multitask,
            envs: vec![EnvConfig::new(EnvKind::Fetch), EnvConfig::new(EnvKind::GoToDoor)],
            actors: 3,
            ..ExperimentConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("odd")));
    }

    #[test]
    fn minibatch_must_be_smaller_than_dataset() {
        let mut c = ExperimentConfig {
            actors: 2,
            horizon: 8,
            ..ExperimentConfig::default()
        };
        c.ppo.minibatch_size = 32;
        assert!(c.validate().is_err());
        c.ppo.minibatch_size = 31;
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "actors = 4\nbogus = 1\n").unwrap();
        assert!(matches!(ExperimentConfig::from_path(&p), Err(Error::Config(m)) if m.contains("bogus")));
        std::fs::write(&p, "actors = 4\n[ppo]\nclip = 0.1\n").unwrap();
        assert!(ExperimentConfig::from_path(&p).is_err());
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"actors": 4, "horizon": 8}"#).unwrap();
        let c = ExperimentConfig::from_path(&j).unwrap();
        assert_eq!((c.actors, c.horizon), (4, 8));
        assert!(ExperimentConfig::from_path(&dir.path().join("c.yaml")).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&c.resolved_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn hash_ignores_output_location_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        b.workers = 4;
        assert_eq!(a.hash(), b.hash());
        b.ppo.clip_eps = 0.3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn transfer_requires_a_checkpoint() {
        let c = ExperimentConfig {
            regime: Regime::Transfer,
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
