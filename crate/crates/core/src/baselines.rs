//! Comparison agents: the transformer trained without the masked-token loss
//! (see [`ModelKind::LambertNoMl`]) and a convolutional + recurrent network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{Action, Color, ObjectKind, Observation, VIEW_SIZE};
use crate::nn::{truncated_normal, Linear, INIT_STD};
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::tokenizer::Vocabulary;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lambert,
    LambertNoMl,
    CnnGru,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lambert => "lambert",
            ModelKind::LambertNoMl => "lambert_no_ml",
            ModelKind::CnnGru => "cnn_gru",
        }
    }

    /// Whether update inputs are masked.
    pub fn masks_inputs(self) -> bool {
        self != ModelKind::CnnGru
    }

    pub fn uses_mask_loss(self) -> bool {
        self == ModelKind::Lambert
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ModelKind::Lambert, ModelKind::LambertNoMl, ModelKind::CnnGru]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

/// One-hot channels per view cell: object kinds then colors.
pub const VISION_CHANNELS: usize = ObjectKind::ALL.len() + Color::ALL.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnGruConfig {
    pub conv_channels: [usize; 2],
    pub kernel: usize,
    pub vision_dim: usize,
    pub word_dim: usize,
    pub gru_hidden: usize,
    pub mlp_hidden: usize,
    /// Mission words plus one padding row; filled from the vocabulary.
    pub word_rows: usize,
    pub n_actions: usize,
}

impl Default for CnnGruConfig {
    fn default() -> Self {
        Self {
            conv_channels: [16, 32],
            kernel: 3,
            vision_dim: 64,
            word_dim: 64,
            gru_hidden: 64,
            mlp_hidden: 128,
            word_rows: Vocabulary::full().words().len() + 1,
            n_actions: Action::COUNT,
        }
    }
}

impl CnnGruConfig {
    fn conv_out(&self) -> usize {
        VIEW_SIZE + 2 - 2 * self.kernel
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.conv_channels[0],
            self.conv_channels[1],
            self.vision_dim,
            self.word_dim,
            self.gru_hidden,
            self.mlp_hidden,
            self.word_rows,
            self.n_actions,
        ];
        if dims.contains(&0) || self.kernel == 0 || 2 * self.kernel > VIEW_SIZE + 1 {
            return Err(Error::Config("invalid cnn_gru dimensions".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let [c1, c2] = self.conv_channels;
        let flat = self.conv_out() * self.conv_out() * c2;
        let h = self.gru_hidden;
        Linear::param_count(k2 * VISION_CHANNELS, c1)
            + Linear::param_count(k2 * c1, c2)
            + Linear::param_count(flat, self.vision_dim)
            + self.word_rows * self.word_dim
            + Linear::param_count(self.word_dim, 3 * h)
            + Linear::param_count(h, 3 * h)
            + Linear::param_count(self.vision_dim + h, self.mlp_hidden)
            + Linear::param_count(self.mlp_hidden, self.mlp_hidden)
            + Linear::param_count(self.mlp_hidden, self.n_actions)
            + Linear::param_count(self.mlp_hidden, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CnnGruIds {
    conv1: Linear,
    conv2: Linear,
    vision: Linear,
    words: ParamId,
    gru_x: Linear,
    gru_h: Linear,
    mlp1: Linear,
    mlp2: Linear,
    actor: Linear,
    critic: Linear,
}

#[derive(Debug, Clone)]
pub struct CnnGru<T> {
    config: CnnGruConfig,
    params: ParamSet<T>,
    ids: CnnGruIds,
}

impl<T: Scalar> CnnGru<T> {
    pub fn new(config: CnnGruConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let k2 = config.kernel * config.kernel;
        let [c1, c2] = config.conv_channels;
        let flat = config.conv_out() * config.conv_out() * c2;
        let h = config.gru_hidden;
        let conv1 = Linear::new(&mut p, "vision.conv1", k2 * VISION_CHANNELS, c1, &mut rng);
        let conv2 = Linear::new(&mut p, "vision.conv2", k2 * c1, c2, &mut rng);
        let vision = Linear::new(&mut p, "vision.proj", flat, config.vision_dim, &mut rng);
        let words = p.insert(
            "language.embedding",
            truncated_normal(&[config.word_rows, config.word_dim], INIT_STD, &mut rng),
        );
        let gru_x = Linear::new(&mut p, "language.gru.input", config.word_dim, 3 * h, &mut rng);
        let gru_h = Linear::new(&mut p, "language.gru.hidden", h, 3 * h, &mut rng);
        let mlp1 = Linear::new(&mut p, "trunk.fc1", config.vision_dim + h, config.mlp_hidden, &mut rng);
        let mlp2 = Linear::new(&mut p, "trunk.fc2", config.mlp_hidden, config.mlp_hidden, &mut rng);
        let actor = Linear::new(&mut p, "heads.actor", config.mlp_hidden, config.n_actions, &mut rng);
        let critic = Linear::new(&mut p, "heads.critic", config.mlp_hidden, 1, &mut rng);
        assert_eq!(p.count(), config.param_count(), "parameter count drifted from config");
        Ok(Self {
            config,
            params: p,
            ids: CnnGruIds {
                conv1,
                conv2,
                vision,
                words,
                gru_x,
                gru_h,
                mlp1,
                mlp2,
                actor,
                critic,
            },
        })
    }

    pub fn from_params(config: CnnGruConfig, params: &ParamSet<T>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.copy_from(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &CnnGruConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> CnnGru<U> {
        CnnGru {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    fn vision(&self, g: &mut Graph<T>, obs: &[&Observation]) -> Result<Var> {
        let b = obs.len();
        let mut onehot = vec![T::zero(); b * VIEW_SIZE * VIEW_SIZE * VISION_CHANNELS];
        for (i, o) in obs.iter().enumerate() {
            for (r, row) in o.vision.iter().enumerate() {
                for (c, cell) in row.iter().enumerate() {
                    let base = ((i * VIEW_SIZE + r) * VIEW_SIZE + c) * VISION_CHANNELS;
                    onehot[base + cell.kind.index()] = T::one();
                    onehot[base + ObjectKind::ALL.len() + cell.color.index()] = T::one();
                }
            }
        }
        let x = g.constant(Tensor::from_vec(&[b, VIEW_SIZE, VIEW_SIZE, VISION_CHANNELS], onehot)?);
        let [c1, c2] = self.config.conv_channels;
        let k = self.config.kernel;
        let s1 = VIEW_SIZE - k + 1;
        let s2 = s1 - k + 1;
        let patches = g.unfold(x, k)?;
        let y = self.ids.conv1.forward(g, &self.params, patches)?;
        let y = g.relu(y);
        let y = g.reshape(y, &[b, s1, s1, c1])?;
        let patches = g.unfold(y, k)?;
        let y = self.ids.conv2.forward(g, &self.params, patches)?;
        let y = g.relu(y);
        let y = g.reshape(y, &[b, s2 * s2 * c2])?;
        self.ids.vision.forward(g, &self.params, y)
    }

    fn language(&self, g: &mut Graph<T>, obs: &[&Observation], vocab: &Vocabulary) -> Result<Var> {
        let b = obs.len();
        let h = self.config.gru_hidden;
        let rows = obs
            .iter()
            .map(|o| {
                o.mission_text
                    .iter()
                    .map(|w| {
                        let id = vocab
                            .word_id(&w.to_lowercase())
                            .ok_or_else(|| Error::Config(format!("word {w:?} outside the vocabulary")))?;
                        let row = (id - vocab.word_base()) as usize + 1;
                        if row >= self.config.word_rows {
                            return Err(Error::invalid("cnn_gru", format!("word row {row} outside table")));
                        }
                        Ok(row)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let steps = rows.iter().map(Vec::len).max().unwrap_or(0);
        let table = g.param(&self.params, self.ids.words);
        let mut state = g.constant(Tensor::zeros(&[b, h]));
        for t in 0..steps {
            let ids: Vec<usize> = rows.iter().map(|r| r.get(t).copied().unwrap_or(0)).collect();
            let x = g.embedding(table, &ids)?;
            let gx = self.ids.gru_x.forward(g, &self.params, x)?;
            let gh = self.ids.gru_h.forward(g, &self.params, state)?;
            let xz = g.slice(gx, 1, 0, h)?;
            let xr = g.slice(gx, 1, h, h)?;
            let xn = g.slice(gx, 1, 2 * h, h)?;
            let hz = g.slice(gh, 1, 0, h)?;
            let hr = g.slice(gh, 1, h, h)?;
            let hn = g.slice(gh, 1, 2 * h, h)?;
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z);
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r);
            let rh = g.mul(r, hn)?;
            let n = g.add(xn, rh)?;
            let n = g.tanh(n);
            let keep = g.sub(state, n)?;
            let keep = g.mul(z, keep)?;
            let next = g.add(n, keep)?;
            // sequences shorter than `steps` hold their final state
            let live: Vec<T> = rows
                .iter()
                .flat_map(|r| std::iter::repeat(if t < r.len() { T::one() } else { T::zero() }).take(h))
                .collect();
            let live = g.constant(Tensor::from_vec(&[b, h], live)?);
            let delta = g.sub(next, state)?;
            let delta = g.mul(live, delta)?;
            state = g.add(state, delta)?;
        }
        Ok(state)
    }

    /// Action logits `[batch, n_actions]` and values `[batch]`.
    pub fn forward(&self, g: &mut Graph<T>, obs: &[&Observation], vocab: &Vocabulary) -> Result<(Var, Var)> {
        if obs.is_empty() {
            return Err(Error::invalid("cnn_gru", "empty batch"));
        }
        let v = self.vision(g, obs)?;
        let l = self.language(g, obs, vocab)?;
        let x = g.concat(&[v, l], 1)?;
        let x = self.ids.mlp1.forward(g, &self.params, x)?;
        let x = g.relu(x);
        let x = self.ids.mlp2.forward(g, &self.params, x)?;
        let x = g.relu(x);
        let logits = self.ids.actor.forward(g, &self.params, x)?;
        let value = self.ids.critic.forward(g, &self.params, x)?;
        let value = g.reshape(value, &[obs.len()])?;
        Ok((logits, value))
    }
}
