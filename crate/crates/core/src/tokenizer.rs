//! Fuses an observation into one token sequence:
//! `[CLS] v_1..v_98 [SEP] w_1..w_M [SEP] [PAD]...`
//!
//! The vision block is the 7x7 object-kind channel flattened row-major,
//! followed by the 7x7 color channel. Each channel and the mission words own
//! disjoint ID blocks, so every ID maps back to exactly one symbol.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{
    mission_grammar, template_objects, Color, EnvKind, ObjectKind, Observation, VIEW_SIZE,
};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
const N_SPECIAL: u32 = 4;

/// Vision tokens per sequence: two channels of 7x7.
pub const N_VISION: usize = 2 * VIEW_SIZE * VIEW_SIZE;
pub const DEFAULT_MAX_LEN: usize = 112;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Special,
    VisionType,
    VisionColor,
    Language,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    word_ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Closed vocabulary covering every mission the given environments can emit.
    pub fn for_envs(envs: &[EnvKind]) -> Self {
        let mut words = Vec::new();
        for &env in EnvKind::ALL.iter().filter(|e| envs.contains(e)) {
            for &template in mission_grammar(env) {
                for &color in &Color::PAINTS {
                    for &obj in template_objects(template) {
                        words.extend(template.render(color, obj));
                    }
                }
            }
        }
        Self::from_words(words)
    }

    /// Union over all three environments; used for every experiment so that
    /// checkpoints transfer without embedding surgery.
    pub fn full() -> Self {
        Self::for_envs(&EnvKind::ALL)
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut out = Vec::new();
        let mut ids = HashMap::new();
        for w in words {
            if !ids.contains_key(&w) {
                ids.insert(w.clone(), 0);
                out.push(w);
            }
        }
        let mut v = Self {
            words: out,
            word_ids: HashMap::new(),
        };
        let base = v.word_base();
        v.word_ids = v
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), base + i as u32))
            .collect();
        v
    }

    pub fn type_base(&self) -> u32 {
        N_SPECIAL
    }

    pub fn color_base(&self) -> u32 {
        N_SPECIAL + ObjectKind::ALL.len() as u32
    }

    pub fn word_base(&self) -> u32 {
        self.color_base() + Color::ALL.len() as u32
    }

    pub fn size(&self) -> usize {
        self.word_base() as usize + self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn type_id(&self, kind: ObjectKind) -> u32 {
        self.type_base() + kind.index() as u32
    }

    pub fn color_id(&self, color: Color) -> u32 {
        self.color_base() + color.index() as u32
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.word_ids.get(word).copied()
    }

    /// ID range a modality's tokens occupy.
    pub fn block(&self, modality: Modality) -> Range<u32> {
        match modality {
            Modality::Special => 0..N_SPECIAL,
            Modality::VisionType => self.type_base()..self.color_base(),
            Modality::VisionColor => self.color_base()..self.word_base(),
            Modality::Language => self.word_base()..self.size() as u32,
        }
    }

    pub fn modality(&self, id: u32) -> Option<Modality> {
        [
            Modality::Special,
            Modality::VisionType,
            Modality::VisionColor,
            Modality::Language,
        ]
        .into_iter()
        .find(|&m| self.block(m).contains(&id))
    }

    pub fn symbol(&self, id: u32) -> Option<String> {
        Some(match self.modality(id)? {
            Modality::Special => ["[PAD]", "[CLS]", "[SEP]", "[MASK]"][id as usize].to_string(),
            Modality::VisionType => ObjectKind::ALL[(id - self.type_base()) as usize].name().to_string(),
            Modality::VisionColor => Color::ALL[(id - self.color_base()) as usize].name().to_string(),
            Modality::Language => self.words[(id - self.word_base()) as usize].clone(),
        })
    }

    pub fn manifest(&self) -> VocabManifest {
        VocabManifest {
            version: 1,
            size: self.size(),
            tokens: (0..self.size() as u32)
                .map(|id| ManifestEntry {
                    id,
                    modality: self.modality(id).unwrap(),
                    symbol: self.symbol(id).unwrap(),
                })
                .collect(),
        }
    }

    /// Rebuilds a vocabulary from its manifest, checking the fixed blocks.
    pub fn from_manifest(m: &VocabManifest) -> Result<Self> {
        let words = m
            .tokens
            .iter()
            .filter(|t| t.modality == Modality::Language)
            .map(|t| t.symbol.clone());
        let v = Self::from_words(words);
        if v.manifest() != *m {
            return Err(Error::Incompatible("vocabulary manifest layout differs".into()));
        }
        Ok(v)
    }

    /// Words of `required` missing from this vocabulary.
    pub fn missing_words(&self, required: &Vocabulary) -> Vec<String> {
        required
            .words
            .iter()
            .filter(|w| self.word_id(w).is_none())
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabManifest {
    pub version: u32,
    pub size: usize,
    pub tokens: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u32,
    pub modality: Modality,
    pub symbol: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    pub n_vision: usize,
    pub n_language: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn vision_slots(&self) -> Range<usize> {
        1..1 + self.n_vision
    }

    pub fn language_slots(&self) -> Range<usize> {
        let start = 2 + self.n_vision;
        start..start + self.n_language
    }

    /// Slots that may be chosen for masked prediction.
    pub fn candidate_slots(&self) -> impl Iterator<Item = usize> {
        self.vision_slots().chain(self.language_slots())
    }

    /// Number of non-PAD slots.
    pub fn occupied(&self) -> usize {
        self.n_vision + self.n_language + 3
    }

    /// Layout arrays for `(n_vision, n_language, max_len)`.
    fn layout(n_vision: usize, n_language: usize, max_len: usize) -> (Vec<u32>, Vec<u8>, Vec<u8>) {
        let occupied = n_vision + n_language + 3;
        let positions = (0..max_len as u32).collect();
        let segments = (0..max_len)
            .map(|i| u8::from(i > n_vision + 1 && i < occupied))
            .collect();
        let mask = (0..max_len).map(|i| u8::from(i < occupied)).collect();
        (positions, segments, mask)
    }

    /// Copy of the sequence padded (or trimmed of PAD) to `max_len`.
    pub fn with_len(&self, max_len: usize) -> Result<TokenSequence> {
        if max_len < self.occupied() {
            return Err(Error::Config(format!(
                "sequence of {} tokens does not fit max_len {max_len}",
                self.occupied()
            )));
        }
        let (position_ids, segment_ids, attention_mask) =
            Self::layout(self.n_vision, self.n_language, max_len);
        let mut token_ids = self.token_ids[..self.occupied()].to_vec();
        token_ids.resize(max_len, PAD);
        Ok(TokenSequence {
            token_ids,
            position_ids,
            segment_ids,
            attention_mask,
            n_vision: self.n_vision,
            n_language: self.n_language,
        })
    }
}

pub fn tokenize(obs: &Observation, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let m = obs.mission_text.len();
    let occupied = N_VISION + m + 3;
    if occupied > max_len {
        return Err(Error::Config(format!(
            "sequence of {occupied} tokens exceeds max_len {max_len}"
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    for row in &obs.vision {
        ids.extend(row.iter().map(|c| vocab.type_id(c.kind)));
    }
    for row in &obs.vision {
        ids.extend(row.iter().map(|c| vocab.color_id(c.color)));
    }
    ids.push(SEP);
    for word in &obs.mission_text {
        let lower = word.to_lowercase();
        let id = vocab
            .word_id(&lower)
            .ok_or_else(|| Error::Config(format!("word {lower:?} outside the vocabulary")))?;
        ids.push(id);
    }
    ids.push(SEP);
    ids.resize(max_len, PAD);
    let (position_ids, segment_ids, attention_mask) = TokenSequence::layout(N_VISION, m, max_len);
    Ok(TokenSequence {
        token_ids: ids,
        position_ids,
        segment_ids,
        attention_mask,
        n_vision: N_VISION,
        n_language: m,
    })
}

/// A decoded vision slot; `Masked` marks a `[MASK]` token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decoded<V> {
    Value(V),
    Masked,
}

pub type VisionGrid<V> = [[Decoded<V>; VIEW_SIZE]; VIEW_SIZE];

/// Inverse of the vision flattening: `(kind channel, color channel)`.
pub fn detokenize_vision(
    seq: &TokenSequence,
    vocab: &Vocabulary,
) -> Result<(VisionGrid<ObjectKind>, VisionGrid<Color>)> {
    if seq.n_vision != N_VISION || seq.len() < N_VISION + 1 {
        return Err(Error::MalformedSequence(format!(
            "expected {N_VISION} vision tokens, found {}",
            seq.n_vision
        )));
    }
    let cells = VIEW_SIZE * VIEW_SIZE;
    let mut kinds = [[Decoded::Masked; VIEW_SIZE]; VIEW_SIZE];
    let mut colors = [[Decoded::Masked; VIEW_SIZE]; VIEW_SIZE];
    for k in 0..cells {
        let (r, c) = (k / VIEW_SIZE, k % VIEW_SIZE);
        let tid = seq.token_ids[1 + k];
        kinds[r][c] = match tid {
            MASK => Decoded::Masked,
            id if vocab.block(Modality::VisionType).contains(&id) => {
                Decoded::Value(ObjectKind::ALL[(id - vocab.type_base()) as usize])
            }
            id => {
                return Err(Error::MalformedSequence(format!(
                    "token {id} at kind slot {}",
                    1 + k
                )))
            }
        };
        let cid = seq.token_ids[1 + cells + k];
        colors[r][c] = match cid {
            MASK => Decoded::Masked,
            id if vocab.block(Modality::VisionColor).contains(&id) => {
                Decoded::Value(Color::ALL[(id - vocab.color_base()) as usize])
            }
            id => {
                return Err(Error::MalformedSequence(format!(
                    "token {id} at color slot {}",
                    1 + cells + k
                )))
            }
        };
    }
    Ok((kinds, colors))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::gridworld::{env_reset, EnvConfig, VisionCell};

    fn room_obs(mission: &str) -> Observation {
        Observation {
            vision: [[VisionCell {
                kind: ObjectKind::Empty,
                color: Color::None,
            }; VIEW_SIZE]; VIEW_SIZE],
            mission_text: mission.split_whitespace().map(String::from).collect(),
        }
    }

    #[test]
    fn blocks_are_disjoint_and_cover_every_id() {
        let v = Vocabulary::full();
        let mut seen = std::collections::HashSet::new();
        for id in 0..v.size() as u32 {
            let m = v.modality(id).expect("every id has a modality");
            assert!(v.block(m).contains(&id));
            assert!(seen.insert((m, v.symbol(id).unwrap())));
        }
        assert_eq!(v.modality(v.size() as u32), None);
        for w in ["go", "to", "the", "door", "fetch", "a", "you", "must", "get", "red", "key"] {
            assert!(v.word_id(w).is_some(), "{w}");
        }
    }

    #[test]
    fn layout_of_empty_room_sequence() {
        let v = Vocabulary::full();
        let seq = tokenize(&room_obs("go to the red ball"), &v, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(seq.n_vision, 98);
        assert_eq!(seq.n_language, 5);
        assert_eq!(seq.attention_mask.iter().filter(|&&m| m == 1).count(), 106);
        assert_eq!(seq.token_ids[0], CLS);
        assert_eq!(seq.token_ids[99], SEP);
        assert_eq!(seq.token_ids[105], SEP);
        assert!(seq.token_ids[106..].iter().all(|&t| t == PAD));
        assert_eq!(seq.position_ids, (0..112).collect::<Vec<u32>>());
        assert!(seq.segment_ids[..100].iter().all(|&s| s == 0));
        assert!(seq.segment_ids[100..106].iter().all(|&s| s == 1));
        assert!(seq.segment_ids[106..].iter().all(|&s| s == 0));
        assert_eq!(seq.token_ids[100], v.word_id("go").unwrap());
    }

    #[test]
    fn one_cell_color_change_touches_one_slot() {
        let v = Vocabulary::full();
        let a = room_obs("go to the red ball");
        let mut b = a.clone();
        b.vision[2][5].color = Color::Purple;
        let (sa, sb) = (tokenize(&a, &v, 112).unwrap(), tokenize(&b, &v, 112).unwrap());
        let diff: Vec<_> = (0..112).filter(|&i| sa.token_ids[i] != sb.token_ids[i]).collect();
        assert_eq!(diff, vec![1 + 49 + 2 * 7 + 5]);
    }

    #[test]
    fn too_long_sequence_is_a_config_error() {
        let v = Vocabulary::full();
        let obs = room_obs("go to the red ball");
        assert!(matches!(tokenize(&obs, &v, 105), Err(Error::Config(_))));
        assert!(tokenize(&obs, &v, 106).is_ok());
    }

    #[test]
    fn unknown_word_is_rejected() {
        let v = Vocabulary::full();
        assert!(tokenize(&room_obs("go to the orange ball"), &v, 112).is_err());
    }

    #[test]
    fn mask_and_pad_in_vision_region() {
        let v = Vocabulary::full();
        let mut seq = tokenize(&room_obs("get a red key"), &v, 112).unwrap();
        seq.token_ids[1] = MASK;
        let (kinds, colors) = detokenize_vision(&seq, &v).unwrap();
        assert_eq!(kinds[0][0], Decoded::Masked);
        assert_eq!(colors[0][0], Decoded::Value(Color::None));
        seq.token_ids[60] = PAD;
        assert!(matches!(detokenize_vision(&seq, &v), Err(Error::MalformedSequence(_))));
    }

    #[test]
    fn manifest_round_trip_and_superset_check() {
        let full = Vocabulary::full();
        let back = Vocabulary::from_manifest(&full.manifest()).unwrap();
        assert_eq!(back, full);
        let door_only = Vocabulary::for_envs(&[EnvKind::GoToDoor]);
        assert!(!door_only.missing_words(&full).is_empty());
        assert!(full.missing_words(&door_only).is_empty());
        assert!(full.missing_words(&Vocabulary::full()).is_empty());
    }

    #[test]
    fn pad_extension_preserves_occupied_slots() {
        let v = Vocabulary::full();
        let seq = tokenize(&room_obs("fetch a blue key"), &v, 112).unwrap();
        let longer = seq.with_len(128).unwrap();
        assert_eq!(&longer.token_ids[..112], &seq.token_ids[..]);
        assert_eq!(&longer.segment_ids[..112], &seq.segment_ids[..]);
        assert!(seq.with_len(100).is_err());
    }

    proptest! {
        #[test]
        fn vision_round_trip(seed in any::<u64>(), kind in 0usize..3) {
            let v = Vocabulary::full();
            let (_, obs) = env_reset(&EnvConfig::new(EnvKind::ALL[kind]), seed);
            let seq = tokenize(&obs, &v, DEFAULT_MAX_LEN).unwrap();
            let (kinds, colors) = detokenize_vision(&seq, &v).unwrap();
            for r in 0..VIEW_SIZE {
                for c in 0..VIEW_SIZE {
                    prop_assert_eq!(kinds[r][c], Decoded::Value(obs.vision[r][c].kind));
                    prop_assert_eq!(colors[r][c], Decoded::Value(obs.vision[r][c].color));
                }
            }
            prop_assert!(seq.occupied() <= 110);
        }
    }
}
