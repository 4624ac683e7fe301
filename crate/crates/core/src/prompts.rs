//! Toy text conditioning: a fixed vocabulary of hashed unit vectors,
//! sentence pooling, edit directions from paired sentence banks and the
//! rich-prompt ladder.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 16;
pub const VOCAB_SEED: u64 = 0x5eed_0f_70c3;
/// Token standing in for the unconditional (empty) prompt.
pub const EMPTY_TOKEN: &str = "<empty>";

pub const VOCABULARY: &[&str] = &[
    EMPTY_TOKEN, "a", "an", "the", "one", "single", "disc", "square", "solid", "striped",
    "round", "small", "big", "large", "tiny", "shape", "object", "picture", "image", "photo",
    "drawing", "of", "with", "on", "in", "black", "white", "gray", "background", "bright",
    "dark", "filled", "plain", "lined", "banded", "centered", "simple", "flat", "bold", "thin",
    "wide", "little", "toy", "clean", "sharp", "soft", "and",
];

pub fn in_vocabulary(token: &str) -> bool {
    VOCABULARY.contains(&token)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Unit-norm embedding of one token, keyed by a hash of its bytes.
pub fn token_vector(token: &str) -> [f32; EMBED_DIM] {
    let mut rng = SeededRng::new(fnv1a(token.as_bytes()) ^ VOCAB_SEED);
    let raw: Vec<f64> = (0..EMBED_DIM).map(|_| rng.normal()).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = [0.0f32; EMBED_DIM];
    for (o, r) in out.iter_mut().zip(&raw) {
        *o = (r / norm) as f32;
    }
    out
}

/// Lower-cased whitespace tokenisation.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect()
}

/// Token sequence and its `L x d` embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    tokens: Vec<String>,
    matrix: Tensor,
}

impl PromptEmbedding {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The unconditional prompt used for classifier-free guidance.
    pub fn empty() -> Self {
        embed_tokens(&[EMPTY_TOKEN]).expect("empty token is in the vocabulary")
    }

    pub fn from_sentence(sentence: &str) -> Result<Self> {
        embed_tokens(&tokenize(sentence))
    }
}

pub fn embed_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<PromptEmbedding> {
    if tokens.is_empty() {
        return Err(Error::param("cannot embed an empty token list"));
    }
    let mut data = Vec::with_capacity(tokens.len() * EMBED_DIM);
    for t in tokens {
        let t = t.as_ref();
        if !in_vocabulary(t) {
            return Err(Error::param(format!("token {t:?} is not in the vocabulary")));
        }
        data.extend_from_slice(&token_vector(t));
    }
    Ok(PromptEmbedding {
        tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
        matrix: Tensor::new(vec![tokens.len(), EMBED_DIM], data)?,
    })
}

/// Mean of the token rows.
pub fn sentence_vector(e: &PromptEmbedding) -> Tensor {
    let l = e.len();
    let mut acc = [0.0f64; EMBED_DIM];
    for row in e.matrix.data().chunks_exact(EMBED_DIM) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    Tensor::from_fn(&[EMBED_DIM], |i| (acc[i] / l as f64) as f32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditDirection {
    pub vector: Tensor,
    pub source_label: String,
    pub target_label: String,
}

impl EditDirection {
    pub fn zero(label: &str) -> Self {
        Self {
            vector: Tensor::zeros(&[EMBED_DIM]),
            source_label: label.to_string(),
            target_label: label.to_string(),
        }
    }
}

/// Mean over paired sentences of `pool(target_i) - pool(source_i)`.
pub fn edit_direction<S: AsRef<str>>(
    source_sentences: &[S],
    target_sentences: &[S],
) -> Result<Tensor> {
    if source_sentences.is_empty() || source_sentences.len() != target_sentences.len() {
        return Err(Error::param(format!(
            "need equally many non-empty source and target sentences, got {} and {}",
            source_sentences.len(),
            target_sentences.len()
        )));
    }
    let n = source_sentences.len();
    let mut acc = [0.0f64; EMBED_DIM];
    for (s, t) in source_sentences.iter().zip(target_sentences) {
        let sv = sentence_vector(&PromptEmbedding::from_sentence(s.as_ref())?);
        let tv = sentence_vector(&PromptEmbedding::from_sentence(t.as_ref())?);
        for (i, a) in acc.iter_mut().enumerate() {
            *a += tv.data()[i] as f64 - sv.data()[i] as f64;
        }
    }
    Ok(Tensor::from_fn(&[EMBED_DIM], |i| (acc[i] / n as f64) as f32))
}

/// `c` with `w * direction` added to every token row.
pub fn apply_direction(c: &PromptEmbedding, dir: &EditDirection, w: f32) -> PromptEmbedding {
    if w == 0.0 {
        return c.clone();
    }
    let mut matrix = c.matrix.clone();
    for row in matrix.data_mut().chunks_exact_mut(EMBED_DIM) {
        for (v, &d) in row.iter_mut().zip(dir.vector.data()) {
            *v += w * d;
        }
    }
    PromptEmbedding {
        tokens: c.tokens.clone(),
        matrix,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LadderWeights {
    pub mid: f32,
    pub high: f32,
}

impl Default for LadderWeights {
    fn default() -> Self {
        Self { mid: 0.5, high: 1.0 }
    }
}

/// The base prompt and two progressively edited versions of it.
#[derive(Clone, Debug, PartialEq)]
pub struct RichPromptLadder {
    pub base: PromptEmbedding,
    pub mid: PromptEmbedding,
    pub high: PromptEmbedding,
    pub weights: LadderWeights,
}

pub fn make_ladder(
    c: &PromptEmbedding,
    dir: &EditDirection,
    weights: LadderWeights,
) -> Result<RichPromptLadder> {
    if !(0.0 < weights.mid && weights.mid < weights.high) {
        return Err(Error::param(format!(
            "ladder weights must satisfy 0 < mid < high, got {} and {}",
            weights.mid, weights.high
        )));
    }
    Ok(RichPromptLadder {
        base: c.clone(),
        mid: apply_direction(c, dir, weights.mid),
        high: apply_direction(c, dir, weights.high),
        weights,
    })
}

/// Sentence banks keyed by domain word, one sentence per line and paired by
/// line number across words.
#[derive(Clone, Debug, Default)]
pub struct SentenceBanks {
    banks: BTreeMap<String, Vec<String>>,
}

const BUILTIN_BANKS: &[(&str, &str)] = &[
    ("disc", include_str!("../banks/disc.txt")),
    ("square", include_str!("../banks/square.txt")),
    ("solid", include_str!("../banks/solid.txt")),
    ("striped", include_str!("../banks/striped.txt")),
];

fn parse_bank(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

impl SentenceBanks {
    pub fn builtin() -> Self {
        Self {
            banks: BUILTIN_BANKS
                .iter()
                .map(|(w, text)| (w.to_string(), parse_bank(text)))
                .collect(),
        }
    }

    /// Loads every `<word>.txt` in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut banks = BTreeMap::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(word) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            banks.insert(word.to_string(), parse_bank(&text));
        }
        Ok(Self { banks })
    }

    pub fn words(&self) -> Vec<&str> {
        self.banks.keys().map(String::as_str).collect()
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.banks.get(word).map(Vec::as_slice)
    }

    /// Edit direction from the `source` bank to the `target` bank.
    pub fn direction(&self, source: &str, target: &str) -> Result<EditDirection> {
        let lookup = |w: &str| {
            self.get(w).ok_or_else(|| {
                Error::param(format!(
                    "no sentence bank for {w:?}; available: {}",
                    self.words().join(", ")
                ))
            })
        };
        let (s, t) = (lookup(source)?, lookup(target)?);
        Ok(EditDirection {
            vector: edit_direction(s, t)?,
            source_label: source.to_string(),
            target_label: target.to_string(),
        })
    }
}
