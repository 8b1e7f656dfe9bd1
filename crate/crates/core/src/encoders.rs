//! Sequence encoders producing the text matrix `S` and caption matrix `C`.
//!
//! Two providers stand behind one contract (`T×d` output, `[CLS]` at row 0):
//! a small trainable encoder over a whitespace/punctuation vocabulary, and a
//! loader for precomputed feature files.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use sarcasm_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::read_tensor_file;
use crate::error::{CoreError, Result};
use crate::incongruity::{incongruity_sequence, BlockParams, BlockSettings};
use crate::layers::{join, sinusoidal_positions, xavier_uniform, Dropout};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

/// Token/id table with three reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new()).expect("reserved tokens are unique")
    }
}

impl Vocab {
    /// Builds a vocabulary from non-reserved tokens in id order (first token
    /// gets id 3).
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (id, tok) in all.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(CoreError::Data(format!("invalid vocabulary token {tok:?}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(CoreError::Data(format!(
                    "duplicate vocabulary token {tok:?}"
                )));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Counts tokens over `texts` and assigns ids by descending frequency,
    /// ties broken lexicographically. `max_size` caps the total size,
    /// reserved ids included.
    pub fn build<'t>(texts: impl IntoIterator<Item = &'t str>, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(max) = max_size {
            ranked.truncate(max.saturating_sub(RESERVED.len()));
        }
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t)).expect("counted tokens are valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        text.parse()
            .map_err(|e: CoreError| CoreError::Data(format!("{}: {e}", path.display())))
    }
}

/// One token per line; line `k` holds id `k + 3`.
impl fmt::Display for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for tok in self.entries() {
            writeln!(f, "{tok}")?;
        }
        Ok(())
    }
}

impl FromStr for Vocab {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_tokens(s.lines())
    }
}

/// Lowercases `text` and splits it into runs of alphanumerics; every other
/// non-space character becomes a token of its own.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Fixed-length id sequence with its attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub ids: Vec<usize>,
    /// `true` for `[CLS]` and real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

/// `[CLS]` followed by at most `max_len - 1` token ids, padded to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenizedSequence> {
    if max_len < 2 {
        return Err(CoreError::Config(format!(
            "sequence length must be at least 2, got {max_len}"
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        split_tokens(text)
            .iter()
            .take(max_len - 1)
            .map(|t| vocab.id(t)),
    );
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < real).collect();
    Ok(TokenizedSequence { ids, mask })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    /// Trainable embedding + self-attention encoder.
    #[default]
    Toy,
    /// Precomputed `T×d` / `U×d` feature files.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Text length `T`, `[CLS]` included.
    pub text_len: usize,
    /// Caption length `U`, `[CLS]` included.
    pub caption_len: usize,
    /// Self-attention layers in the toy encoder.
    pub layers: usize,
    pub provider: Provider,
    /// Text and caption use one embedding table and one layer stack.
    pub share_text_caption: bool,
    /// Rows of the embedding table; set from the vocabulary.
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            text_len: 64,
            caption_len: 32,
            layers: 1,
            provider: Provider::Toy,
            share_text_caption: true,
            vocab_size: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_len < 2 || self.caption_len < 2 {
            return Err(CoreError::Config(format!(
                "text_len and caption_len must be at least 2, got {} and {}",
                self.text_len, self.caption_len
            )));
        }
        if self.provider == Provider::Toy && self.vocab_size <= RESERVED.len() {
            return Err(CoreError::Config(format!(
                "toy encoder needs a vocabulary beyond the reserved ids, got vocab_size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Embedding table (`V×d`) and self-attention layers of the toy encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub embedding: T,
    pub layers: Vec<BlockParams<T>>,
}

impl EncoderParams {
    pub fn init(
        rng: &mut impl Rng,
        vocab_size: usize,
        d: usize,
        heads: usize,
        mlp_dim: usize,
        layers: usize,
    ) -> Result<Self> {
        Ok(Self {
            embedding: xavier_uniform(rng, vocab_size, d),
            layers: (0..layers)
                .map(|_| BlockParams::init(rng, d, heads, mlp_dim))
                .collect::<Result<_>>()?,
        })
    }
}

impl<T> EncoderParams<T> {
    pub fn map<'s, U>(
        &'s self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &'s T) -> U,
    ) -> EncoderParams<U> {
        EncoderParams {
            embedding: f(&join(prefix, "embedding"), &self.embedding),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&join(prefix, &format!("layer{i}")), f))
                .collect(),
        }
    }

    pub fn collect_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut T)>) {
        out.push((join(prefix, "embedding"), &mut self.embedding));
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.collect_mut(&join(prefix, &format!("layer{i}")), out);
        }
    }
}

/// Embeds `seq`, adds sinusoidal positions and runs the self-attention
/// layers with padded keys masked out. Row `i` of the result belongs to token
/// `i`.
pub fn encode_sequence(
    tape: &mut Tape,
    seq: &TokenizedSequence,
    params: &EncoderParams<Var>,
    settings: &BlockSettings,
    dropout: &mut Dropout,
) -> Result<Var> {
    let (vocab, d) = {
        let s = tape.shape(params.embedding);
        (s[0], s[1])
    };
    if seq.ids.len() != seq.mask.len() {
        return Err(CoreError::Data(format!(
            "token ids ({}) and mask ({}) differ in length",
            seq.ids.len(),
            seq.mask.len()
        )));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&id| id >= vocab) {
        return Err(CoreError::Data(format!(
            "token id {bad} is outside the vocabulary of size {vocab}"
        )));
    }
    let embedded = tape.gather_rows(params.embedding, &seq.ids)?;
    let positions = tape.constant(sinusoidal_positions(seq.ids.len(), d));
    let mut x = tape.add(embedded, positions)?;
    for layer in &params.layers {
        x = incongruity_sequence(tape, x, x, layer, settings, Some(&seq.mask), dropout)?;
    }
    Ok(x)
}

/// Reads a precomputed `rows×cols` feature matrix.
pub fn load_sequence_features(path: &Path, expected: (usize, usize)) -> Result<Tensor> {
    let t = read_tensor_file(path)?;
    if t.shape() != [expected.0, expected.1] {
        return Err(CoreError::Data(format!(
            "{}: expected features of shape {:?}, found {:?}",
            path.display(),
            [expected.0, expected.1],
            t.shape()
        )));
    }
    Ok(t)
}
