//! Deterministic frozen caption encoder.
//!
//! Seeded token embeddings plus sinusoidal positions, mixed by one masked
//! single-head self-attention layer. Nothing here is ever trained.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condition::GenerationCondition;
use crate::synth::attributes::{Region, COLORS, MATERIALS, OBJECT_NOUNS, TEXTURES};
use crate::tensor::Tensor;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("empty caption")]
    EmptyCaption,
    #[error("condition has no instances")]
    NoInstances,
    #[error("condition has {n} instances, more than the maximum {max}")]
    TooManyInstances { n: usize, max: usize },
    #[error("vocabulary bytes are not valid UTF-8")]
    VocabEncoding,
    #[error("invalid text config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for TokenVocab {
    fn default() -> Self {
        let mut words: Vec<&str> = vec![PAD, UNK, ",", "a", "person", "wearing", "and"];
        words.extend(COLORS.iter().map(|(n, _)| *n));
        words.extend(MATERIALS);
        words.extend(TEXTURES);
        words.extend(OBJECT_NOUNS);
        for r in Region::ALL {
            words.extend(r.garments());
        }
        Self::from_tokens(words.into_iter().map(String::from).collect())
    }
}

impl TokenVocab {
    /// Ids follow list order; later duplicates are ignored.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut index = HashMap::new();
        let mut kept = Vec::new();
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), kept.len());
                kept.push(t);
            }
        }
        Self { tokens: kept, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        self.index[PAD]
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(self.index[UNK])
    }

    /// Lowercases, splits on whitespace and separates commas.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.to_lowercase()
            .replace(',', " , ")
            .split_whitespace()
            .map(|w| self.id(w))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.tokens.join("\n").into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TextError> {
        let s = std::str::from_utf8(bytes).map_err(|_| TextError::VocabEncoding)?;
        Ok(Self::from_tokens(s.split('\n').map(String::from).collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub seed: u64,
    pub channels: usize,
    /// Per-instance caption length `S_tau`.
    pub max_tokens: usize,
    /// Length of the global prompt sequence.
    pub global_max_tokens: usize,
    pub max_instances: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            channels: 64,
            max_tokens: 24,
            global_max_tokens: 96,
            max_instances: 10,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<(), TextError> {
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(TextError::Config("text_sim.channels must be even and >= 2".into()));
        }
        if self.max_tokens == 0 || self.global_max_tokens == 0 || self.max_instances == 0 {
            return Err(TextError::Config("token and instance limits must be >= 1".into()));
        }
        Ok(())
    }
}

/// One encoded token sequence, zero-padded to a fixed length.
#[derive(Debug, Clone)]
pub struct EncodedText {
    /// `(len_max, C)`
    pub features: Tensor,
    pub length: usize,
}

/// Encoded per-instance captions and the global prompt.
#[derive(Debug, Clone)]
pub struct TextFeatureBatch {
    /// `(1, N, S_tau, C)`, never requires grad.
    pub features: Tensor,
    pub lengths: Vec<usize>,
    /// `(1, S_global, C)`
    pub global: Tensor,
    pub global_length: usize,
}

impl TextFeatureBatch {
    pub fn n_instances(&self) -> usize {
        self.lengths.len()
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextConfig,
    vocab: TokenVocab,
    embed: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
}

impl TextEncoder {
    pub fn new(config: TextConfig) -> Result<Self, TextError> {
        Self::with_vocab(config, TokenVocab::default())
    }

    pub fn with_vocab(config: TextConfig, vocab: TokenVocab) -> Result<Self, TextError> {
        config.validate()?;
        let c = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut draw = |n: usize, std: f64| (0..n).map(|_| unit.sample(&mut rng) * std).collect::<Vec<f64>>();
        let mut embed = draw(vocab.len() * c, 1.0);
        let pad = vocab.pad_id();
        embed[pad * c..(pad + 1) * c].fill(0.0);
        let w_std = 1.0 / (c as f64).sqrt();
        let (wq, wk, wv) = (draw(c * c, w_std), draw(c * c, w_std), draw(c * c, w_std));
        Ok(Self {
            config,
            vocab,
            embed,
            wq,
            wk,
            wv,
        })
    }

    pub fn vocab(&self) -> &TokenVocab {
        &self.vocab
    }

    /// Token embeddings plus positions, zero on pad rows; returned before
    /// mixing so the padding convention can be inspected.
    pub fn embed_tokens(&self, ids: &[usize], len_max: usize) -> (Vec<f64>, usize) {
        let c = self.config.channels;
        let n = ids.len().min(len_max);
        if ids.len() > len_max {
            log::warn!("text of {} tokens truncated to {len_max}", ids.len());
        }
        let half = c / 2;
        let mut x = vec![0.0; len_max * c];
        for (p, &id) in ids[..n].iter().enumerate() {
            let row = &mut x[p * c..(p + 1) * c];
            for (j, v) in row.iter_mut().enumerate() {
                let k = j % half;
                let f = (-(10_000f64).ln() * k as f64 / half as f64).exp();
                let pos = if j < half { (p as f64 * f).sin() } else { (p as f64 * f).cos() };
                *v = self.embed[id * c + j] + pos;
            }
        }
        (x, n)
    }

    fn project(&self, x: &[f64], w: &[f64], rows: usize) -> Vec<f64> {
        let c = self.config.channels;
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for i in 0..c {
                let xv = x[r * c + i];
                for (o, wv) in out[r * c..(r + 1) * c].iter_mut().zip(&w[i * c..(i + 1) * c]) {
                    *o += xv * wv;
                }
            }
        }
        out
    }

    /// Residual masked self-attention over the first `n` rows; pad rows stay zero.
    fn mix(&self, x: &[f64], n: usize, len_max: usize) -> Vec<f64> {
        let c = self.config.channels;
        let (q, k, v) = (self.project(x, &self.wq, n), self.project(x, &self.wk, n), self.project(x, &self.wv, n));
        let scale = 1.0 / (c as f64).sqrt();
        let mut out = vec![0.0; len_max * c];
        let mut w = vec![0.0; n];
        for i in 0..n {
            for (j, wj) in w.iter_mut().enumerate() {
                *wj = q[i * c..(i + 1) * c].iter().zip(&k[j * c..(j + 1) * c]).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            w.iter_mut().for_each(|s| *s = (*s - max).exp());
            let total: f64 = w.iter().sum();
            let row = &mut out[i * c..(i + 1) * c];
            row.copy_from_slice(&x[i * c..(i + 1) * c]);
            for (j, wj) in w.iter().enumerate() {
                for (o, vv) in row.iter_mut().zip(&v[j * c..(j + 1) * c]) {
                    *o += wj / total * vv;
                }
            }
        }
        out
    }

    fn encode_ids(&self, ids: &[usize], len_max: usize) -> Result<EncodedText, TextError> {
        if ids.is_empty() {
            return Err(TextError::EmptyCaption);
        }
        let (x, n) = self.embed_tokens(ids, len_max);
        let data = self.mix(&x, n, len_max);
        Ok(EncodedText {
            features: Tensor::new(data, &[len_max, self.config.channels]).expect("text feature shape"),
            length: n,
        })
    }

    /// `(S_tau, C)` features of one caption.
    pub fn encode_caption(&self, caption: &str) -> Result<EncodedText, TextError> {
        self.encode_ids(&self.vocab.tokenize(caption), self.config.max_tokens)
    }

    pub fn encode_global(&self, prompt: &str) -> Result<EncodedText, TextError> {
        self.encode_ids(&self.vocab.tokenize(prompt), self.config.global_max_tokens)
    }

    pub fn encode_condition(&self, cond: &GenerationCondition) -> Result<TextFeatureBatch, TextError> {
        let n = cond.instances.len();
        if n == 0 {
            return Err(TextError::NoInstances);
        }
        if n > self.config.max_instances {
            return Err(TextError::TooManyInstances {
                n,
                max: self.config.max_instances,
            });
        }
        let (s, c) = (self.config.max_tokens, self.config.channels);
        let mut data = Vec::with_capacity(n * s * c);
        let mut lengths = Vec::with_capacity(n);
        for (_, caption) in &cond.instances {
            let e = self.encode_caption(caption)?;
            data.extend_from_slice(e.features.data());
            lengths.push(e.length);
        }
        let g = self.encode_global(&cond.global_prompt)?;
        Ok(TextFeatureBatch {
            features: Tensor::new(data, &[1, n, s, c]).expect("batch shape"),
            lengths,
            global: g.features.reshape(&[1, self.config.global_max_tokens, c]).expect("global shape"),
            global_length: g.length,
        })
    }
}
