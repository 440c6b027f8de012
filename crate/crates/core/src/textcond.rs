//! Closed-vocabulary tokenizer, the trainable prompt encoder and the
//! positive/negative prompt bundles used for guidance.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layerspace::BACKGROUND_PROMPT;
use crate::nn::{Attention, FeedForward, Init, InitKind, LayerNorm};

pub const PAD: &str = "<pad>";
pub const EMPTY: &str = "<empty>";
pub const UNK: &str = "<unk>";

/// Separator used when prompts are concatenated.
pub const PROMPT_SEPARATOR: &str = ", ";

/// Words of the synthetic caption grammar, the style suffixes and glue words.
const GRAMMAR_WORDS: &[&str] = &[
    ",", "a", "an", "the", "background", "with", "and", "in", "style", "of", "on",
    // colors
    "red", "blue", "green", "yellow", "gray", "white", "purple", "orange", "black", "pink",
    // shapes
    "circle", "square", "triangle", "star",
    // textures
    "plain", "gradient", "stripes", "striped", "checker", "checkered",
    // style words
    "watercolor", "neon", "pastel", "sketch", "dark", "bright", "vintage", "pixel", "art",
    "glowing", "faded", "inverted",
    // sizes and positions
    "small", "large", "big", "tiny", "left", "right", "top", "bottom", "center",
];

/// Token → id map. Ids are dense from 0; `PAD`, `EMPTY` and `UNK` come first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    tokens: BTreeMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_words(GRAMMAR_WORDS.iter().copied())
    }
}

impl Vocabulary {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens = BTreeMap::new();
        for special in [PAD, EMPTY, UNK] {
            let id = tokens.len() as u32;
            tokens.insert(special.to_string(), id);
        }
        for w in words {
            if !tokens.contains_key(w) {
                let id = tokens.len() as u32;
                tokens.insert(w.to_string(), id);
            }
        }
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.tokens.get(token).copied()
    }

    fn special(&self, token: &str) -> u32 {
        self.tokens[token]
    }

    /// Lowercases, splits on whitespace, and keeps commas as their own token.
    pub fn tokenize(text: &str) -> Vec<String> {
        text.to_lowercase()
            .replace(',', " , ")
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }

    /// Token ids padded or truncated to `max_len`. The empty prompt becomes
    /// `[EMPTY, PAD, …]`.
    pub fn encode_ids(&self, text: &str, max_len: usize) -> Vec<u32> {
        let pad = self.special(PAD);
        let unk = self.special(UNK);
        let words = Self::tokenize(text);
        let mut ids: Vec<u32> = if words.is_empty() {
            vec![self.special(EMPTY)]
        } else {
            words
                .iter()
                .map(|w| self.tokens.get(w).copied().unwrap_or(unk))
                .collect()
        };
        ids.truncate(max_len);
        ids.resize(max_len, pad);
        ids
    }

    /// Checks ids are dense and the special tokens are present.
    pub fn validate(&self) -> Result<()> {
        for s in [PAD, EMPTY, UNK] {
            if !self.tokens.contains_key(s) {
                return Err(Error::Invalid(format!("vocabulary lacks {s}")));
            }
        }
        let mut ids: Vec<u32> = self.tokens.values().copied().collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| id as usize != i) {
            return Err(Error::Invalid("vocabulary ids are not dense from 0".into()));
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Self = serde_json::from_str(&s)?;
        v.validate()?;
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            max_len: 16,
            dim: 128,
            layers: 2,
            heads: 4,
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ff: FeedForward,
}

/// Token + position embedding followed by a small pre-norm transformer.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab: Vocabulary,
    config: TextEncoderConfig,
    token_embedding: Tensor,
    position_embedding: Tensor,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

impl TextEncoder {
    pub fn new(init: &mut Init, vocab: Vocabulary, config: TextEncoderConfig) -> Result<Self> {
        vocab.validate()?;
        let token_embedding =
            init.tensor("token_embedding", &[vocab.len(), config.dim], InitKind::Normal(0.02))?;
        let position_embedding = init.tensor(
            "position_embedding",
            &[config.max_len, config.dim],
            InitKind::Normal(0.01),
        )?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let mut li = init.pp(format!("layers.{i}"));
            layers.push(EncoderLayer {
                norm1: LayerNorm::new(&mut li.pp("norm1"), config.dim)?,
                attn: Attention::new(&mut li.pp("attn"), config.dim, config.dim, config.heads, false)?,
                norm2: LayerNorm::new(&mut li.pp("norm2"), config.dim)?,
                ff: FeedForward::new(&mut li.pp("ff"), config.dim, false)?,
            });
        }
        let final_norm = LayerNorm::new(&mut init.pp("final_norm"), config.dim)?;
        Ok(Self {
            vocab,
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.token_embedding.dtype()
    }

    pub fn device(&self) -> &Device {
        self.token_embedding.device()
    }

    /// Encodes a batch of prompts into `(N, max_len, dim)`.
    pub fn encode_batch(&self, texts: &[&str]) -> Result<Tensor> {
        if texts.is_empty() {
            return Err(Error::Invalid("no prompts to encode".into()));
        }
        let l = self.config.max_len;
        let ids: Vec<u32> = texts
            .iter()
            .flat_map(|t| self.vocab.encode_ids(t, l))
            .collect();
        let ids = Tensor::from_vec(ids, texts.len() * l, self.device())?;
        let mut h = self
            .token_embedding
            .index_select(&ids, 0)?
            .reshape((texts.len(), l, self.config.dim))?
            .broadcast_add(&self.position_embedding.unsqueeze(0)?)?;
        for layer in &self.layers {
            let a = layer.attn.forward(&layer.norm1.forward(&h)?, None)?;
            h = (h + a)?;
            let f = layer.ff.forward(&layer.norm2.forward(&h)?)?;
            h = (h + f)?;
        }
        self.final_norm.forward(&h)
    }

    /// Encodes a single prompt into `(max_len, dim)`.
    pub fn encode_prompt(&self, text: &str) -> Result<Tensor> {
        Ok(self.encode_batch(&[text])?.squeeze(0)?)
    }
}

/// Global prompt plus per-layer prompts, background first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTexts {
    pub global: String,
    pub layers: Vec<String>,
}

impl PromptTexts {
    pub fn new(global: impl Into<String>, layers: Vec<String>) -> Self {
        Self {
            global: global.into(),
            layers,
        }
    }
}

/// Positive prompts plus the negatives that stand in for the unconditional
/// branch of classifier-free guidance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub positive: PromptTexts,
    pub negative: PromptTexts,
}

impl PromptBundle {
    /// Builds the bundle, deriving negatives from the foreground prompts.
    pub fn new(global: impl Into<String>, layers: Vec<String>) -> Result<Self> {
        let positive = PromptTexts::new(global, layers);
        let negative = build_negative_bundle(&positive.layers)?;
        Ok(Self { positive, negative })
    }

    pub fn num_layers(&self) -> usize {
        self.positive.layers.len()
    }
}

/// Negative prompts: the joined foreground prompts serve as the negative
/// global prompt and as the background layer's negative, and every
/// foreground layer gets `"the background"`.
pub fn build_negative_bundle(layer_prompts: &[String]) -> Result<PromptTexts> {
    if layer_prompts.len() < 2 {
        return Err(Error::Invalid(
            "negative prompts need a background and at least one foreground prompt".into(),
        ));
    }
    let joined = layer_prompts[1..].join(PROMPT_SEPARATOR);
    let mut layers = Vec::with_capacity(layer_prompts.len());
    layers.push(joined.clone());
    layers.extend(std::iter::repeat_n(
        BACKGROUND_PROMPT.to_string(),
        layer_prompts.len() - 1,
    ));
    Ok(PromptTexts {
        global: joined,
        layers,
    })
}

/// Outcome of the two condition-dropout coin flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropDecision {
    pub global: bool,
    pub layers: bool,
}

impl DropDecision {
    pub fn draw<R: Rng + ?Sized>(p_drop: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_drop) {
            return Err(Error::Invalid(format!("drop probability {p_drop} outside [0, 1]")));
        }
        Ok(Self {
            global: rng.random_bool(p_drop),
            layers: rng.random_bool(p_drop),
        })
    }

    /// Replaces dropped conditions with the empty prompt, whose encoding is
    /// the `EMPTY` token row.
    pub fn apply(&self, texts: &PromptTexts) -> PromptTexts {
        PromptTexts {
            global: if self.global {
                String::new()
            } else {
                texts.global.clone()
            },
            layers: if self.layers {
                vec![String::new(); texts.layers.len()]
            } else {
                texts.layers.clone()
            },
        }
    }
}

/// Drops the global condition and, independently, the whole group of layer
/// conditions, each with probability `p_drop`.
pub fn drop_conditions<R: Rng + ?Sized>(
    texts: &PromptTexts,
    p_drop: f64,
    rng: &mut R,
) -> Result<(PromptTexts, DropDecision)> {
    let d = DropDecision::draw(p_drop, rng)?;
    Ok((d.apply(texts), d))
}
