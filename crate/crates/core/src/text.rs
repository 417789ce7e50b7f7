//! Prompt composition, tokenization and the text encoder that turns a
//! prompt ensemble into one joint-space embedding per class.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Init, TransformerLayer};
use crate::numerics::{l2_normalize, AttentionConfig, Tensor, DEFAULT_NORM_EPS};
use crate::store::Checkpoint;

pub const STATE_SLOT: &str = "{state}";
pub const GOOD: &str = "good";

/// Class names of the synthetic benchmark, `good` first.
pub const DEFAULT_CLASSES: [&str; 7] = [
    "good",
    "bridge",
    "copper_residue",
    "hole",
    "infilm",
    "particle",
    "scratch",
];

/// Template-level prompts crossed with per-class state-level prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptLibrary {
    pub templates: Vec<String>,
    pub states: BTreeMap<String, Vec<String>>,
}

impl PromptLibrary {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("prompt library has no templates".into()));
        }
        for t in &self.templates {
            if t.matches(STATE_SLOT).count() != 1 {
                return Err(Error::Config(format!(
                    "template `{t}` must contain `{STATE_SLOT}` exactly once"
                )));
            }
        }
        if !self.states.contains_key(GOOD) {
            return Err(Error::Config("prompt library has no `good` class".into()));
        }
        if let Some((class, _)) = self.states.iter().find(|(_, s)| s.is_empty()) {
            return Err(Error::Config(format!(
                "class `{class}` has no state prompts"
            )));
        }
        Ok(())
    }

    /// Class order used for a run: `good` first, the rest sorted by name.
    pub fn classes(&self) -> Vec<String> {
        let mut out = vec![GOOD.to_string()];
        out.extend(self.states.keys().filter(|k| *k != GOOD).cloned());
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lib: Self = serde_json::from_str(text)?;
        lib.validate()?;
        Ok(lib)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Detailed prompts for the seven benchmark classes.
    pub fn default_sem() -> Self {
        let templates = [
            "a photo of the {state}",
            "a blurry photo of the {state}",
            "a dark photo of a {state}",
            "a bright sem photo of the {state}",
            "a low resolution photo of the {state}",
        ];
        let states: [(&str, &[&str]); 7] = [
            (
                "good",
                &[
                    "flawless wafer surface image",
                    "image of a clean patterned surface",
                    "image without any defect",
                ],
            ),
            (
                "bridge",
                &[
                    "image with a bridge connecting two lines",
                    "image with a short bar shorting adjacent lines",
                ],
            ),
            (
                "copper_residue",
                &[
                    "image with irregular copper residue",
                    "image with clustered residue blobs",
                ],
            ),
            (
                "hole",
                &[
                    "image with a dark round hole",
                    "image with a missing pattern pit",
                ],
            ),
            (
                "infilm",
                &[
                    "image with a faint particle embedded within the film",
                    "image with a low contrast infilm defect",
                ],
            ),
            (
                "particle",
                &[
                    "image with a bright particle",
                    "image with a round foreign particle",
                ],
            ),
            (
                "scratch",
                &[
                    "image with a linear scratch",
                    "image with fish scale-shaped scratches",
                ],
            ),
        ];
        Self {
            templates: templates.iter().map(|s| s.to_string()).collect(),
            states: states
                .iter()
                .map(|(c, s)| (c.to_string(), s.iter().map(|x| x.to_string()).collect()))
                .collect(),
        }
    }

    /// Coarse two-state prompts for `classes`: `good surface` for the good
    /// class and `defect` for every other class.
    pub fn generic(classes: &[String]) -> Self {
        Self {
            templates: vec!["a photo of a {state}".to_string()],
            states: classes
                .iter()
                .map(|c| {
                    let s = if c == GOOD { "good surface" } else { "defect" };
                    (c.clone(), vec![s.to_string()])
                })
                .collect(),
        }
    }
}

/// Every template with its slot filled by every state of `class_name`,
/// template-major.
pub fn compose_prompts(lib: &PromptLibrary, class_name: &str) -> Result<Vec<String>> {
    let states = lib
        .states
        .get(class_name)
        .ok_or_else(|| Error::UnknownClass(class_name.to_string()))?;
    Ok(lib
        .templates
        .iter()
        .flat_map(|t| states.iter().map(move |s| t.replacen(STATE_SLOT, s, 1)))
        .collect())
}

pub const CONTEXT_LEN: usize = 77;
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const RESERVED: u32 = 3;

/// Fixed-length token ids: `BOS words… EOS PAD…`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn eos_position(&self) -> usize {
        self.ids
            .iter()
            .position(|&t| t == EOS)
            .expect("token sequence always holds EOS")
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercases, splits on whitespace and punctuation, and hashes each word
/// into `[3, vocab_size)`.
pub fn tokenize(text: &str, vocab_size: usize) -> TokenSequence {
    assert!(vocab_size >= 256, "vocabulary must hold at least 256 ids");
    let lower = text.to_lowercase();
    let buckets = (vocab_size as u64) - RESERVED as u64;
    let mut ids = Vec::with_capacity(CONTEXT_LEN);
    ids.push(BOS);
    ids.extend(
        lower
            .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
            .filter(|w| !w.is_empty())
            .take(CONTEXT_LEN - 2)
            .map(|w| RESERVED + (fnv1a64(w.as_bytes()) % buckets) as u32),
    );
    ids.push(EOS);
    ids.resize(CONTEXT_LEN, PAD);
    TokenSequence { ids }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextConfig {
    pub vocab: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub context: usize,
    /// Joint image-text dimension `D`.
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab: 4096,
            width: 64,
            depth: 2,
            heads: 4,
            context: CONTEXT_LEN,
            embed_dim: 64,
            mlp_ratio: 4,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 256 {
            return Err(Error::Config("text vocabulary must be ≥ 256".into()));
        }
        if self.context != CONTEXT_LEN {
            return Err(Error::Config(format!("text context must be {CONTEXT_LEN}")));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be ≥ 1".into()));
        }
        AttentionConfig::new(self.width, self.heads)?;
        Ok(())
    }

    pub fn to_metadata(&self, meta: &mut BTreeMap<String, String>) {
        for (k, v) in [
            ("text.vocab", self.vocab),
            ("text.width", self.width),
            ("text.depth", self.depth),
            ("text.heads", self.heads),
            ("text.context", self.context),
            ("text.embed_dim", self.embed_dim),
            ("text.mlp_ratio", self.mlp_ratio),
        ] {
            meta.insert(k.to_string(), v.to_string());
        }
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks `{k}`")))?
                .parse()
                .map_err(|_| Error::Config(format!("metadata `{k}` is not an integer")))
        };
        let cfg = Self {
            vocab: get("text.vocab")?,
            width: get("text.width")?,
            depth: get("text.depth")?,
            heads: get("text.heads")?,
            context: get("text.context")?,
            embed_dim: get("text.embed_dim")?,
            mlp_ratio: get("text.mlp_ratio")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Causal pre-LN transformer over token embeddings; the EOS hidden state
/// is projected into the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub cfg: TextConfig,
    /// `[vocab × width]`
    pub token_embedding: Tensor,
    /// `[context × width]`
    pub pos: Tensor,
    pub layers: Vec<TransformerLayer>,
    /// `[width × embed_dim]`
    pub proj: Tensor,
}

impl TextEncoder {
    pub fn random(cfg: TextConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let token_embedding = init.normal(&[cfg.vocab, cfg.width], 1.0);
        let pos = init.normal(&[cfg.context, cfg.width], 0.1);
        let layers = (0..cfg.depth)
            .map(|_| TransformerLayer::random(&mut init, cfg.width, cfg.mlp_ratio, 0.2))
            .collect();
        let proj = init.normal(&[cfg.width, cfg.embed_dim], 1.0 / (cfg.width as f32).sqrt());
        Ok(Self {
            cfg,
            token_embedding,
            pos,
            layers,
            proj,
        })
    }

    pub fn export(&self, ckpt: &mut Checkpoint) {
        ckpt.insert("text.token_embedding", self.token_embedding.clone());
        ckpt.insert("text.pos", self.pos.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            layer.export(&format!("text.layer{}", i + 1), ckpt);
        }
        ckpt.insert("text.proj", self.proj.clone());
    }

    pub fn import(cfg: TextConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let token_embedding = ckpt.get("text.token_embedding")?.clone();
        let pos = ckpt.get("text.pos")?.clone();
        let proj = ckpt.get("text.proj")?.clone();
        if token_embedding.shape() != [cfg.vocab, cfg.width]
            || pos.shape() != [cfg.context, cfg.width]
            || proj.shape() != [cfg.width, cfg.embed_dim]
        {
            return Err(Error::Shape(
                "text encoder tensors disagree with config".into(),
            ));
        }
        let layers = (1..=cfg.depth)
            .map(|i| TransformerLayer::import(&format!("text.layer{i}"), ckpt))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            token_embedding,
            pos,
            layers,
            proj,
        })
    }

    fn encode_one(&self, seq: &TokenSequence) -> Result<Vec<f32>> {
        let w = self.cfg.width;
        // Causal masking means nothing after EOS can reach the EOS state.
        let len = seq.eos_position() + 1;
        let mut x = Vec::with_capacity(len * w);
        for (p, &id) in seq.ids[..len].iter().enumerate() {
            if id as usize >= self.cfg.vocab {
                return Err(Error::TokenOutOfVocab {
                    id,
                    vocab: self.cfg.vocab,
                });
            }
            let e = self.token_embedding.row(id as usize);
            x.extend(e.iter().zip(self.pos.row(p)).map(|(a, b)| a + b));
        }
        let mut x = Tensor::new(vec![len, w], x)?;
        let attn = AttentionConfig::new(w, self.cfg.heads)?;
        for layer in &self.layers {
            x = layer.forward(&x, attn, true)?;
        }
        let eos = Tensor::new(vec![1, w], x.row(len - 1).to_vec())?;
        Ok(eos.matmul(&self.proj)?.into_data())
    }

    /// `[|tokens| × D]`, rows L2-normalized.
    pub fn encode_text(&self, tokens: &[TokenSequence]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Data("no token sequences to encode".into()));
        }
        let d = self.cfg.embed_dim;
        let mut rows = Vec::with_capacity(tokens.len() * d);
        for seq in tokens {
            rows.extend(self.encode_one(seq)?);
        }
        l2_normalize(
            &Tensor::new(vec![tokens.len(), d], rows)?,
            1,
            DEFAULT_NORM_EPS,
        )
    }
}

/// One unit-norm embedding per class, rows ordered as `class_names`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingSet {
    pub class_names: Vec<String>,
    pub embeddings: Tensor,
}

impl TextEmbeddingSet {
    pub fn new(class_names: Vec<String>, embeddings: Tensor) -> Result<Self> {
        if class_names.len() < 2 || embeddings.rank() != 2 || embeddings.rows() != class_names.len()
        {
            return Err(Error::Shape(format!(
                "{} classes with embeddings {:?}",
                class_names.len(),
                embeddings.shape()
            )));
        }
        let embeddings = l2_normalize(&embeddings, 1, DEFAULT_NORM_EPS)?;
        Ok(Self {
            class_names,
            embeddings,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn good_index(&self) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == GOOD)
            .ok_or_else(|| Error::UnknownClass(GOOD.into()))
    }

    pub fn index_of(&self, class: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::UnknownClass(class.into()))
    }
}

/// Per class: mean of the prompt-ensemble embeddings, renormalized.
pub fn build_class_embeddings(
    lib: &PromptLibrary,
    classes: &[String],
    encoder: &TextEncoder,
) -> Result<TextEmbeddingSet> {
    if classes.is_empty() || !classes.iter().any(|c| c == GOOD) {
        return Err(Error::Config("class list must contain `good`".into()));
    }
    let d = encoder.cfg.embed_dim;
    let mut rows = Vec::with_capacity(classes.len() * d);
    for class in classes {
        let tokens: Vec<TokenSequence> = compose_prompts(lib, class)?
            .iter()
            .map(|p| tokenize(p, encoder.cfg.vocab))
            .collect();
        let emb = encoder.encode_text(&tokens)?;
        let mut mean = vec![0.0f32; d];
        for r in 0..emb.rows() {
            for (m, v) in mean.iter_mut().zip(emb.row(r)) {
                *m += v;
            }
        }
        let n = emb.rows() as f32;
        rows.extend(mean.into_iter().map(|m| m / n));
    }
    TextEmbeddingSet::new(classes.to_vec(), Tensor::new(vec![classes.len(), d], rows)?)
}
