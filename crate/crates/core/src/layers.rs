//! Parameter containers shared by the vision and text transformers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{
    attention, causal_attention, gelu, layer_norm, AttentionConfig, Tensor, DEFAULT_LN_EPS,
};
use crate::store::Checkpoint;

/// Seeded normal initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = dist.sample(&mut self.rng);
        }
        t
    }
}

/// `y = x · weight + bias`, `weight: [in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.affine(&self.weight, &self.bias)
    }

    pub fn random(init: &mut Init, fan_in: usize, fan_out: usize, std: f32) -> Self {
        Self {
            weight: init.normal(&[fan_in, fan_out], std),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub(crate) fn export(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.insert(format!("{prefix}.weight"), self.weight.clone());
        ckpt.insert(format!("{prefix}.bias"), self.bias.clone());
    }

    pub(crate) fn import(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            weight: ckpt.get(&format!("{prefix}.weight"))?.clone(),
            bias: ckpt.get(&format!("{prefix}.bias"))?.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, DEFAULT_LN_EPS)
    }

    pub(crate) fn export(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.insert(format!("{prefix}.gamma"), self.gamma.clone());
        ckpt.insert(format!("{prefix}.beta"), self.beta.clone());
    }

    pub(crate) fn import(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            gamma: ckpt.get(&format!("{prefix}.gamma"))?.clone(),
            beta: ckpt.get(&format!("{prefix}.beta"))?.clone(),
        })
    }
}

/// Pre-LN transformer layer: `x + MHSA(LN1(x))`, then `+ MLP(LN2(·))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerLayer {
    pub fn random(init: &mut Init, width: usize, mlp_ratio: usize, std: f32) -> Self {
        let hidden = width * mlp_ratio;
        Self {
            ln1: LayerNormParams::identity(width),
            q: Linear::random(init, width, width, std),
            k: Linear::random(init, width, width, std),
            v: Linear::random(init, width, width, std),
            out: Linear::random(init, width, width, std),
            ln2: LayerNormParams::identity(width),
            fc1: Linear::random(init, width, hidden, std),
            fc2: Linear::random(init, hidden, width, std),
        }
    }

    /// Attention sub-layer output (before the residual add) on `LN1(x)`.
    pub fn attention_branch(
        &self,
        normed: &Tensor,
        cfg: AttentionConfig,
        causal: bool,
    ) -> Result<Tensor> {
        let q = self.q.forward(normed)?;
        let k = self.k.forward(normed)?;
        let v = self.v.forward(normed)?;
        let a = if causal {
            causal_attention(&q, &k, &v, cfg)?
        } else {
            attention(&q, &k, &v, cfg)?
        };
        self.out.forward(&a)
    }

    pub fn mlp_branch(&self, x: &Tensor) -> Result<Tensor> {
        let h = gelu(&self.fc1.forward(&self.ln2.forward(x)?)?);
        self.fc2.forward(&h)
    }

    pub fn forward(&self, x: &Tensor, cfg: AttentionConfig, causal: bool) -> Result<Tensor> {
        let normed = self.ln1.forward(x)?;
        self.forward_with_normed(x, &normed, cfg, causal)
    }

    /// Same as [`forward`](Self::forward) with `LN1(x)` supplied by the caller.
    pub(crate) fn forward_with_normed(
        &self,
        x: &Tensor,
        normed: &Tensor,
        cfg: AttentionConfig,
        causal: bool,
    ) -> Result<Tensor> {
        let mut h = x.add(&self.attention_branch(normed, cfg, causal)?)?;
        let mlp = self.mlp_branch(&h)?;
        h.add_assign(&mlp)?;
        Ok(h)
    }

    pub(crate) fn export(&self, prefix: &str, ckpt: &mut Checkpoint) {
        self.ln1.export(&format!("{prefix}.ln1"), ckpt);
        self.q.export(&format!("{prefix}.qkv.q"), ckpt);
        self.k.export(&format!("{prefix}.qkv.k"), ckpt);
        self.v.export(&format!("{prefix}.qkv.v"), ckpt);
        self.out.export(&format!("{prefix}.qkv.out"), ckpt);
        self.ln2.export(&format!("{prefix}.ln2"), ckpt);
        self.fc1.export(&format!("{prefix}.mlp.fc1"), ckpt);
        self.fc2.export(&format!("{prefix}.mlp.fc2"), ckpt);
    }

    pub(crate) fn import(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            ln1: LayerNormParams::import(&format!("{prefix}.ln1"), ckpt)?,
            q: Linear::import(&format!("{prefix}.qkv.q"), ckpt)?,
            k: Linear::import(&format!("{prefix}.qkv.k"), ckpt)?,
            v: Linear::import(&format!("{prefix}.qkv.v"), ckpt)?,
            out: Linear::import(&format!("{prefix}.qkv.out"), ckpt)?,
            ln2: LayerNormParams::import(&format!("{prefix}.ln2"), ckpt)?,
            fc1: Linear::import(&format!("{prefix}.mlp.fc1"), ckpt)?,
            fc2: Linear::import(&format!("{prefix}.mlp.fc2"), ckpt)?,
        })
    }
}
