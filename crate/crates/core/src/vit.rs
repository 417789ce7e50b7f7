//! Dual-path vision transformer.
//!
//! The backbone is `m` encoding blocks of `n` layers each. Every layer runs
//! the ordinary pre-LN transformer update on the vanilla stream and, as a
//! side branch, value-value attention on the same normalized input. The
//! side branch never feeds back into the vanilla stream.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::layers::{Init, Linear, TransformerLayer};
use crate::numerics::{attention, AttentionConfig, Tensor};
use crate::store::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    /// Encoding blocks (`m`).
    pub blocks: usize,
    /// Dual-path layers per encoding block (`n`).
    pub layers_per_block: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            width: 64,
            heads: 4,
            blocks: 4,
            layers_per_block: 3,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.blocks == 0 || self.layers_per_block == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "blocks, layers and mlp ratio must be ≥ 1".into(),
            ));
        }
        AttentionConfig::new(self.width, self.heads)?;
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens, excluding CLS.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn depth(&self) -> usize {
        self.blocks * self.layers_per_block
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.width, self.heads).expect("validated config")
    }

    pub fn to_metadata(&self, meta: &mut BTreeMap<String, String>) {
        for (k, v) in [
            ("vit.image_size", self.image_size),
            ("vit.patch_size", self.patch_size),
            ("vit.width", self.width),
            ("vit.heads", self.heads),
            ("vit.blocks", self.blocks),
            ("vit.layers_per_block", self.layers_per_block),
            ("vit.mlp_ratio", self.mlp_ratio),
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
            image_size: get("vit.image_size")?,
            patch_size: get("vit.patch_size")?,
            width: get("vit.width")?,
            heads: get("vit.heads")?,
            blocks: get("vit.blocks")?,
            layers_per_block: get("vit.layers_per_block")?,
            mlp_ratio: get("vit.mlp_ratio")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Value and output projections of the V-V branch.
#[derive(Clone, Debug, PartialEq)]
pub struct VvvProjection {
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualPathLayer {
    pub qkv: TransformerLayer,
    /// Absent until weight surgery has been applied.
    pub vvv: Option<VvvProjection>,
}

impl DualPathLayer {
    /// Returns `(f_out, v_out)`: the updated vanilla stream and the V-V
    /// branch output for input `x`.
    pub fn forward(&self, x: &Tensor, cfg: AttentionConfig) -> Result<(Tensor, Tensor)> {
        let vvv = self
            .vvv
            .as_ref()
            .ok_or_else(|| Error::MissingTensor("vvv projections (run surgery first)".into()))?;
        let normed = self.qkv.ln1.forward(x)?;
        let f_out = self.qkv.forward_with_normed(x, &normed, cfg, false)?;
        let v = vvv.v.forward(&normed)?;
        let v_out = vvv.out.forward(&attention(&v, &v, &v, cfg)?)?;
        Ok((f_out, v_out))
    }
}

/// One feature level: vanilla stream `F_j` and accumulated V-V stream `V_j`,
/// both `[(T+1) × C]` with CLS at row 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelEmbeddings {
    pub f: Tensor,
    pub v: Tensor,
}

impl LevelEmbeddings {
    pub fn patch_f(&self) -> Result<Tensor> {
        self.f.slice_rows(1, self.f.rows())
    }

    pub fn patch_v(&self) -> Result<Tensor> {
        self.v.slice_rows(1, self.v.rows())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub levels: Vec<LevelEmbeddings>,
    pub cls: Vec<Tensor>,
}

impl EncodedImage {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Keeps only the deepest level.
    pub fn last_level_only(&self) -> Self {
        Self {
            levels: self.levels.last().cloned().into_iter().collect(),
            cls: self.cls.last().cloned().into_iter().collect(),
        }
    }

    /// Concatenated CLS vectors `[f_1^CLS … f_m^CLS]`.
    pub fn cls_concat(&self) -> Vec<f32> {
        self.cls
            .iter()
            .flat_map(|c| c.data().iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionTransformer {
    pub cfg: VitConfig,
    /// `[P² × C]` patch projection.
    pub patch: Linear,
    pub cls_token: Tensor,
    /// `[(T+1) × C]` learned positions.
    pub pos: Tensor,
    /// `blocks[j][i]` is layer `i` of encoding block `j` (0-based).
    pub blocks: Vec<Vec<DualPathLayer>>,
}

const LAYER_STD: f32 = 0.1;

/// Random patch projection whose response is centred on mid-grey input.
/// Equivalent to projecting `(x − 0.5) / 0.25` with unit-fan-in weights and a
/// unit-variance bias, so the stem needs no separate pixel normalization.
fn centered_patch_projection(init: &mut Init, p2: usize, width: usize) -> Linear {
    let mut patch = Linear::random(init, p2, width, 1.0 / (p2 as f32).sqrt());
    let mut bias = init.normal(&[width], 1.0);
    for (i, b) in bias.data_mut().iter_mut().enumerate() {
        let col: f32 = (0..p2).map(|r| patch.weight.data()[r * width + i]).sum();
        *b -= 2.0 * col;
    }
    patch.weight = patch.weight.scale(4.0);
    patch.bias = bias;
    patch
}

impl VisionTransformer {
    /// Seeded random QKV weights; the V-V branch is left empty for surgery.
    pub fn random(cfg: VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let p2 = cfg.patch_size * cfg.patch_size;
        let patch = centered_patch_projection(&mut init, p2, cfg.width);
        let cls_token = init.normal(&[cfg.width], 0.02);
        let pos = init.normal(&[cfg.tokens() + 1, cfg.width], 0.02);
        let blocks = (0..cfg.blocks)
            .map(|_| {
                (0..cfg.layers_per_block)
                    .map(|_| DualPathLayer {
                        qkv: TransformerLayer::random(
                            &mut init,
                            cfg.width,
                            cfg.mlp_ratio,
                            LAYER_STD,
                        ),
                        vvv: None,
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg,
            patch,
            cls_token,
            pos,
            blocks,
        })
    }

    pub fn export(&self, ckpt: &mut Checkpoint) {
        self.patch.export("vision.patch", ckpt);
        ckpt.insert("vision.cls", self.cls_token.clone());
        ckpt.insert("vision.pos", self.pos.clone());
        for (j, block) in self.blocks.iter().enumerate() {
            for (i, layer) in block.iter().enumerate() {
                let prefix = format!("vision.block{}.layer{}", j + 1, i + 1);
                layer.qkv.export(&prefix, ckpt);
                if let Some(vvv) = &layer.vvv {
                    vvv.v.export(&format!("{prefix}.vvv.v"), ckpt);
                    vvv.out.export(&format!("{prefix}.vvv.out"), ckpt);
                }
            }
        }
    }

    /// Reads the backbone from `ckpt`; V-V projections are loaded when present.
    pub fn import(cfg: VitConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let patch = Linear::import("vision.patch", ckpt)?;
        let p2 = cfg.patch_size * cfg.patch_size;
        if patch.weight.shape() != [p2, cfg.width] {
            return shape_err(format!(
                "vision.patch.weight is {:?}, config wants [{p2}, {}]",
                patch.weight.shape(),
                cfg.width
            ));
        }
        let cls_token = ckpt.get("vision.cls")?.clone();
        let pos = ckpt.get("vision.pos")?.clone();
        if pos.shape() != [cfg.tokens() + 1, cfg.width] {
            return shape_err(format!("vision.pos is {:?}", pos.shape()));
        }
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for j in 1..=cfg.blocks {
            let mut layers = Vec::with_capacity(cfg.layers_per_block);
            for i in 1..=cfg.layers_per_block {
                let prefix = format!("vision.block{j}.layer{i}");
                let qkv = TransformerLayer::import(&prefix, ckpt)?;
                let vvv = match (
                    Linear::import(&format!("{prefix}.vvv.v"), ckpt),
                    Linear::import(&format!("{prefix}.vvv.out"), ckpt),
                ) {
                    (Ok(v), Ok(out)) => Some(VvvProjection { v, out }),
                    _ => None,
                };
                layers.push(DualPathLayer { qkv, vvv });
            }
            blocks.push(layers);
        }
        Ok(Self {
            cfg,
            patch,
            cls_token,
            pos,
            blocks,
        })
    }

    /// Flattens non-overlapping patches, projects them, prepends CLS and
    /// adds positions: `[H × W] → [(T+1) × C]`.
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let cfg = &self.cfg;
        let s = cfg.image_size;
        if image.shape() != [s, s] {
            return shape_err(format!(
                "image is {:?}, model expects [{s}, {s}]",
                image.shape()
            ));
        }
        let p = cfg.patch_size;
        let g = cfg.grid();
        let mut patches = Vec::with_capacity(g * g * p * p);
        for gy in 0..g {
            for gx in 0..g {
                for y in 0..p {
                    let row = image.row(gy * p + y);
                    patches.extend_from_slice(&row[gx * p..gx * p + p]);
                }
            }
        }
        let patches = Tensor::new(vec![g * g, p * p], patches)?;
        let projected = self.patch.forward(&patches)?;
        let mut tokens = Vec::with_capacity((g * g + 1) * cfg.width);
        tokens.extend_from_slice(self.cls_token.data());
        tokens.extend_from_slice(projected.data());
        Tensor::new(vec![g * g + 1, cfg.width], tokens)?.add(&self.pos)
    }

    /// Full dual-path forward pass.
    pub fn encode_image(&self, image: &Tensor) -> Result<EncodedImage> {
        let attn = self.cfg.attention();
        let mut x = self.patch_embed(image)?;
        let mut levels = Vec::with_capacity(self.cfg.blocks);
        for block in &self.blocks {
            let mut v_sum: Option<Tensor> = None;
            for layer in block {
                let (f_out, v_out) = layer.forward(&x, attn)?;
                match v_sum.as_mut() {
                    Some(acc) => acc.add_assign(&v_out)?,
                    None => v_sum = Some(v_out),
                }
                x = f_out;
            }
            levels.push(LevelEmbeddings {
                f: x.clone(),
                v: v_sum.expect("block has at least one layer"),
            });
        }
        let cls = levels
            .iter()
            .map(|l| Tensor::from_vec(l.f.row(0).to_vec()))
            .collect();
        Ok(EncodedImage { levels, cls })
    }

    /// Vanilla-stream levels `F_1 … F_m` without evaluating the V-V branch.
    pub fn vanilla_levels(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let attn = self.cfg.attention();
        let mut x = self.patch_embed(image)?;
        let mut out = Vec::with_capacity(self.cfg.blocks);
        for block in &self.blocks {
            for layer in block {
                x = layer.qkv.forward(&x, attn, false)?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Applies weight surgery to an in-memory backbone.
pub fn copy_qkv_to_vvv(vit: &mut VisionTransformer) {
    for layer in vit.blocks.iter_mut().flatten() {
        layer.vvv = Some(VvvProjection {
            v: layer.qkv.v.clone(),
            out: layer.qkv.out.clone(),
        });
    }
}
