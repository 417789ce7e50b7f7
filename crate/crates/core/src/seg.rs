//! Pixel-level defect maps from the two feature streams.
//!
//! The vanilla stream goes through a trainable per-level linear map and is
//! compared to the class text embeddings by cosine similarity. The V-V
//! stream is compared after subtracting the class-mean of the multiplied
//! image-text feature, which cancels activations shared by all prompts.
//! Both paths produce a softmax over classes per token; the fused map sums
//! them over levels and paths.

use crate::error::{shape_err, Error, Result};
use crate::layers::{Init, Linear};
use crate::numerics::{cosine_similarity, l2_normalize, softmax, Tensor, DEFAULT_NORM_EPS};
use crate::store::Checkpoint;
use crate::text::TextEmbeddingSet;
use crate::vit::EncodedImage;

pub const DEFAULT_TAU: f32 = 0.07;

/// Per-level `C → D` linear maps into the joint embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformationLayer {
    pub levels: Vec<Linear>,
    pub trainable: bool,
}

impl TransformationLayer {
    /// `W_j = I + N(0, 0.01²)`, `b_j = 0`. When `C ≠ D` the identity is
    /// the rectangular one.
    pub fn init(levels: usize, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut init = Init::new(seed);
        let levels = (0..levels)
            .map(|_| {
                let mut weight = init.normal(&[in_dim, out_dim], 0.01);
                for i in 0..in_dim.min(out_dim) {
                    weight.data_mut()[i * out_dim + i] += 1.0;
                }
                Linear {
                    weight,
                    bias: Tensor::zeros(&[out_dim]),
                }
            })
            .collect();
        Self {
            levels,
            trainable: true,
        }
    }

    /// Exact identity maps, used when the transformation is ablated.
    pub fn identity(levels: usize, dim: usize) -> Self {
        Self {
            levels: (0..levels)
                .map(|_| Linear {
                    weight: Tensor::identity(dim),
                    bias: Tensor::zeros(&[dim]),
                })
                .collect(),
            trainable: false,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn export(&self, ckpt: &mut Checkpoint) {
        for (j, l) in self.levels.iter().enumerate() {
            l.export(&format!("seg.transform.{}", j + 1), ckpt);
        }
    }

    pub fn import(levels: usize, ckpt: &Checkpoint) -> Result<Self> {
        let levels = (1..=levels)
            .map(|j| Linear::import(&format!("seg.transform.{j}"), ckpt))
            .collect::<Result<_>>()?;
        Ok(Self {
            levels,
            trainable: true,
        })
    }
}

/// `F_j' = F_j[1:] · W_j + b_j` for every level.
pub fn apply_transformation(enc: &EncodedImage, tl: &TransformationLayer) -> Result<Vec<Tensor>> {
    if enc.num_levels() != tl.num_levels() {
        return shape_err(format!(
            "{} feature levels but {} transformation levels",
            enc.num_levels(),
            tl.num_levels()
        ));
    }
    enc.levels
        .iter()
        .zip(&tl.levels)
        .map(|(level, lin)| {
            let patches = level.patch_f()?;
            if lin.weight.shape()[0] != patches.cols() {
                return shape_err(format!(
                    "transformation expects width {}, features have {}",
                    lin.weight.shape()[0],
                    patches.cols()
                ));
            }
            lin.forward(&patches)
        })
        .collect()
}

/// Cosine similarity of every token row against every class embedding:
/// `[T × D] , [N × D] → [T × N]`.
pub fn similarity_matrix(tokens: &Tensor, t: &TextEmbeddingSet) -> Result<Tensor> {
    if tokens.cols() != t.dim() {
        return shape_err(format!(
            "token width {} vs text dimension {}",
            tokens.cols(),
            t.dim()
        ));
    }
    let n = t.num_classes();
    let mut out = Vec::with_capacity(tokens.rows() * n);
    for r in 0..tokens.rows() {
        for c in 0..n {
            out.push(cosine_similarity(tokens.row(r), t.embeddings.row(c))?);
        }
    }
    Tensor::new(vec![tokens.rows(), n], out)
}

fn sum_levels(maps: &[Tensor]) -> Result<Tensor> {
    let mut iter = maps.iter();
    let mut acc = iter
        .next()
        .ok_or_else(|| Error::Shape("no feature levels".into()))?
        .clone();
    for m in iter {
        acc.add_assign(m)?;
    }
    Ok(acc)
}

/// Vanilla-path maps: per level `softmax(cos(F_j', t) / τ)` over classes,
/// and their sum over levels.
pub fn defect_map_f(
    f_primes: &[Tensor],
    t: &TextEmbeddingSet,
    tau: f32,
) -> Result<(Vec<Tensor>, Tensor)> {
    let per_level = f_primes
        .iter()
        .map(|f| softmax(&similarity_matrix(f, t)?.scale(1.0 / tau), 1))
        .collect::<Result<Vec<_>>>()?;
    let total = sum_levels(&per_level)?;
    Ok((per_level, total))
}

/// Pre-softmax V-path scores for one level: the multiplied feature minus
/// its class-mean, summed over channels. `[T × C] → [T × N]`.
pub fn v_path_scores(v_patches: &Tensor, t: &TextEmbeddingSet) -> Result<Tensor> {
    if v_patches.cols() != t.dim() {
        return shape_err(format!(
            "V-path width {} must equal the joint dimension {}",
            v_patches.cols(),
            t.dim()
        ));
    }
    let v = l2_normalize(v_patches, 1, DEFAULT_NORM_EPS)?;
    let n = t.num_classes();
    let d = t.dim();
    let mut multiplied = vec![0.0f32; n * d];
    let mut redundant = vec![0.0f32; d];
    let mut out = Vec::with_capacity(v.rows() * n);
    for r in 0..v.rows() {
        let row = v.row(r);
        redundant.iter_mut().for_each(|x| *x = 0.0);
        for c in 0..n {
            let tc = t.embeddings.row(c);
            let m = &mut multiplied[c * d..(c + 1) * d];
            for k in 0..d {
                m[k] = row[k] * tc[k];
                redundant[k] += m[k];
            }
        }
        redundant.iter_mut().for_each(|x| *x /= n as f32);
        for c in 0..n {
            let m = &multiplied[c * d..(c + 1) * d];
            out.push(m.iter().zip(&redundant).map(|(a, b)| a - b).sum());
        }
    }
    Tensor::new(vec![v.rows(), n], out)
}

/// V-path maps: per level `softmax(S_j / τ)` and their sum over levels.
pub fn defect_map_v(
    enc: &EncodedImage,
    t: &TextEmbeddingSet,
    tau: f32,
) -> Result<(Vec<Tensor>, Tensor)> {
    let per_level = enc
        .levels
        .iter()
        .map(|l| softmax(&v_path_scores(&l.patch_v()?, t)?.scale(1.0 / tau), 1))
        .collect::<Result<Vec<_>>>()?;
    let total = sum_levels(&per_level)?;
    Ok((per_level, total))
}

/// `A = A^F + A^V` and the per-token anomaly score: the fraction of each
/// row's mass that falls outside the good class. Every row of `A` sums to
/// `2m`, so this is the non-good mass divided by `2m`.
pub fn fuse_maps(a_f: &Tensor, a_v: &Tensor, good_index: usize) -> Result<(Tensor, Tensor)> {
    if a_f.shape() != a_v.shape() || a_f.rank() != 2 {
        return shape_err(format!("fuse {:?} + {:?}", a_f.shape(), a_v.shape()));
    }
    if good_index >= a_f.cols() {
        return shape_err(format!(
            "good index {good_index} for {} classes",
            a_f.cols()
        ));
    }
    let a = a_f.add(a_v)?;
    let grid = (0..a.rows())
        .map(|r| {
            let row = a.row(r);
            let total: f32 = row.iter().sum();
            if total <= 0.0 {
                return 0.0;
            }
            ((total - row[good_index]) / total).clamp(0.0, 1.0)
        })
        .collect();
    Ok((a, Tensor::from_vec(grid)))
}

/// Bilinear resize of a square `√T × √T` grid to `size × size`, sampling at
/// pixel centres and clamping at the border.
pub fn upsample_to_pixels(grid: &Tensor, size: usize) -> Result<Tensor> {
    let t = grid.len();
    let g = (t as f64).sqrt().round() as usize;
    if g * g != t {
        return shape_err(format!("grid of {t} tokens is not square"));
    }
    if size == 0 {
        return shape_err("output size must be ≥ 1");
    }
    let src = grid.data();
    let scale = g as f32 / size as f32;
    let coord = |i: usize| -> (usize, usize, f32) {
        let x = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (g - 1) as f32);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(g - 1);
        (lo, hi, x - lo as f32)
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, fy) = coord(y);
        for x in 0..size {
            let (x0, x1, fx) = coord(x);
            let top = src[y0 * g + x0] * (1.0 - fx) + src[y0 * g + x1] * fx;
            let bottom = src[y1 * g + x0] * (1.0 - fx) + src[y1 * g + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    let (lo, hi) = src
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    for v in &mut out {
        *v = v.clamp(lo, hi);
    }
    Tensor::new(vec![size, size], out)
}

/// Everything the segmentation path produces for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DefectMap {
    pub per_level_f: Vec<Tensor>,
    pub per_level_v: Vec<Tensor>,
    pub class_map: Tensor,
    pub fused_grid: Tensor,
    pub fused_pixels: Tensor,
}

/// Runs both paths, fuses them and upsamples to `image_size`.
pub fn segment(
    enc: &EncodedImage,
    tl: &TransformationLayer,
    t: &TextEmbeddingSet,
    tau: f32,
    image_size: usize,
) -> Result<DefectMap> {
    let f_primes = apply_transformation(enc, tl)?;
    let (per_level_f, a_f) = defect_map_f(&f_primes, t, tau)?;
    let (per_level_v, a_v) = defect_map_v(enc, t, tau)?;
    let (class_map, fused_grid) = fuse_maps(&a_f, &a_v, t.good_index()?)?;
    let fused_pixels = upsample_to_pixels(&fused_grid, image_size)?;
    Ok(DefectMap {
        per_level_f,
        per_level_v,
        class_map,
        fused_grid,
        fused_pixels,
    })
}
