//! Image-level classification: a similarity-based distribution from the
//! transformed patch tokens, a linear head on the concatenated CLS tokens,
//! and their convex combination.

use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::layers::Init;
use crate::numerics::{softmax, Tensor};
use crate::seg::{apply_transformation, similarity_matrix, TransformationLayer};
use crate::store::Checkpoint;
use crate::text::TextEmbeddingSet;
use crate::vit::EncodedImage;

pub const DEFAULT_ALPHA: f32 = 0.8;
const SIMPLEX_TOL: f32 = 1e-3;

/// Linear head over `[f_1^CLS … f_m^CLS]`: `W: [(m·C) × N]`, `b: [N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init(in_dim: usize, classes: usize, seed: u64) -> Self {
        let mut init = Init::new(seed);
        Self {
            weight: init.normal(&[in_dim, classes], 0.01),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn zeros(in_dim: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[in_dim, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// Pre-softmax logits for one concatenated feature vector.
    pub fn logits(&self, features: &[f32]) -> Result<Vec<f32>> {
        if features.len() != self.in_dim() {
            return shape_err(format!(
                "head expects {} features, got {}",
                self.in_dim(),
                features.len()
            ));
        }
        let x = Tensor::new(vec![1, features.len()], features.to_vec())?;
        Ok(x.affine(&self.weight, &self.bias)?.into_data())
    }

    pub fn export(&self, ckpt: &mut Checkpoint) {
        ckpt.insert("cls.head.weight", self.weight.clone());
        ckpt.insert("cls.head.bias", self.bias.clone());
    }

    pub fn import(ckpt: &Checkpoint) -> Result<Self> {
        let weight = ckpt.get("cls.head.weight")?.clone();
        let bias = ckpt.get("cls.head.bias")?.clone();
        if weight.rank() != 2 || weight.cols() != bias.len() {
            return shape_err("cls.head weight and bias disagree");
        }
        Ok(Self { weight, bias })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub alpha: f32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl FusionConfig {
    pub fn new(alpha: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} not in [0, 1]")));
        }
        Ok(Self { alpha })
    }
}

/// Which tokens feed the similarity-based distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PsSource {
    /// Max over patch tokens per class.
    #[default]
    Patches,
    /// The CLS token alone, passed through the same transformation.
    Cls,
}

impl PsSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::Patches => "patches",
            Self::Cls => "cls",
        }
    }
}

impl FromStr for PsSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patches" => Ok(Self::Patches),
            "cls" => Ok(Self::Cls),
            other => Err(Error::Config(format!("unknown ps-source `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities {
    pub p_s: Vec<f32>,
    pub p_c: Vec<f32>,
    pub p: Vec<f32>,
    pub predicted: usize,
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn softmax_vec(x: Vec<f32>) -> Result<Vec<f32>> {
    Ok(softmax(&Tensor::from_vec(x), 0)?.into_data())
}

/// Per-class similarity scores: max over tokens within a level, then max
/// over levels. Returned before the softmax.
pub fn similarity_scores(
    enc: &EncodedImage,
    tl: &TransformationLayer,
    t: &TextEmbeddingSet,
    source: PsSource,
) -> Result<Vec<f32>> {
    let n = t.num_classes();
    let mut best = vec![f32::NEG_INFINITY; n];
    match source {
        PsSource::Patches => {
            for f in apply_transformation(enc, tl)? {
                let s = similarity_matrix(&f, t)?;
                for r in 0..s.rows() {
                    for (b, &v) in best.iter_mut().zip(s.row(r)) {
                        *b = b.max(v);
                    }
                }
            }
        }
        PsSource::Cls => {
            if enc.cls.len() != tl.num_levels() {
                return shape_err("CLS levels and transformation levels disagree");
            }
            for (cls, lin) in enc.cls.iter().zip(&tl.levels) {
                let x = Tensor::new(vec![1, cls.len()], cls.data().to_vec())?;
                let s = similarity_matrix(&lin.forward(&x)?, t)?;
                for (b, &v) in best.iter_mut().zip(s.row(0)) {
                    *b = b.max(v);
                }
            }
        }
    }
    Ok(best)
}

/// `P_S = softmax(s_max / τ)`.
pub fn similarity_probability(
    enc: &EncodedImage,
    tl: &TransformationLayer,
    t: &TextEmbeddingSet,
    tau: f32,
    source: PsSource,
) -> Result<Vec<f32>> {
    let s = similarity_scores(enc, tl, t, source)?;
    softmax_vec(s.into_iter().map(|v| v / tau).collect())
}

/// `P_C = softmax(W·[cls_1 … cls_m] + b)`.
pub fn head_probability(cls_tokens: &[Tensor], head: &ClassifierHead) -> Result<Vec<f32>> {
    let features: Vec<f32> = cls_tokens
        .iter()
        .flat_map(|c| c.data().iter().copied())
        .collect();
    softmax_vec(head.logits(&features)?)
}

fn check_simplex(p: &[f32], name: &str) -> Result<()> {
    let sum: f32 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "{name} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// `P = (1 − α)·P_S + α·P_C`.
pub fn fuse_probability(p_s: &[f32], p_c: &[f32], cfg: FusionConfig) -> Result<ClassProbabilities> {
    if p_s.len() != p_c.len() || p_s.is_empty() {
        return shape_err(format!("P_S has {} classes, P_C {}", p_s.len(), p_c.len()));
    }
    check_simplex(p_s, "P_S")?;
    check_simplex(p_c, "P_C")?;
    let a = cfg.alpha;
    let p: Vec<f32> = if a == 1.0 {
        p_c.to_vec()
    } else if a == 0.0 {
        p_s.to_vec()
    } else {
        p_s.iter()
            .zip(p_c)
            .map(|(s, c)| (1.0 - a) * s + a * c)
            .collect()
    };
    Ok(ClassProbabilities {
        predicted: argmax(&p),
        p_s: p_s.to_vec(),
        p_c: p_c.to_vec(),
        p,
    })
}

/// Full classification of one encoded image.
pub fn classify(
    enc: &EncodedImage,
    tl: &TransformationLayer,
    head: &ClassifierHead,
    t: &TextEmbeddingSet,
    tau: f32,
    fusion: FusionConfig,
    source: PsSource,
) -> Result<ClassProbabilities> {
    let p_s = similarity_probability(enc, tl, t, tau, source)?;
    let p_c = head_probability(&enc.cls, head)?;
    fuse_probability(&p_s, &p_c, fusion)
}

/// CSV header `image_id,predicted_class,p_<class>…`.
pub fn csv_header(classes: &[String]) -> String {
    let mut s = String::from("image_id,predicted_class");
    for c in classes {
        s.push_str(",p_");
        s.push_str(c);
    }
    s
}

pub fn csv_line(image_id: &str, probs: &ClassProbabilities, classes: &[String]) -> String {
    let mut s = format!("{image_id},{}", classes[probs.predicted]);
    for p in &probs.p {
        s.push_str(&format!(",{p:.6}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::LevelEmbeddings;

    fn text(rows: &[Vec<f32>]) -> TextEmbeddingSet {
        let names = (0..rows.len())
            .map(|i| {
                if i == 0 {
                    "good".to_string()
                } else {
                    format!("c{i}")
                }
            })
            .collect();
        TextEmbeddingSet::new(names, Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn encoded(levels: Vec<Tensor>) -> EncodedImage {
        let cls = levels
            .iter()
            .map(|x| Tensor::from_vec(x.row(0).to_vec()))
            .collect();
        EncodedImage {
            levels: levels
                .into_iter()
                .map(|f| LevelEmbeddings { v: f.clone(), f })
                .collect(),
            cls,
        }
    }

    #[test]
    fn equal_similarities_give_uniform() {
        let t = text(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let enc = encoded(vec![f]);
        let p = similarity_probability(
            &enc,
            &TransformationLayer::identity(1, 2),
            &t,
            0.07,
            PsSource::Patches,
        )
        .unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn dominant_class_wins() {
        let t = text(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let lvl = Tensor::from_rows(&[
            vec![9.0, 9.0, 9.0],
            vec![0.1, 0.2, 1.0],
            vec![0.0, 0.3, 0.9],
        ])
        .unwrap();
        let enc = encoded(vec![lvl.clone(), lvl]);
        let p = similarity_probability(
            &enc,
            &TransformationLayer::identity(2, 3),
            &t,
            0.07,
            PsSource::Patches,
        )
        .unwrap();
        assert_eq!(argmax(&p), 2);
    }

    #[test]
    fn similarity_matches_max_softmax_oracle() {
        let mut init = Init::new(8);
        let trows: Vec<Vec<f32>> = (0..3).map(|_| init.normal(&[4], 1.0).into_data()).collect();
        let t = text(&trows);
        let levels: Vec<Tensor> = (0..2).map(|_| init.normal(&[4, 4], 1.0)).collect();
        let enc = encoded(levels.clone());
        let tl = TransformationLayer::init(2, 4, 4, 3);
        let p = similarity_probability(&enc, &tl, &t, 0.07, PsSource::Patches).unwrap();

        let mut smax = [f64::NEG_INFINITY; 3];
        for (lvl, lin) in levels.iter().zip(&tl.levels) {
            for tok in 1..4 {
                let mut y = [0.0f64; 4];
                for (k, yk) in y.iter_mut().enumerate() {
                    *yk = lin.bias.data()[k] as f64;
                    for c in 0..4 {
                        *yk += lvl.row(tok)[c] as f64 * lin.weight.data()[c * 4 + k] as f64;
                    }
                }
                for (c, s) in smax.iter_mut().enumerate() {
                    let tc = t.embeddings.row(c);
                    let dot: f64 = y.iter().zip(tc).map(|(a, b)| a * *b as f64).sum();
                    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nt = tc.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                    *s = s.max(dot / (ny * nt));
                }
            }
        }
        let z: Vec<f64> = smax.iter().map(|s| (s / 0.07).exp()).collect();
        let total: f64 = z.iter().sum();
        for (a, b) in p.iter().zip(&z) {
            assert!((*a as f64 - b / total).abs() < 1e-5);
        }
    }

    #[test]
    fn head_examples() {
        let cls = vec![
            Tensor::from_vec(vec![1.0, 2.0]),
            Tensor::from_vec(vec![-1.0, 0.5]),
        ];
        let mut head = ClassifierHead::zeros(4, 3);
        head.bias = Tensor::from_vec(vec![0.1, 0.5, -0.2]);
        let p = head_probability(&cls, &head).unwrap();
        let expected = softmax(&head.bias, 0).unwrap();
        assert_eq!(p, expected.data());

        head.bias = Tensor::from_vec(vec![0.0, 25.0, 1.0]);
        let p = head_probability(&cls, &head).unwrap();
        assert!((p[1] - 1.0).abs() < 1e-6 && p[0] < 1e-6 && p[2] < 1e-6);

        assert!(head_probability(&cls[..1], &head).is_err());
    }

    #[test]
    fn head_matches_scalar_oracle() {
        let mut init = Init::new(4);
        let cls: Vec<Tensor> = (0..2).map(|_| init.normal(&[3], 1.0)).collect();
        let head = ClassifierHead {
            weight: init.normal(&[6, 4], 0.5),
            bias: init.normal(&[4], 0.5),
        };
        let p = head_probability(&cls, &head).unwrap();
        let x: Vec<f64> = cls
            .iter()
            .flat_map(|c| c.data().iter().map(|v| *v as f64))
            .collect();
        let z: Vec<f64> = (0..4)
            .map(|k| {
                head.bias.data()[k] as f64
                    + (0..6)
                        .map(|i| x[i] * head.weight.data()[i * 4 + k] as f64)
                        .sum::<f64>()
            })
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(&e) {
            assert!((*a as f64 - b / s).abs() < 1e-5);
        }
    }

    #[test]
    fn fusion_examples() {
        let ps = [1.0, 0.0];
        let pc = [0.0, 1.0];
        let r = fuse_probability(&ps, &pc, FusionConfig::default()).unwrap();
        assert!((r.p[0] - 0.2).abs() < 1e-6 && (r.p[1] - 0.8).abs() < 1e-6);
        assert_eq!(r.predicted, 1);
        assert_eq!(
            fuse_probability(&ps, &pc, FusionConfig::new(1.0).unwrap())
                .unwrap()
                .p,
            pc
        );
        assert_eq!(
            fuse_probability(&ps, &pc, FusionConfig::new(0.0).unwrap())
                .unwrap()
                .p,
            ps
        );
        let p = [0.25, 0.5, 0.25];
        let r = fuse_probability(&p, &p, FusionConfig::new(0.37).unwrap()).unwrap();
        for (a, b) in r.p.iter().zip(&p) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!(fuse_probability(&ps, &[0.5, 0.25, 0.25], FusionConfig::default()).is_err());
        assert!(fuse_probability(&[0.7, 0.7], &pc, FusionConfig::default()).is_err());
        assert!(FusionConfig::new(1.5).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn csv_format() {
        let classes = vec!["good".to_string(), "bridge".to_string()];
        assert_eq!(
            csv_header(&classes),
            "image_id,predicted_class,p_good,p_bridge"
        );
        let r = fuse_probability(&[0.25, 0.75], &[0.25, 0.75], FusionConfig::default()).unwrap();
        assert_eq!(
            csv_line("img7", &r, &classes),
            "img7,bridge,0.250000,0.750000"
        );
    }

    #[test]
    fn ps_source_parse() {
        assert_eq!("cls".parse::<PsSource>().unwrap(), PsSource::Cls);
        assert!("tokens".parse::<PsSource>().is_err());
    }
}
