//! End-to-end orchestration: initialization, fine-tuning and evaluation.

use rayon::prelude::*;

use crate::cls::{classify, ClassProbabilities, ClassifierHead, FusionConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{classification_metrics, detection_metrics, MetricsReport};
use crate::numerics::Tensor;
use crate::seg::{segment, TransformationLayer};
use crate::store::{surgery_copy_qkv_to_vvv, Checkpoint, SurgeryReport};
use crate::synth::{mix_seed, sample_episode, Episode, SemSample, SynthConfig};
use crate::text::{
    build_class_embeddings, PromptLibrary, TextConfig, TextEmbeddingSet, TextEncoder,
};
use crate::tuner::{build_cache_from_encoded, train_head, train_transformation, FeatureCache};
use crate::vit::{EncodedImage, VisionTransformer, VitConfig};

pub const META_CLASSES: &str = "classes";
pub const META_SEED: &str = "seed";
pub const META_TUNED_LEVELS: &str = "tuned.levels";
pub const META_TUNED_ABLATE: &str = "tuned.ablate";

const VISION_STREAM: u64 = 11;
const TEXT_STREAM: u64 = 12;
const TRANSFORM_STREAM: u64 = 13;
const HEAD_STREAM: u64 = 14;

/// Random backbone and text encoder with surgery applied. The run config
/// and class list are stored in the metadata.
pub fn init_checkpoint(cfg: &RunConfig, classes: &[String]) -> Result<(Checkpoint, SurgeryReport)> {
    cfg.validate()?;
    if classes.len() < 2 || !classes.iter().any(|c| c == crate::text::GOOD) {
        return Err(Error::Config(
            "class list needs `good` and at least one defect".into(),
        ));
    }
    if classes.iter().any(|c| c.contains(',') || c.is_empty()) {
        return Err(Error::Config(
            "class names must be non-empty and comma free".into(),
        ));
    }
    let vit = VisionTransformer::random(cfg.vit, mix_seed(cfg.seed, VISION_STREAM, 0))?;
    let text = TextEncoder::random(cfg.text, mix_seed(cfg.seed, TEXT_STREAM, 0))?;
    let mut ckpt = Checkpoint::default();
    vit.export(&mut ckpt);
    text.export(&mut ckpt);
    cfg.vit.to_metadata(&mut ckpt.metadata);
    cfg.text.to_metadata(&mut ckpt.metadata);
    ckpt.metadata.insert(META_CLASSES.into(), classes.join(","));
    ckpt.metadata.insert(META_SEED.into(), cfg.seed.to_string());
    surgery_copy_qkv_to_vvv(&ckpt, None)
}

pub fn checkpoint_classes(ckpt: &Checkpoint) -> Result<Vec<String>> {
    ckpt.meta(META_CLASSES)
        .map(|s| s.split(',').map(str::to_string).collect())
        .ok_or_else(|| Error::Data("checkpoint metadata has no class list".into()))
}

/// Frozen encoders read back from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub vit: VisionTransformer,
    pub text: TextEncoder,
    pub classes: Vec<String>,
}

impl Backbone {
    pub fn load(ckpt: &Checkpoint) -> Result<Self> {
        let vit = VisionTransformer::import(VitConfig::from_metadata(&ckpt.metadata)?, ckpt)?;
        let text = TextEncoder::import(TextConfig::from_metadata(&ckpt.metadata)?, ckpt)?;
        Ok(Self {
            vit,
            text,
            classes: checkpoint_classes(ckpt)?,
        })
    }

    /// Class text embeddings under the configured prompt library.
    pub fn class_embeddings(&self, cfg: &RunConfig) -> Result<TextEmbeddingSet> {
        let lib = if cfg.ablations.generic_prompts {
            PromptLibrary::generic(&self.classes)
        } else if let Some(path) = &cfg.prompts {
            PromptLibrary::load(path)?
        } else {
            PromptLibrary::default_sem()
        };
        build_class_embeddings(&lib, &self.classes, &self.text)
    }

    /// Encodes one image, keeping only the deepest level when requested.
    pub fn encode(&self, image: &Tensor, last_layer_only: bool) -> Result<EncodedImage> {
        let enc = self.vit.encode_image(image)?;
        Ok(if last_layer_only {
            enc.last_level_only()
        } else {
            enc
        })
    }

    fn levels(&self, cfg: &RunConfig) -> usize {
        if cfg.ablations.last_layer_only {
            1
        } else {
            self.vit.cfg.blocks
        }
    }
}

/// Everything fine-tuning produces.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutput {
    pub checkpoint: Checkpoint,
    pub transform_curve: Vec<f64>,
    pub head_curve: Vec<f64>,
}

pub fn build_support_cache(
    backbone: &Backbone,
    support: &[SemSample],
    t: &TextEmbeddingSet,
    last_layer_only: bool,
) -> Result<FeatureCache> {
    let encoded = support
        .par_iter()
        .map(|s| backbone.encode(&s.image, last_layer_only))
        .collect::<Result<Vec<_>>>()?;
    build_cache_from_encoded(
        support,
        &encoded,
        backbone.vit.cfg.patch_size,
        t.num_classes(),
        t.good_index()?,
    )
}

/// Trains the transformation layer and the classifier head on `support`
/// and returns the checkpoint with both appended.
pub fn finetune(
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    support: &[SemSample],
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    if support.is_empty() {
        return Err(Error::Data("support set is empty".into()));
    }
    let backbone = Backbone::load(ckpt)?;
    let t = backbone.class_embeddings(cfg)?;
    let levels = backbone.levels(cfg);
    let cache = build_support_cache(&backbone, support, &t, cfg.ablations.last_layer_only)?;
    let (c, d) = (backbone.vit.cfg.width, t.dim());
    let mut train = cfg.train;
    train.seed = cfg.seed;

    let (tl, transform_curve) = if cfg.ablations.no_transform {
        if c != d {
            return Err(Error::Config(format!(
                "no_transform needs width {c} to equal the embedding dimension {d}"
            )));
        }
        (TransformationLayer::identity(levels, d), Vec::new())
    } else {
        let init = TransformationLayer::init(levels, c, d, mix_seed(cfg.seed, TRANSFORM_STREAM, 0));
        train_transformation(&cache, &t, &init, &train, cfg.tau)?
    };

    let head = ClassifierHead::init(
        levels * c,
        t.num_classes(),
        mix_seed(cfg.seed, HEAD_STREAM, 0),
    );
    let (head, head_curve) = if cfg.ablations.ps_only {
        (head, Vec::new())
    } else {
        train_head(&cache, &head, &train)?
    };

    let mut out = ckpt.clone();
    out.tensors
        .retain(|k, _| !k.starts_with("seg.transform.") && !k.starts_with("cls.head."));
    tl.export(&mut out);
    head.export(&mut out);
    out.metadata
        .insert(META_TUNED_LEVELS.into(), levels.to_string());
    out.metadata
        .insert(META_TUNED_ABLATE.into(), cfg.ablations.to_list());
    Ok(FinetuneOutput {
        checkpoint: out,
        transform_curve,
        head_curve,
    })
}

/// A fine-tuned model ready for inference. Shared read-only across workers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub text: TextEmbeddingSet,
    pub transform: TransformationLayer,
    pub head: ClassifierHead,
    pub tau: f32,
    pub fusion: FusionConfig,
    pub cfg: RunConfig,
}

impl Model {
    pub fn load(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::load(ckpt)?;
        let levels = backbone.levels(cfg);
        let tuned: usize = ckpt
            .meta(META_TUNED_LEVELS)
            .ok_or_else(|| Error::MissingTensor("checkpoint has not been fine-tuned".into()))?
            .parse()
            .map_err(|_| Error::Malformed(format!("bad `{META_TUNED_LEVELS}` metadata")))?;
        if tuned != levels {
            return Err(Error::Config(format!(
                "checkpoint was tuned with {tuned} level(s) but this run uses {levels}"
            )));
        }
        let text = backbone.class_embeddings(cfg)?;
        let transform = if cfg.ablations.no_transform {
            TransformationLayer::identity(levels, text.dim())
        } else {
            TransformationLayer::import(levels, ckpt)?
        };
        let head = ClassifierHead::import(ckpt)?;
        Ok(Self {
            backbone,
            text,
            transform,
            head,
            tau: cfg.tau,
            fusion: FusionConfig::new(cfg.effective_alpha())?,
            cfg: cfg.clone(),
        })
    }

    /// Fused pixel anomaly map and class probabilities for one image.
    pub fn infer(&self, image: &Tensor) -> Result<Inference> {
        let enc = self
            .backbone
            .encode(image, self.cfg.ablations.last_layer_only)?;
        let map = segment(
            &enc,
            &self.transform,
            &self.text,
            self.tau,
            self.backbone.vit.cfg.image_size,
        )?;
        let probs = classify(
            &enc,
            &self.transform,
            &self.head,
            &self.text,
            self.tau,
            self.fusion,
            self.cfg.ps_source,
        )?;
        Ok(Inference {
            class_map: map.class_map,
            anomaly: map.fused_pixels,
            probs,
        })
    }

    /// Parallel inference; results keep the input order.
    pub fn infer_all(&self, images: &[&Tensor]) -> Result<Vec<Inference>> {
        images.par_iter().map(|img| self.infer(img)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `[T × N]` fused per-token class scores.
    pub class_map: Tensor,
    /// `[H × W]` anomaly map in `[0, 1]`.
    pub anomaly: Tensor,
    pub probs: ClassProbabilities,
}

/// Metrics plus the per-image outputs they were computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub outputs: Vec<Inference>,
}

pub fn evaluate(model: &Model, query: &[SemSample]) -> Result<Evaluation> {
    if query.is_empty() {
        return Err(Error::Data("query set is empty".into()));
    }
    let n = model.text.num_classes();
    if let Some(s) = query.iter().find(|s| s.label >= n) {
        return Err(Error::Data(format!(
            "query label {} outside {n} classes",
            s.label
        )));
    }
    let images: Vec<&Tensor> = query.iter().map(|s| &s.image).collect();
    let outputs = model.infer_all(&images)?;
    let maps: Vec<Tensor> = outputs.iter().map(|o| o.anomaly.clone()).collect();
    let masks: Vec<Tensor> = query.iter().map(|s| s.mask.clone()).collect();
    let det = detection_metrics(&maps, &masks)?;
    let predicted: Vec<usize> = outputs.iter().map(|o| o.probs.predicted).collect();
    let truth: Vec<usize> = query.iter().map(|s| s.label).collect();
    let cls = classification_metrics(&predicted, &truth, n)?;
    Ok(Evaluation {
        report: MetricsReport::new(det, cls),
        outputs,
    })
}

/// Checks that every class named in a data manifest exists in the
/// checkpoint's class list.
pub fn check_classes(ckpt_classes: &[String], manifest: &[String]) -> Result<()> {
    match manifest.iter().find(|c| !ckpt_classes.contains(c)) {
        Some(c) => Err(Error::Data(format!(
            "class `{c}` is not in the checkpoint class list [{}]",
            ckpt_classes.join(", ")
        ))),
        None => Ok(()),
    }
}

/// Full synthetic benchmark run held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRun {
    pub episode: Episode,
    pub finetune: FinetuneOutput,
    pub evaluation: Evaluation,
}

/// Generates the episode, initializes, fine-tunes and evaluates.
pub fn run_benchmark(cfg: &RunConfig) -> Result<BenchmarkRun> {
    let synth = SynthConfig {
        image_size: cfg.vit.image_size,
        text_banner: cfg.text_banner,
    };
    let episode = sample_episode(cfg.n_way, cfg.k_shot, cfg.m_query, cfg.seed, synth)?;
    let (ckpt, _) = init_checkpoint(cfg, &episode.classes)?;
    let finetune = finetune(&ckpt, cfg, &episode.support)?;
    let model = Model::load(&finetune.checkpoint, cfg)?;
    let evaluation = evaluate(&model, &episode.query)?;
    Ok(BenchmarkRun {
        episode,
        finetune,
        evaluation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::attention_layers;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.vit = VitConfig {
            image_size: 64,
            patch_size: 16,
            width: 16,
            heads: 2,
            blocks: 2,
            layers_per_block: 2,
            mlp_ratio: 2,
        };
        cfg.text = TextConfig {
            vocab: 512,
            width: 16,
            depth: 1,
            heads: 2,
            embed_dim: 16,
            ..TextConfig::default()
        };
        cfg.train.epochs = 3;
        cfg.n_way = 3;
        cfg.k_shot = 1;
        cfg.m_query = 12;
        cfg
    }

    fn classes(n: usize) -> Vec<String> {
        crate::text::DEFAULT_CLASSES[..n]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_surgered() {
        let cfg = RunConfig::default();
        let (a, report) = init_checkpoint(&cfg, &classes(7)).unwrap();
        let (b, _) = init_checkpoint(&cfg, &classes(7)).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(attention_layers(&a).len(), 12);
        assert_eq!(report.copied_pairs.len(), 48);
        for (src, dst) in &report.copied_pairs {
            assert_eq!(a.get(src).unwrap(), a.get(dst).unwrap());
        }
        assert_eq!(checkpoint_classes(&a).unwrap(), classes(7));
    }

    #[test]
    fn init_rejects_bad_class_lists() {
        let cfg = RunConfig::default();
        assert!(init_checkpoint(&cfg, &["particle".into(), "hole".into()]).is_err());
        assert!(init_checkpoint(&cfg, &["good".into()]).is_err());
    }

    #[test]
    fn small_benchmark_runs_end_to_end() {
        let cfg = small();
        let run = run_benchmark(&cfg).unwrap();
        assert_eq!(run.finetune.transform_curve.len(), 3);
        assert_eq!(run.finetune.head_curve.len(), 3);
        let r = &run.evaluation.report;
        for v in [r.iauroc, r.pauroc, r.f1_max, r.accuracy] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(run.evaluation.outputs.len(), 12);
        let again = run_benchmark(&cfg).unwrap();
        assert_eq!(
            run.evaluation.report.to_json().unwrap(),
            again.evaluation.report.to_json().unwrap()
        );
    }

    #[test]
    fn no_transform_stores_identity() {
        let mut cfg = small();
        cfg.ablations.no_transform = true;
        let ep = sample_episode(3, 1, 10, 1, SynthConfig::default()).unwrap();
        let (ckpt, _) = init_checkpoint(&cfg, &ep.classes).unwrap();
        let out = finetune(&ckpt, &cfg, &ep.support).unwrap();
        assert!(out.transform_curve.is_empty());
        let w = out.checkpoint.get("seg.transform.1.weight").unwrap();
        assert_eq!(w, &Tensor::identity(16));
    }

    #[test]
    fn level_mismatch_is_config_error() {
        let cfg = small();
        let ep = sample_episode(3, 1, 10, 1, SynthConfig::default()).unwrap();
        let (ckpt, _) = init_checkpoint(&cfg, &ep.classes).unwrap();
        let out = finetune(&ckpt, &cfg, &ep.support).unwrap();
        let mut last = cfg.clone();
        last.ablations.last_layer_only = true;
        assert!(matches!(
            Model::load(&out.checkpoint, &last),
            Err(Error::Config(_))
        ));
        assert!(Model::load(&ckpt, &cfg).is_err());
    }

    #[test]
    fn class_check() {
        let ck = classes(3);
        assert!(check_classes(&ck, &ck[..2]).is_ok());
        assert!(matches!(
            check_classes(&ck, &["scratch".to_string()]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn finetune_leaves_frozen_tensors_untouched() {
        let mut cfg = small();
        cfg.train.epochs = 20;
        let ep = sample_episode(3, 2, 20, 4, SynthConfig::default()).unwrap();
        let (ckpt, _) = init_checkpoint(&cfg, &ep.classes).unwrap();
        let out = finetune(&ckpt, &cfg, &ep.support).unwrap();
        for (name, t) in &ckpt.tensors {
            assert!(name.starts_with("vision.") || name.starts_with("text."));
            let after = out.checkpoint.get(name).unwrap();
            assert_eq!(
                t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                after.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{name} changed"
            );
        }
        // both curves trend downward
        for curve in [&out.transform_curve, &out.head_curve] {
            let k = (curve.len() / 10).max(1);
            let head: f64 = curve[..k].iter().sum::<f64>() / k as f64;
            let tail: f64 = curve[curve.len() - k..].iter().sum::<f64>() / k as f64;
            assert!(tail < head, "{head} -> {tail}");
        }
    }
}
