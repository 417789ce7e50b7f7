//! Few-shot fine-tuning of the transformation layer and the classifier
//! head. The backbone and text encoder stay frozen, so features are
//! computed once into a [`FeatureCache`] and both losses are optimized with
//! closed-form gradients and Adam.

use rayon::prelude::*;

use crate::cls::ClassifierHead;
use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;
use crate::seg::TransformationLayer;
use crate::synth::SemSample;
use crate::text::TextEmbeddingSet;
use crate::vit::{EncodedImage, VisionTransformer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seg_loss_weight: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seg_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be ≥ 0",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Frozen features of one support image.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    /// `F_j[1:]` per level, `[T × C]`.
    pub patch_f: Vec<Tensor>,
    /// `V_j[1:]` per level, `[T × C]`.
    pub patch_v: Vec<Tensor>,
    /// `F_j[0]` per level.
    pub cls: Vec<Tensor>,
    pub label: usize,
    pub token_labels: Vec<usize>,
}

impl CacheEntry {
    pub fn cls_concat(&self) -> Vec<f32> {
        self.cls
            .iter()
            .flat_map(|c| c.data().iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub entries: Vec<CacheEntry>,
    pub n_classes: usize,
    pub good_index: usize,
}

impl FeatureCache {
    pub fn levels(&self) -> usize {
        self.entries.first().map_or(0, |e| e.patch_f.len())
    }
}

/// Per-patch labels: the image's class where at least half the patch's
/// pixels are masked, `good_index` elsewhere.
pub fn token_labels(
    mask: &Tensor,
    patch_size: usize,
    label: usize,
    good_index: usize,
) -> Result<Vec<usize>> {
    let (h, w) = match mask.shape() {
        [h, w] => (*h, *w),
        s => return shape_err(format!("mask must be 2-D, got {s:?}")),
    };
    if h % patch_size != 0 || w % patch_size != 0 {
        return shape_err(format!(
            "mask {h}×{w} is not tiled by {patch_size}px patches"
        ));
    }
    let mut out = Vec::with_capacity((h / patch_size) * (w / patch_size));
    for gy in 0..h / patch_size {
        for gx in 0..w / patch_size {
            let mut count = 0usize;
            for y in 0..patch_size {
                let row = mask.row(gy * patch_size + y);
                count += row[gx * patch_size..(gx + 1) * patch_size]
                    .iter()
                    .filter(|&&m| m > 0.5)
                    .count();
            }
            let defect = 2 * count >= patch_size * patch_size;
            out.push(if defect { label } else { good_index });
        }
    }
    Ok(out)
}

/// Builds a cache from already encoded images (one per sample).
pub fn build_cache_from_encoded(
    samples: &[SemSample],
    encoded: &[EncodedImage],
    patch_size: usize,
    n_classes: usize,
    good_index: usize,
) -> Result<FeatureCache> {
    if samples.len() != encoded.len() {
        return shape_err("one encoding per sample required");
    }
    let entries = samples
        .iter()
        .zip(encoded)
        .map(|(s, enc)| {
            if s.image.shape() != s.mask.shape() {
                return Err(Error::Data(format!(
                    "sample {}: image {:?} and mask {:?} differ",
                    s.seed,
                    s.image.shape(),
                    s.mask.shape()
                )));
            }
            if s.label >= n_classes {
                return Err(Error::Data(format!("label {} out of range", s.label)));
            }
            Ok(CacheEntry {
                patch_f: enc
                    .levels
                    .iter()
                    .map(|l| l.patch_f())
                    .collect::<Result<_>>()?,
                patch_v: enc
                    .levels
                    .iter()
                    .map(|l| l.patch_v())
                    .collect::<Result<_>>()?,
                cls: enc.cls.clone(),
                label: s.label,
                token_labels: token_labels(&s.mask, patch_size, s.label, good_index)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureCache {
        entries,
        n_classes,
        good_index,
    })
}

/// One frozen forward pass per support image.
pub fn build_cache(
    samples: &[SemSample],
    vit: &VisionTransformer,
    n_classes: usize,
    good_index: usize,
) -> Result<FeatureCache> {
    for s in samples {
        if s.image.shape() != s.mask.shape() {
            return Err(Error::Data(format!(
                "sample {}: image {:?} and mask {:?} differ",
                s.seed,
                s.image.shape(),
                s.mask.shape()
            )));
        }
    }
    let encoded = samples
        .par_iter()
        .map(|s| vit.encode_image(&s.image))
        .collect::<Result<Vec<_>>>()?;
    build_cache_from_encoded(samples, &encoded, vit.cfg.patch_size, n_classes, good_index)
}

/// Adam first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return shape_err(format!(
                "param {i} is {:?}, grad is {:?}",
                p.shape(),
                g.shape()
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Gradients of the segmentation loss, one `(dW, db)` per level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

fn log_softmax_ce(logits: &[f64], label: usize, probs: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    -(logits[label] - max - sum.ln())
}

struct EntryGrad {
    loss: f64,
    dw: Vec<Vec<f64>>,
    db: Vec<Vec<f64>>,
}

fn check_transformation_inputs(
    cache: &FeatureCache,
    t: &TextEmbeddingSet,
    tl: &TransformationLayer,
) -> Result<()> {
    if cache.entries.is_empty() {
        return Err(Error::Data("feature cache is empty".into()));
    }
    if cache.levels() != tl.num_levels() {
        return shape_err(format!(
            "cache has {} levels, transformation {}",
            cache.levels(),
            tl.num_levels()
        ));
    }
    for lin in &tl.levels {
        if lin.weight.cols() != t.dim() {
            return shape_err("transformation output width differs from text dimension");
        }
    }
    if t.num_classes() != cache.n_classes {
        return shape_err("class count differs between cache and text embeddings");
    }
    Ok(())
}

/// Token-level cross-entropy of the vanilla-path class maps, averaged over
/// all support tokens and summed over levels, scaled by `weight`. Returns
/// the loss and its gradient with respect to every level's `(W, b)`.
pub fn transformation_loss(
    cache: &FeatureCache,
    t: &TextEmbeddingSet,
    tl: &TransformationLayer,
    tau: f32,
    weight: f32,
) -> Result<(f64, Vec<LevelGrads>)> {
    check_transformation_inputs(cache, t, tl)?;
    let n = t.num_classes();
    let d = t.dim();
    let tau = tau as f64;
    let text: Vec<f64> = t.embeddings.data().iter().map(|&v| v as f64).collect();
    let tokens_total: usize = cache.entries.iter().map(|e| e.token_labels.len()).sum();
    let scale = weight as f64 / tokens_total as f64;

    let per_entry: Vec<EntryGrad> = cache
        .entries
        .iter()
        .map(|entry| {
            let mut out = EntryGrad {
                loss: 0.0,
                dw: Vec::with_capacity(tl.num_levels()),
                db: Vec::with_capacity(tl.num_levels()),
            };
            let mut y = vec![0.0f64; d];
            let mut logits = vec![0.0f64; n];
            let mut probs = vec![0.0f64; n];
            let mut gy = vec![0.0f64; d];
            let mut sims = vec![0.0f64; n];
            for (feat, lin) in entry.patch_f.iter().zip(&tl.levels) {
                let c = feat.cols();
                let w = lin.weight.data();
                let mut dw = vec![0.0f64; c * d];
                let mut db = vec![0.0f64; d];
                for (r, &label) in entry.token_labels.iter().enumerate() {
                    let x = feat.row(r);
                    for (k, yk) in y.iter_mut().enumerate() {
                        *yk = lin.bias.data()[k] as f64;
                    }
                    for (ci, &xv) in x.iter().enumerate() {
                        let xv = xv as f64;
                        for (yk, &wv) in y.iter_mut().zip(&w[ci * d..(ci + 1) * d]) {
                            *yk += xv * wv as f64;
                        }
                    }
                    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    for (cl, s) in sims.iter_mut().enumerate() {
                        let tc = &text[cl * d..(cl + 1) * d];
                        *s = y.iter().zip(tc).map(|(a, b)| a * b).sum::<f64>() / ny;
                    }
                    for (z, s) in logits.iter_mut().zip(sims.iter()) {
                        *z = s / tau;
                    }
                    out.loss += log_softmax_ce(&logits, label, &mut probs) * scale;
                    // d/dy of cos(y, t_c) = (t_c − s_c ŷ) / |y|
                    gy.iter_mut().for_each(|g| *g = 0.0);
                    let mut gs_dot_s = 0.0;
                    for cl in 0..n {
                        let target = if cl == label { 1.0 } else { 0.0 };
                        let gs = (probs[cl] - target) * scale / tau;
                        gs_dot_s += gs * sims[cl];
                        let tc = &text[cl * d..(cl + 1) * d];
                        for (g, &tv) in gy.iter_mut().zip(tc) {
                            *g += gs * tv;
                        }
                    }
                    for (g, yk) in gy.iter_mut().zip(&y) {
                        *g = (*g - gs_dot_s * yk / ny) / ny;
                    }
                    for (ci, &xv) in x.iter().enumerate() {
                        let xv = xv as f64;
                        for (dwk, g) in dw[ci * d..(ci + 1) * d].iter_mut().zip(&gy) {
                            *dwk += xv * g;
                        }
                    }
                    for (dbk, g) in db.iter_mut().zip(&gy) {
                        *dbk += g;
                    }
                }
                out.dw.push(dw);
                out.db.push(db);
            }
            out
        })
        .collect();

    let mut loss = 0.0;
    let mut dws: Vec<Vec<f64>> = tl
        .levels
        .iter()
        .map(|l| vec![0.0; l.weight.len()])
        .collect();
    let mut dbs: Vec<Vec<f64>> = tl.levels.iter().map(|l| vec![0.0; l.bias.len()]).collect();
    for e in per_entry {
        loss += e.loss;
        for (acc, g) in dws.iter_mut().zip(&e.dw) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        for (acc, g) in dbs.iter_mut().zip(&e.db) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    let grads = tl
        .levels
        .iter()
        .zip(dws.into_iter().zip(dbs))
        .map(|(lin, (dw, db))| {
            Ok(LevelGrads {
                weight: Tensor::new(
                    lin.weight.shape().to_vec(),
                    dw.into_iter().map(|v| v as f32).collect(),
                )?,
                bias: Tensor::new(
                    lin.bias.shape().to_vec(),
                    db.into_iter().map(|v| v as f32).collect(),
                )?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((loss, grads))
}

/// Image-level cross-entropy of the head on concatenated CLS features,
/// averaged over the cache, with `(dW, db)`.
pub fn head_loss(cache: &FeatureCache, head: &ClassifierHead) -> Result<(f64, Tensor, Tensor)> {
    if cache.entries.is_empty() {
        return Err(Error::Data("feature cache is empty".into()));
    }
    if head.classes() != cache.n_classes {
        return shape_err("head class count differs from cache");
    }
    let (in_dim, n) = (head.in_dim(), head.classes());
    let w = head.weight.data();
    let scale = 1.0 / cache.entries.len() as f64;
    let mut loss = 0.0;
    let mut dw = vec![0.0f64; in_dim * n];
    let mut db = vec![0.0f64; n];
    let mut logits = vec![0.0f64; n];
    let mut probs = vec![0.0f64; n];
    for entry in &cache.entries {
        let x = entry.cls_concat();
        if x.len() != in_dim {
            return shape_err(format!(
                "head expects {in_dim} features, cache has {}",
                x.len()
            ));
        }
        for (k, z) in logits.iter_mut().enumerate() {
            *z = head.bias.data()[k] as f64;
        }
        for (i, &xv) in x.iter().enumerate() {
            for (z, &wv) in logits.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                *z += xv as f64 * wv as f64;
            }
        }
        loss += log_softmax_ce(&logits, entry.label, &mut probs) * scale;
        for k in 0..n {
            let g = (probs[k] - if k == entry.label { 1.0 } else { 0.0 }) * scale;
            db[k] += g;
            for (i, &xv) in x.iter().enumerate() {
                dw[i * n + k] += xv as f64 * g;
            }
        }
    }
    Ok((
        loss,
        Tensor::new(vec![in_dim, n], dw.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(vec![n], db.into_iter().map(|v| v as f32).collect())?,
    ))
}

fn finite(loss: f64, what: &str, epoch: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!(
            "{what} loss diverged at epoch {}",
            epoch + 1
        )))
    }
}

/// Full-batch Adam on [`transformation_loss`]. The curve holds the loss
/// evaluated before each epoch's update.
pub fn train_transformation(
    cache: &FeatureCache,
    t: &TextEmbeddingSet,
    tl: &TransformationLayer,
    cfg: &TrainConfig,
    tau: f32,
) -> Result<(TransformationLayer, Vec<f64>)> {
    cfg.validate()?;
    let mut tl = tl.clone();
    let mut state = {
        let params: Vec<&Tensor> = tl
            .levels
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        AdamState::new(&params)
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grads) = transformation_loss(cache, t, &tl, tau, cfg.seg_loss_weight)?;
        curve.push(finite(loss, "transformation", epoch)?);
        let grads: Vec<Tensor> = grads.into_iter().flat_map(|g| [g.weight, g.bias]).collect();
        let mut params: Vec<&mut Tensor> = tl
            .levels
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        adam_step(&mut params, &grads, &mut state, cfg)?;
    }
    Ok((tl, curve))
}

/// Full-batch Adam on [`head_loss`].
pub fn train_head(
    cache: &FeatureCache,
    head: &ClassifierHead,
    cfg: &TrainConfig,
) -> Result<(ClassifierHead, Vec<f64>)> {
    cfg.validate()?;
    let mut head = head.clone();
    let mut state = AdamState::new(&[&head.weight, &head.bias]);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, dw, db) = head_loss(cache, &head)?;
        curve.push(finite(loss, "head", epoch)?);
        let ClassifierHead { weight, bias } = &mut head;
        adam_step(&mut [weight, bias], &[dw, db], &mut state, cfg)?;
    }
    Ok((head, curve))
}

/// `epoch,loss` lines with a header.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{},{l:.9}\n", i + 1));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Init;

    #[test]
    fn token_labels_from_masks() {
        let zero = Tensor::zeros(&[16, 16]);
        assert_eq!(token_labels(&zero, 8, 3, 0).unwrap(), vec![0; 4]);
        let one = Tensor::full(&[16, 16], 1.0);
        assert_eq!(token_labels(&one, 8, 6, 0).unwrap(), vec![6; 4]);

        // exactly one 8×8 patch covered
        let mut m = Tensor::zeros(&[16, 16]);
        for y in 8..16 {
            for x in 0..8 {
                m.row_mut(y)[x] = 1.0;
            }
        }
        assert_eq!(token_labels(&m, 8, 2, 0).unwrap(), vec![0, 0, 2, 0]);

        // exactly half a patch counts as defect, one pixel less does not
        let mut half = Tensor::zeros(&[8, 8]);
        for y in 0..4 {
            half.row_mut(y).iter_mut().for_each(|v| *v = 1.0);
        }
        assert_eq!(token_labels(&half, 8, 1, 0).unwrap(), vec![1]);
        half.row_mut(0)[0] = 0.0;
        assert_eq!(token_labels(&half, 8, 1, 0).unwrap(), vec![0]);

        assert!(token_labels(&Tensor::zeros(&[10, 10]), 8, 1, 0).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        adam_step(
            &mut [&mut p],
            &[Tensor::zeros(&[2])],
            &mut st,
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient() {
        let mut p = Tensor::from_vec(vec![0.0, 0.0, 0.0]);
        let g = Tensor::from_vec(vec![3.0, -0.01, 200.0]);
        let mut st = AdamState::new(&[&p]);
        let cfg = TrainConfig {
            lr: 0.05,
            ..Default::default()
        };
        adam_step(&mut [&mut p], &[g], &mut st, &cfg).unwrap();
        assert!((p.data()[0] + 0.05).abs() < 1e-6);
        assert!((p.data()[1] - 0.05).abs() < 1e-4);
        assert!((p.data()[2] + 0.05).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_scalar_trace_on_parabola() {
        // f(x) = x², f'(x) = 2x, three steps from x = 1.
        let cfg = TrainConfig {
            lr: 0.1,
            ..Default::default()
        };
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut st = AdamState::new(&[&p]);
        for t in 1..=3 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);

            let grad = Tensor::from_vec(vec![2.0 * p.data()[0]]);
            adam_step(&mut [&mut p], &[grad], &mut st, &cfg).unwrap();
            assert!((p.data()[0] as f64 - x).abs() < 1e-6, "step {t}");
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let mut st = AdamState::new(&[&p]);
        let err = adam_step(
            &mut [&mut p],
            &[Tensor::zeros(&[3])],
            &mut st,
            &TrainConfig::default(),
        );
        assert!(err.is_err());
    }

    fn toy_cache() -> (FeatureCache, TextEmbeddingSet) {
        let mut init = Init::new(21);
        let t = TextEmbeddingSet::new(
            vec!["good".into(), "a".into(), "b".into()],
            init.normal(&[3, 4], 1.0),
        )
        .unwrap();
        let entries = (0..3)
            .map(|i| CacheEntry {
                patch_f: (0..2).map(|_| init.normal(&[4, 4], 1.0)).collect(),
                patch_v: (0..2).map(|_| init.normal(&[4, 4], 1.0)).collect(),
                cls: (0..2).map(|_| init.normal(&[4], 1.0)).collect(),
                label: i,
                token_labels: vec![0, i, 0, i],
            })
            .collect();
        (
            FeatureCache {
                entries,
                n_classes: 3,
                good_index: 0,
            },
            t,
        )
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (cache, t) = toy_cache();
        let tl = TransformationLayer::init(2, 4, 4, 1);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 5,
            ..Default::default()
        };
        let (after, curve) = train_transformation(&cache, &t, &tl, &cfg, 0.07).unwrap();
        assert_eq!(after, tl);
        assert!(curve.windows(2).all(|w| w[0] == w[1]));

        let head = ClassifierHead::init(8, 3, 2);
        let (h2, curve) = train_head(&cache, &head, &cfg).unwrap();
        assert_eq!(h2, head);
        assert!(curve.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn first_epoch_loss_independent_of_epoch_count() {
        let (cache, t) = toy_cache();
        let tl = TransformationLayer::init(2, 4, 4, 1);
        let one = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let two = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let (_, c1) = train_transformation(&cache, &t, &tl, &one, 0.07).unwrap();
        let (_, c2) = train_transformation(&cache, &t, &tl, &two, 0.07).unwrap();
        assert_eq!(c1[0], c2[0]);
    }

    #[test]
    fn duplicated_cache_gives_same_head_trajectory() {
        let (cache, _) = toy_cache();
        let mut doubled = cache.clone();
        doubled.entries.extend(cache.entries.clone());
        let head = ClassifierHead::init(8, 3, 2);
        let cfg = TrainConfig {
            epochs: 10,
            lr: 0.01,
            ..Default::default()
        };
        let (a, ca) = train_head(&cache, &head, &cfg).unwrap();
        let (b, cb) = train_head(&doubled, &head, &cfg).unwrap();
        for (x, y) in ca.iter().zip(&cb) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_cache_is_rejected() {
        let (mut cache, t) = toy_cache();
        cache.entries.clear();
        let tl = TransformationLayer::init(2, 4, 4, 1);
        assert!(transformation_loss(&cache, &t, &tl, 0.07, 1.0).is_err());
        assert!(head_loss(&cache, &ClassifierHead::zeros(8, 3)).is_err());
    }

    #[test]
    fn nonfinite_features_trip_the_divergence_guard() {
        let (mut cache, t) = toy_cache();
        cache.entries[0].cls[0].data_mut()[0] = f32::NAN;
        let err = train_head(
            &cache,
            &ClassifierHead::zeros(8, 3),
            &TrainConfig::default(),
        );
        assert!(matches!(err, Err(Error::Numeric(_))));
        cache.entries[0].patch_f[0].data_mut()[0] = f32::INFINITY;
        let tl = TransformationLayer::init(2, 4, 4, 1);
        let err = train_transformation(&cache, &t, &tl, &TrainConfig::default(), 0.07);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn curve_csv() {
        assert_eq!(
            loss_curve_csv(&[0.5, 0.25]),
            "epoch,loss\n1,0.500000000\n2,0.250000000\n"
        );
    }

    fn unit(d: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    /// Two classes with orthogonal text embeddings; good tokens sit near
    /// `e3 + 0.5 e2` and defect tokens near `e3 + 0.5 e1`, so the identity
    /// start gets every token wrong.
    fn separable_toy() -> (FeatureCache, TextEmbeddingSet) {
        let t = TextEmbeddingSet::new(
            vec!["good".into(), "defect".into()],
            Tensor::from_rows(&[unit(4, 0), unit(4, 1)]).unwrap(),
        )
        .unwrap();
        let mut init = Init::new(5);
        let entries = (0..4)
            .map(|i| {
                let labels: Vec<usize> = (0..6).map(|r| usize::from((r + i) % 3 == 0)).collect();
                let rows: Vec<Vec<f32>> = labels
                    .iter()
                    .map(|&l| {
                        let noise = init.normal(&[4], 0.05);
                        let mut x = vec![0.0, 0.0, 1.0, 0.0];
                        x[if l == 0 { 1 } else { 0 }] += 0.5;
                        x.iter().zip(noise.data()).map(|(a, b)| a + b).collect()
                    })
                    .collect();
                CacheEntry {
                    patch_f: vec![Tensor::from_rows(&rows).unwrap()],
                    patch_v: vec![Tensor::zeros(&[6, 4])],
                    cls: vec![Tensor::zeros(&[4])],
                    label: 1,
                    token_labels: labels,
                }
            })
            .collect();
        (
            FeatureCache {
                entries,
                n_classes: 2,
                good_index: 0,
            },
            t,
        )
    }

    /// Scalar f64 transformation loss written directly from its definition.
    fn reference_loss(
        cache: &FeatureCache,
        t: &TextEmbeddingSet,
        w: &[f64],
        b: &[f64],
        tau: f64,
    ) -> f64 {
        let d = t.dim();
        let mut total = 0.0;
        let mut count = 0.0;
        for e in &cache.entries {
            let x = &e.patch_f[0];
            for (r, &label) in e.token_labels.iter().enumerate() {
                let y: Vec<f64> = (0..d)
                    .map(|k| {
                        b[k] + (0..x.cols())
                            .map(|c| x.row(r)[c] as f64 * w[c * d + k])
                            .sum::<f64>()
                    })
                    .collect();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                let z: Vec<f64> = (0..t.num_classes())
                    .map(|c| {
                        let tc = t.embeddings.row(c);
                        (0..d).map(|k| y[k] * tc[k] as f64).sum::<f64>() / ny / tau
                    })
                    .collect();
                let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                total += lse - z[label];
                count += 1.0;
            }
        }
        total / count
    }

    /// Plain Adam on the reference loss with central-difference gradients.
    fn reference_train(
        cache: &FeatureCache,
        t: &TextEmbeddingSet,
        tl: &TransformationLayer,
        cfg: &TrainConfig,
        tau: f64,
    ) -> Vec<f64> {
        let nw = tl.levels[0].weight.len();
        let mut p: Vec<f64> = tl.levels[0]
            .weight
            .data()
            .iter()
            .chain(tl.levels[0].bias.data())
            .map(|&v| v as f64)
            .collect();
        let (mut m, mut v) = (vec![0.0; p.len()], vec![0.0; p.len()]);
        let (b1, b2, lr, eps) = (
            cfg.beta1 as f64,
            cfg.beta2 as f64,
            cfg.lr as f64,
            cfg.eps as f64,
        );
        let loss = |p: &[f64]| reference_loss(cache, t, &p[..nw], &p[nw..], tau);
        let mut curve = Vec::new();
        for step in 1..=cfg.epochs {
            curve.push(loss(&p));
            let grad: Vec<f64> = (0..p.len())
                .map(|i| {
                    let h = 1e-6;
                    let (mut hi, mut lo) = (p.clone(), p.clone());
                    hi[i] += h;
                    lo[i] -= h;
                    (loss(&hi) - loss(&lo)) / (2.0 * h)
                })
                .collect();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let mh = m[i] / (1.0 - b1.powi(step as i32));
                let vh = v[i] / (1.0 - b2.powi(step as i32));
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        curve
    }

    #[test]
    fn separable_toy_matches_reference_descent() {
        let (cache, t) = separable_toy();
        let tl = TransformationLayer::init(1, 4, 4, 9);
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 100,
            ..Default::default()
        };
        let (_, curve) = train_transformation(&cache, &t, &tl, &cfg, 0.07).unwrap();
        let reference = reference_train(&cache, &t, &tl, &cfg, 0.07);
        assert!((curve[0] - reference[0]).abs() < 1e-5 * reference[0]);
        let (last, ref_last) = (*curve.last().unwrap(), *reference.last().unwrap());
        assert!(last < 0.1 * curve[0], "loss {} -> {last}", curve[0]);
        assert!(ref_last < 0.1 * reference[0]);
        assert!(
            (last - ref_last).abs() < 0.05 * reference[0],
            "{last} vs {ref_last}"
        );
    }

    #[test]
    fn head_separates_two_one_hot_points() {
        let entries = (0..2)
            .map(|i| CacheEntry {
                patch_f: vec![Tensor::zeros(&[1, 2])],
                patch_v: vec![Tensor::zeros(&[1, 2])],
                cls: vec![Tensor::from_vec(unit(2, i))],
                label: i,
                token_labels: vec![0],
            })
            .collect();
        let cache = FeatureCache {
            entries,
            n_classes: 2,
            good_index: 0,
        };
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 200,
            ..Default::default()
        };
        let (head, curve) = train_head(&cache, &ClassifierHead::init(2, 2, 3), &cfg).unwrap();
        for e in &cache.entries {
            let z = head.logits(&e.cls_concat()).unwrap();
            assert_eq!(crate::cls::argmax(&z), e.label);
        }
        assert!(curve.last().unwrap() < &0.05);
    }
}
