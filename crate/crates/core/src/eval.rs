//! Detection and classification metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const F1_THRESHOLDS: usize = 256;

/// Scores paired with binary ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f32>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f32>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        Ok(Self { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Mann–Whitney AUROC with midranks for ties.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let n = set.scores.len();
    if set.labels.len() != n {
        return Err(Error::Data("scores and labels differ in length".into()));
    }
    if set.scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = set.positives();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| set.labels[k]).count();
        rank_sum += midrank * tied_pos as f64;
        i = j;
    }
    let (p, q) = (pos as f64, neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * q))
}

fn threshold(k: usize) -> f64 {
    k as f64 / (F1_THRESHOLDS - 1) as f64
}

/// Number of thresholds `k/255` that `s` meets or exceeds, minus one.
fn threshold_bucket(s: f32) -> usize {
    let s = s as f64;
    let mut k = (s * (F1_THRESHOLDS - 1) as f64).floor().clamp(0.0, 255.0) as usize;
    while k > 0 && threshold(k) > s {
        k -= 1;
    }
    while k + 1 < F1_THRESHOLDS && threshold(k + 1) <= s {
        k += 1;
    }
    k
}

fn f1(tp: u64, fp: u64, fnn: u64) -> f64 {
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Maximum pooled F1 over 256 evenly spaced thresholds in `[0, 1]`.
/// A pixel is predicted defective when its score is at least the threshold.
pub fn f1_max(maps: &[Tensor], masks: &[Tensor]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::Data(format!(
            "{} maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut pos_hist = [0u64; F1_THRESHOLDS];
    let mut neg_hist = [0u64; F1_THRESHOLDS];
    for (map, mask) in maps.iter().zip(masks) {
        if map.shape() != mask.shape() {
            return Err(Error::Data(format!(
                "map {:?} and mask {:?} differ in shape",
                map.shape(),
                mask.shape()
            )));
        }
        for (&s, &m) in map.data().iter().zip(mask.data()) {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Data(format!("pixel score {s} outside [0, 1]")));
            }
            let hist = if m > 0.5 {
                &mut pos_hist
            } else {
                &mut neg_hist
            };
            hist[threshold_bucket(s)] += 1;
        }
    }
    let total_pos: u64 = pos_hist.iter().sum();
    if total_pos == 0 {
        return Err(Error::Data("F1-max needs at least one defect pixel".into()));
    }
    // sweep from the highest threshold down, accumulating predictions
    let (mut tp, mut fp, mut best) = (0u64, 0u64, 0.0f64);
    for k in (0..F1_THRESHOLDS).rev() {
        tp += pos_hist[k];
        fp += neg_hist[k];
        best = best.max(f1(tp, fp, total_pos - tp));
    }
    Ok(best)
}

/// Confusion matrix plus macro-averaged scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

pub fn classification_metrics(
    predicted: &[usize],
    truth: &[usize],
    n_classes: usize,
) -> Result<ClassificationMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Data("no samples to score".into()));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::Data(format!(
                "class index out of range for {n_classes} classes"
            )));
        }
        confusion[t][p] += 1;
    }
    let correct: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
    let (mut ps, mut rs, mut fs, mut counted) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let actual: u64 = confusion[c].iter().sum();
        let predicted_c: u64 = confusion.iter().map(|row| row[c]).sum();
        if actual == 0 && predicted_c == 0 {
            continue;
        }
        let p = if predicted_c > 0 {
            tp as f64 / predicted_c as f64
        } else {
            0.0
        };
        let r = if actual > 0 {
            tp as f64 / actual as f64
        } else {
            0.0
        };
        ps += p;
        rs += r;
        fs += f1(tp, predicted_c - tp, actual - tp);
        counted += 1;
    }
    let k = counted as f64;
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / truth.len() as f64,
        precision: ps / k,
        recall: rs / k,
        f1: fs / k,
        confusion,
    })
}

/// Image-level and pixel-level detection scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionMetrics {
    pub iauroc: f64,
    pub pauroc: f64,
    pub f1_max: f64,
}

/// Scores fused pixel maps against masks. The image score is the map maximum
/// and an image is positive when its mask has any defect pixel.
pub fn detection_metrics(maps: &[Tensor], masks: &[Tensor]) -> Result<DetectionMetrics> {
    if maps.len() != masks.len() {
        return Err(Error::Data("maps and masks differ in count".into()));
    }
    let image_scores: Vec<f32> = maps
        .par_iter()
        .map(|m| m.data().iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect();
    let image_labels: Vec<bool> = masks
        .iter()
        .map(|m| m.data().iter().any(|&v| v > 0.5))
        .collect();
    let iauroc = auroc(&ScoredSet::new(image_scores, image_labels)?)?;
    let pixels = ScoredSet::new(
        maps.iter().flat_map(|m| m.data().iter().copied()).collect(),
        masks
            .iter()
            .flat_map(|m| m.data().iter().map(|&v| v > 0.5))
            .collect(),
    )?;
    let pauroc = auroc(&pixels)?;
    Ok(DetectionMetrics {
        iauroc,
        pauroc,
        f1_max: f1_max(maps, masks)?,
    })
}

/// Full evaluation report; serializes to `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iauroc: f64,
    pub pauroc: f64,
    #[serde(rename = "f1max")]
    pub f1_max: f64,
    pub accuracy: f64,
    #[serde(rename = "precision")]
    pub macro_precision: f64,
    #[serde(rename = "recall")]
    pub macro_recall: f64,
    #[serde(rename = "f1")]
    pub macro_f1: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn new(det: DetectionMetrics, cls: ClassificationMetrics) -> Self {
        Self {
            iauroc: det.iauroc,
            pauroc: det.pauroc,
            f1_max: det.f1_max,
            accuracy: cls.accuracy,
            macro_precision: cls.precision,
            macro_recall: cls.recall,
            macro_f1: cls.f1,
            confusion: cls.confusion,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub const CSV_HEADER: &'static str = "iauroc,pauroc,f1max,accuracy,precision,recall,f1";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.iauroc,
            self.pauroc,
            self.f1_max,
            self.accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1
        )
    }
}
