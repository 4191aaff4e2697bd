//! Detection and localization metrics: ROC AUC, average precision and the
//! per-region overlap (PRO) score.
//!
//! All three sweep thresholds over the distinct observed scores; equal
//! scores always form a single operating point.

use prn_tensor::Tensor;
use serde::Serialize;

use crate::error::{PrnError, Result};
use crate::imaging::{label_components, Mask};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(PrnError::dim(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PrnError::UndefinedMetric("scores contain NaN".into()));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Area under the ROC curve by trapezoidal integration over tied groups;
/// equals `P(s+ > s-) + P(s+ = s-) / 2`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(PrnError::UndefinedMetric("ROC AUC needs both positive and negative samples".into()));
    }
    let order = descending(scores);
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// `sum_k (R_k - R_{k-1}) * P_k` over descending tied thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(PrnError::UndefinedMetric("average precision needs at least one positive".into()));
    }
    let order = descending(scores);
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let tp0 = tp;
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        if tp > tp0 {
            ap += (tp - tp0) as f64 / pos as f64 * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// One operating point of the PRO curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub pro: f64,
}

/// Mean region overlap against false-positive rate, one point per
/// threshold in descending order, starting from the empty prediction.
pub fn pro_curve(maps: &[&[f32]], masks: &[&Mask], max_thresholds: Option<usize>) -> Result<Vec<ProPoint>> {
    if maps.len() != masks.len() {
        return Err(PrnError::dim(format!("{} score maps but {} masks", maps.len(), masks.len())));
    }
    // Per pixel: score, region id (0 = normal pixel).
    let mut pixels: Vec<(f32, u32)> = Vec::new();
    let mut region_sizes: Vec<usize> = vec![0];
    for (map, mask) in maps.iter().zip(masks) {
        if map.len() != mask.len() {
            return Err(PrnError::dim(format!("score map has {} pixels, mask {}", map.len(), mask.len())));
        }
        let (labels, count) = label_components(mask);
        let base = region_sizes.len() as u32 - 1;
        region_sizes.resize(region_sizes.len() + count, 0);
        for (&s, &l) in map.iter().zip(&labels) {
            if s.is_nan() {
                return Err(PrnError::UndefinedMetric("score map contains NaN".into()));
            }
            let region = if l == 0 { 0 } else { base + l };
            region_sizes[region as usize] += 1;
            pixels.push((s, region));
        }
    }
    let n_regions = region_sizes.len() - 1;
    if n_regions == 0 {
        return Err(PrnError::UndefinedMetric("PRO needs at least one ground-truth region".into()));
    }
    let n_normal = region_sizes[0];
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut thresholds: Vec<f64> = Vec::new();
    for &(s, _) in &pixels {
        if thresholds.last() != Some(&(s as f64)) {
            thresholds.push(s as f64);
        }
    }
    if let Some(m) = max_thresholds.filter(|&m| m >= 2 && thresholds.len() > m) {
        let last = thresholds.len() - 1;
        thresholds = (0..m).map(|q| thresholds[q * last / (m - 1)]).collect();
        thresholds.dedup();
    }

    let mut covered = vec![0usize; region_sizes.len()];
    let mut fp = 0usize;
    let mut overlap_sum = 0.0f64;
    let mut curve = vec![ProPoint { threshold: f64::INFINITY, fpr: 0.0, pro: 0.0 }];
    let mut i = 0;
    for &t in &thresholds {
        while i < pixels.len() && pixels[i].0 as f64 >= t {
            let r = pixels[i].1 as usize;
            if r == 0 {
                fp += 1;
            } else {
                covered[r] += 1;
                overlap_sum += 1.0 / region_sizes[r] as f64;
            }
            i += 1;
        }
        let fpr = if n_normal == 0 { 0.0 } else { fp as f64 / n_normal as f64 };
        curve.push(ProPoint { threshold: t, fpr, pro: (overlap_sum / n_regions as f64).min(1.0) });
    }
    Ok(curve)
}

/// Normalized area under a step-interpolated PRO curve on `[0, fpr_limit]`.
/// Each operating point's overlap holds until the next point's FPR.
pub fn integrate_pro(curve: &[ProPoint], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(PrnError::config(format!("fpr_limit {fpr_limit} must lie in (0, 1]")));
    }
    let mut area = 0.0;
    for (k, p) in curve.iter().enumerate() {
        let next = curve.get(k + 1).map_or(fpr_limit, |q| q.fpr.min(fpr_limit));
        let start = p.fpr.min(fpr_limit);
        area += (next - start).max(0.0) * p.pro;
    }
    Ok(area / fpr_limit)
}

pub fn pro_score(maps: &[&[f32]], masks: &[&Mask], fpr_limit: f64, max_thresholds: Option<usize>) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(PrnError::config(format!("fpr_limit {fpr_limit} must lie in (0, 1]")));
    }
    integrate_pro(&pro_curve(maps, masks, max_thresholds)?, fpr_limit)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pro: f64,
    pub pixel_ap: f64,
    pub n_images: usize,
    pub n_anomalous: usize,
    pub n_pixels: usize,
    pub n_anomalous_pixels: usize,
    pub fpr_limit: f64,
}

impl EvalReport {
    /// Fraction of anomalous pixels: the AP of a random scorer.
    pub fn anomalous_pixel_rate(&self) -> f64 {
        self.n_anomalous_pixels as f64 / self.n_pixels.max(1) as f64
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "image_auroc = {:.6}\npixel_auroc = {:.6}\npro = {:.6}\npixel_ap = {:.6}\nn_images = {}\nn_anomalous = {}\nn_pixels = {}\nn_anomalous_pixels = {}\nfpr_limit = {}\n",
            self.image_auroc,
            self.pixel_auroc,
            self.pro,
            self.pixel_ap,
            self.n_images,
            self.n_anomalous,
            self.n_pixels,
            self.n_anomalous_pixels,
            self.fpr_limit
        )
    }
}

/// One evaluated image: its score map, image score and ground truth.
#[derive(Clone, Debug)]
pub struct ScoredImage {
    pub id: String,
    pub map: Tensor<f32>,
    pub score: f64,
    pub mask: Mask,
}

impl ScoredImage {
    pub fn is_anomalous(&self) -> bool {
        !self.mask.is_empty()
    }
}

pub fn evaluate_scored(items: &[ScoredImage], fpr_limit: f64, max_thresholds: Option<usize>) -> Result<EvalReport> {
    let scores: Vec<f64> = items.iter().map(|i| i.score).collect();
    let labels: Vec<bool> = items.iter().map(ScoredImage::is_anomalous).collect();
    let image_auroc = roc_auc(&scores, &labels).map_err(|e| e.context("image AUROC"))?;
    let pixel_scores: Vec<f64> = items.iter().flat_map(|i| i.map.data().iter().map(|&v| v as f64)).collect();
    let pixel_labels: Vec<bool> = items.iter().flat_map(|i| i.mask.bits()).collect();
    let pixel_auroc = roc_auc(&pixel_scores, &pixel_labels).map_err(|e| e.context("pixel AUROC"))?;
    let pixel_ap = average_precision(&pixel_scores, &pixel_labels).map_err(|e| e.context("pixel AP"))?;
    let maps: Vec<&[f32]> = items.iter().map(|i| i.map.data()).collect();
    let masks: Vec<&Mask> = items.iter().map(|i| &i.mask).collect();
    let pro = pro_score(&maps, &masks, fpr_limit, max_thresholds).map_err(|e| e.context("PRO"))?;
    Ok(EvalReport {
        image_auroc,
        pixel_auroc,
        pro,
        pixel_ap,
        n_images: items.len(),
        n_anomalous: labels.iter().filter(|&&l| l).count(),
        n_pixels: pixel_labels.len(),
        n_anomalous_pixels: pixel_labels.iter().filter(|&&l| l).count(),
        fpr_limit,
    })
}
