//! Evaluation of a trained model on an indexed test split, and the report
//! and score files written for it.

use std::path::Path;

use prn_tensor::Tensor;
use serde::Serialize;

use crate::config::EvalConfig;
use crate::dataset::TestSample;
use crate::error::{PrnError, Result};
use crate::metrics::{evaluate_scored, EvalReport, ScoredImage};
use crate::model::PrnModel;

/// Scores every test image and computes the four metrics.
pub fn evaluate_model(model: &PrnModel, test: &[TestSample], eval: &EvalConfig) -> Result<(EvalReport, Vec<ScoredImage>)> {
    let images: Vec<_> = test.iter().map(|t| t.image.clone()).collect();
    let scored: Vec<ScoredImage> = model
        .score_images(&images)?
        .into_iter()
        .zip(test)
        .map(|((map, score), t)| ScoredImage { id: t.id.clone(), map, score: score as f64, mask: t.mask.clone() })
        .collect();
    let report = evaluate_scored(&scored, eval.pro_fpr_limit, eval.max_thresholds)?;
    Ok((report, scored))
}

/// Report for a detector that outputs `value` everywhere.
pub fn evaluate_constant(test: &[TestSample], value: f32, eval: &EvalConfig) -> Result<EvalReport> {
    let scored: Vec<ScoredImage> = test
        .iter()
        .map(|t| ScoredImage {
            id: t.id.clone(),
            map: Tensor::full(&[t.mask.height(), t.mask.width()], value),
            score: value as f64,
            mask: t.mask.clone(),
        })
        .collect();
    evaluate_scored(&scored, eval.pro_fpr_limit, eval.max_thresholds)
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    id: &'a str,
    label: u8,
    score: f64,
    max_pixel: f32,
    mask_pixels: usize,
}

pub fn write_scores_csv(scored: &[ScoredImage], path: &Path) -> Result<()> {
    let fail = |e: csv::Error| PrnError::Format { path: path.into(), reason: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for s in scored {
        let max_pixel = s.map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        w.serialize(ScoreRow {
            id: &s.id,
            label: s.is_anomalous() as u8,
            score: s.score,
            max_pixel,
            mask_pixels: s.mask.count(),
        })
        .map_err(fail)?;
    }
    w.flush().map_err(|e| PrnError::io(path, e))
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PrnError::io(dir, e))?;
    }
    std::fs::write(path, report.to_text()).map_err(|e| PrnError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Mask;

    fn sample(id: &str, anomalous: bool) -> TestSample {
        let mask = if anomalous { Mask::from_fn(4, 4, |y, _| y == 0) } else { Mask::empty(4, 4) };
        TestSample {
            id: id.into(),
            defect: anomalous.then(|| "x".into()),
            image: Tensor::zeros(&[3, 4, 4]),
            mask,
        }
    }

    #[test]
    fn constant_detector_sits_at_chance() {
        let test = vec![sample("a", false), sample("b", true), sample("c", false), sample("d", true)];
        let r = evaluate_constant(&test, 0.5, &EvalConfig::default()).unwrap();
        assert_eq!(r.image_auroc, 0.5);
        assert_eq!(r.pixel_auroc, 0.5);
        assert!((r.pixel_ap - r.anomalous_pixel_rate()).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let scored = vec![ScoredImage { id: "good/000".into(), map: Tensor::full(&[2, 2], 0.25), score: 0.25, mask: Mask::empty(2, 2) }];
        write_scores_csv(&scored, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "id,label,score,max_pixel,mask_pixels\ngood/000,0,0.25,0.25,0\n");
    }
}
