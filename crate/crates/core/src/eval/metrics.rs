//! Detection matching, precision/recall curves and average precision.

use serde::{Deserialize, Serialize};

use crate::detector::iou;
use crate::types::{BoundingBox, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Confidence of the lowest-scored detection admitted at this point.
    pub cutoff: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub curve: PrCurve,
    pub n_truths: usize,
    pub n_detections: usize,
}

/// Labels each detection TP or FP. Detections must already be sorted by
/// descending objectness; each is matched to the highest-IoU still-unmatched
/// truth when that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], truths: &[BoundingBox], iou_threshold: f64) -> Vec<bool> {
    let mut used = vec![false; truths.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (t, truth) in truths.iter().enumerate() {
                if used[t] {
                    continue;
                }
                let v = iou(&d.bbox, truth);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((t, v));
                }
            }
            match best {
                Some((t, _)) => {
                    used[t] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// AP from `(score, is_tp)` pairs; `None` when there are no truths.
///
/// Pairs are ranked by descending score (stable for ties).
pub fn average_precision(labeled: &[(f64, bool)], n_truths: usize, interp: ApInterpolation) -> Option<ApResult> {
    if n_truths == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, bool)> = labeled.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, &(score, is_tp)) in ranked.iter().enumerate() {
        tp += is_tp as usize;
        points.push(PrPoint {
            recall: tp as f64 / n_truths as f64,
            precision: tp as f64 / (k + 1) as f64,
            cutoff: score,
        });
    }
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let ap = match interp {
        ApInterpolation::AllPoint => {
            // Recall grows by exactly 1 / n_truths at each true positive.
            // Folding from +0.0 keeps an empty sum from printing as -0.
            let sum = ranked
                .iter()
                .zip(&envelope)
                .filter(|((_, is_tp), _)| *is_tp)
                .fold(0.0, |acc, (_, &e)| acc + e);
            sum / n_truths as f64
        }
        ApInterpolation::ElevenPoint => {
            let mut sum = 0.0;
            for t in 0..=10 {
                let r = t as f64 / 10.0;
                sum += points
                    .iter()
                    .zip(&envelope)
                    .find(|(p, _)| p.recall >= r)
                    .map(|(_, &e)| e)
                    .unwrap_or(0.0);
            }
            sum / 11.0
        }
    };
    Some(ApResult {
        ap,
        curve: PrCurve { points },
        n_truths,
        n_detections: ranked.len(),
    })
}

/// Collects labeled detections across images for one class.
#[derive(Debug, Clone, Default)]
pub struct ApAccumulator {
    labeled: Vec<(f64, bool)>,
    n_truths: usize,
}

impl ApAccumulator {
    /// Adds one image. Only detections whose top class is `class` count.
    pub fn add_image(&mut self, dets: &[Detection], truths: &[BoundingBox], class: &str, iou_threshold: f64) {
        let mut mine: Vec<Detection> = dets
            .iter()
            .filter(|d| d.class_scores.is_empty() || d.top_class() == Some(class))
            .cloned()
            .collect();
        mine.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
        let labels = match_detections(&mine, truths, iou_threshold);
        self.labeled
            .extend(mine.iter().zip(labels).map(|(d, l)| (d.objectness, l)));
        self.n_truths += truths.len();
    }

    pub fn n_truths(&self) -> usize {
        self.n_truths
    }

    pub fn finish(&self, interp: ApInterpolation) -> Option<ApResult> {
        average_precision(&self.labeled, self.n_truths, interp)
    }
}
