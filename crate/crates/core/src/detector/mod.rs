//! Detector adapter contract, IoU, greedy NMS and the filtering pipeline
//! shared by every detector.

pub mod nn;
pub mod synth;
pub mod toy;

use std::any::Any;
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{BoundingBox, Detection, SceneImage};

pub use synth::{generate_synthetic_dataset, SyntheticSceneSpec};
pub use toy::{train_toy_detector, ToyDetector, ToyTrainConfig, TrainedDetector};

/// A pre-NMS detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCandidate {
    pub bbox: BoundingBox,
    pub objectness: f64,
    /// Scores aligned with [`DetectorAdapter::class_names`].
    pub class_scores: Vec<f64>,
}

/// Result of a forward pass. `trace` holds whatever the adapter needs to
/// compute input gradients afterwards.
pub struct ForwardOutput {
    pub candidates: Vec<RawCandidate>,
    pub trace: Option<Box<dyn Any + Send>>,
}

/// What the toolkit requires from any detector.
///
/// Implementations keep their weights frozen: nothing in the toolkit mutates
/// them, and [`DetectorAdapter::parameter_checksum`] lets callers verify it.
pub trait DetectorAdapter: Send + Sync {
    fn id(&self) -> &str;

    /// Expected input as `(height, width)`.
    fn input_size(&self) -> (usize, usize);

    fn class_names(&self) -> &[String];

    /// Runs the detector. With `keep_trace` the output can be passed to
    /// [`DetectorAdapter::objectness_input_gradient`].
    fn forward(&self, image: &SceneImage, keep_trace: bool) -> Result<ForwardOutput>;

    /// Gradient of `sum_i seed_i * objectness(candidate_i)` with respect to
    /// every input pixel (channel-major, like [`SceneImage::pixels`]).
    fn objectness_input_gradient(&self, output: &ForwardOutput, seeds: &[(usize, f64)]) -> Result<Vec<f32>>;

    /// Stable digest of every parameter.
    fn parameter_checksum(&self) -> String;

    /// Whether concurrent forward passes are safe.
    fn reentrant(&self) -> bool {
        true
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression. Candidates are visited by descending
/// score (lower index first on ties); a candidate survives unless it overlaps
/// an already kept one with IoU above `iou_threshold`. Returns the kept
/// indices in visit order.
pub fn nms(candidates: &[(BoundingBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &candidates[i].0;
        if kept.iter().all(|&k| iou(&candidates[k].0, b) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Confidence filtering followed by NMS over raw candidates.
pub fn postprocess(
    candidates: &[RawCandidate],
    class_names: &[String],
    conf_threshold: f64,
    iou_threshold: f64,
) -> Vec<Detection> {
    let confident: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].objectness >= conf_threshold)
        .collect();
    let boxes: Vec<(BoundingBox, f64)> = confident
        .iter()
        .map(|&i| (candidates[i].bbox, candidates[i].objectness))
        .collect();
    nms(&boxes, iou_threshold)
        .into_iter()
        .map(|k| {
            let i = confident[k];
            let c = &candidates[i];
            Detection {
                bbox: c.bbox,
                objectness: c.objectness,
                class_scores: class_names
                    .iter()
                    .cloned()
                    .zip(c.class_scores.iter().copied())
                    .collect::<BTreeMap<_, _>>(),
                candidate: Some(i),
            }
        })
        .collect()
}

/// Runs `adapter` and post-processes its candidates.
pub fn detect(
    adapter: &dyn DetectorAdapter,
    image: &SceneImage,
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<Vec<Detection>> {
    let (h, w) = adapter.input_size();
    if image.height() != h || image.width() != w {
        return Err(Error::Detector {
            id: adapter.id().to_string(),
            message: format!(
                "input is {}x{}, detector expects {w}x{h}",
                image.width(),
                image.height()
            ),
        });
    }
    let out = adapter.forward(image, false).map_err(|e| Error::Detector {
        id: adapter.id().to_string(),
        message: e.to_string(),
    })?;
    Ok(postprocess(&out.candidates, adapter.class_names(), conf_threshold, iou_threshold))
}

type Loader = fn(&Path) -> Result<Box<dyn DetectorAdapter>>;

/// Maps `detector.id` config values to loaders. The toy detector is always
/// registered; other adapters are added by the embedding application.
pub struct DetectorRegistry {
    loaders: BTreeMap<String, Loader>,
}

impl Default for DetectorRegistry {
    fn default() -> Self {
        let mut loaders: BTreeMap<String, Loader> = BTreeMap::new();
        loaders.insert(toy::TOY_DETECTOR_KIND.to_string(), |p| {
            Ok(Box::new(ToyDetector::load(p)?) as Box<dyn DetectorAdapter>)
        });
        Self { loaders }
    }
}

impl DetectorRegistry {
    pub fn register(&mut self, kind: impl Into<String>, loader: Loader) {
        self.loaders.insert(kind.into(), loader);
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.loaders.keys().map(String::as_str)
    }

    /// Loads a detector. `id` is either a registered kind or `kind:name`.
    pub fn load(&self, id: &str, checkpoint: &Path) -> Result<Box<dyn DetectorAdapter>> {
        let kind = id.split(':').next().unwrap_or(id);
        let loader = self.loaders.get(kind).ok_or_else(|| Error::Detector {
            id: id.to_string(),
            message: format!(
                "no adapter registered for `{kind}` (known: {})",
                self.kinds().collect::<Vec<_>>().join(", ")
            ),
        })?;
        loader(checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nms_keeps_disjoint_boxes() {
        let c = vec![
            (bx(0.0, 0.0, 1.0, 1.0), 0.5),
            (bx(2.0, 2.0, 3.0, 3.0), 0.9),
            (bx(4.0, 4.0, 5.0, 5.0), 0.7),
        ];
        let mut kept = nms(&c, 0.45);
        kept.sort();
        assert_eq!(kept, vec![0, 1, 2]);
    }

    #[test]
    fn nms_identical_boxes_keep_best() {
        let b = bx(0.0, 0.0, 4.0, 4.0);
        assert_eq!(nms(&[(b, 0.9), (b, 0.8), (b, 0.7)], 0.45), vec![0]);
        assert_eq!(nms(&[(b, 0.7), (b, 0.9), (b, 0.8)], 0.45), vec![1]);
    }

    #[test]
    fn nms_tie_prefers_lower_index() {
        let b = bx(0.0, 0.0, 4.0, 4.0);
        assert_eq!(nms(&[(b, 0.5), (b, 0.5)], 0.45), vec![0]);
    }

    #[test]
    fn postprocess_suppresses_high_overlap() {
        let names = vec!["aircraft".to_string()];
        let cand = |b: BoundingBox, s: f64| RawCandidate {
            bbox: b,
            objectness: s,
            class_scores: vec![1.0],
        };
        // IoU = 0.9 exactly: 9 units of overlap on 10-wide boxes.
        let a = bx(0.0, 0.0, 10.0, 1.0);
        let b = bx(0.0, 0.0, 9.0, 1.0);
        assert!((iou(&a, &b) - 0.9).abs() < 1e-12);
        let dets = postprocess(&[cand(a, 0.9), cand(b, 0.8)], &names, 0.4, 0.45);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].objectness, 0.9);
        assert_eq!(dets[0].candidate, Some(0));
    }

    /// Reference NMS: repeatedly take the best remaining candidate and drop
    /// everything overlapping it.
    pub(crate) fn brute_force_nms(c: &[(BoundingBox, f64)], thr: f64) -> Vec<usize> {
        let mut alive = vec![true; c.len()];
        let mut kept = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..c.len() {
                if alive[i] && best.is_none_or(|b| c[i].1 > c[b].1) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            kept.push(b);
            for i in 0..c.len() {
                if alive[i] && iou(&c[i].0, &c[b].0) > thr {
                    alive[i] = false;
                }
            }
            alive[b] = false;
        }
        kept
    }

    #[test]
    fn nms_matches_reference_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..300 {
            let n = rng.gen_range(0..=20);
            let c: Vec<_> = (0..n)
                .map(|_| {
                    let x = rng.gen_range(0.0..20.0);
                    let y = rng.gen_range(0.0..20.0);
                    let b = bx(x, y, x + rng.gen_range(1.0..8.0), y + rng.gen_range(1.0..8.0));
                    (b, (rng.gen_range(0..10) as f64) / 10.0)
                })
                .collect();
            assert_eq!(nms(&c, 0.45), brute_force_nms(&c, 0.45));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn iou_is_bounded_and_symmetric(a in (0.0f64..50.0, 0.0f64..50.0, 0.1f64..30.0, 0.1f64..30.0),
                                            b in (0.0f64..50.0, 0.0f64..50.0, 0.1f64..30.0, 0.1f64..30.0)) {
                let a = bx(a.0, a.1, a.0 + a.2, a.1 + a.3);
                let b = bx(b.0, b.1, b.0 + b.2, b.1 + b.3);
                let v = iou(&a, &b);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert_eq!(v, iou(&b, &a));
            }
        }
    }
}
