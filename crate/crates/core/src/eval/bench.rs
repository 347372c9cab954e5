//! Patched, noise and clean evaluation; the transfer matrix; the dynamics
//! sweep and the resolution ablation.

use serde::{Deserialize, Serialize};

use crate::detector::{detect, DetectorAdapter};
use crate::error::{Error, Result};
use crate::eval::metrics::{ApAccumulator, ApInterpolation, ApResult, PrCurve};
use crate::optimizer::{init_patch, train_patch, RunConfig};
use crate::placement::{apply_patches, ResampleMode};
use crate::transforms::TransformParams;
use crate::types::{Patch, PlacementMode, PlacementSpec, SceneImage};

/// Everything that fixes how one evaluation is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub target_class: String,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    pub interpolation: ApInterpolation,
    pub placement: PlacementSpec,
    pub resample: ResampleMode,
}

impl EvalSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            target_class: cfg.target_class.clone(),
            conf_threshold: cfg.hyperparameters.conf_threshold,
            nms_iou: cfg.hyperparameters.iou_threshold,
            match_iou: cfg.evaluation.match_iou,
            interpolation: cfg.evaluation.interpolation,
            placement: cfg.placement,
            resample: cfg.resample,
        }
    }
}

/// The seeded random-noise patch used as the occlusion baseline.
pub fn noise_patch(resolution: usize, seed: u64) -> Result<Patch> {
    let mut p = init_patch(resolution, seed)?;
    p.id = "noise".into();
    Ok(p)
}

/// AP of `detector` on `images` with `patch` (if any) placed on every
/// ground-truth target under a fixed transform `condition`. `None` when
/// the images hold no target instances.
pub fn evaluate_under(
    detector: &dyn DetectorAdapter,
    images: &[SceneImage],
    patch: Option<&Patch>,
    s: &EvalSettings,
    condition: &TransformParams,
) -> Result<Option<ApResult>> {
    let mut acc = ApAccumulator::default();
    for img in images {
        let truths = img.boxes_of(&s.target_class);
        let dets = match patch {
            Some(p) if !truths.is_empty() => {
                let params = vec![condition.clone(); truths.len()];
                let scene = apply_patches(img, p, &s.placement, &truths, &params, s.resample)?;
                detect(detector, &scene.image, s.conf_threshold, s.nms_iou)?
            }
            _ => detect(detector, img, s.conf_threshold, s.nms_iou)?,
        };
        acc.add_image(&dets, &truths, &s.target_class, s.match_iou);
    }
    Ok(acc.finish(s.interpolation))
}

/// [`evaluate_under`] with no evaluation-time transform.
pub fn evaluate(
    detector: &dyn DetectorAdapter,
    images: &[SceneImage],
    patch: Option<&Patch>,
    s: &EvalSettings,
) -> Result<Option<ApResult>> {
    evaluate_under(detector, images, patch, s, &TransformParams::identity())
}

fn percent(r: &Option<ApResult>) -> Option<f64> {
    r.as_ref().map(|r| r.ap * 100.0)
}

/// A detector column; `adapter` is `None` when it could not be loaded.
pub struct DetectorSlot<'a> {
    pub id: String,
    pub adapter: Option<&'a dyn DetectorAdapter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    /// AP in percent; `None` when undefined or unavailable.
    pub ap: Option<f64>,
    pub white_box: bool,
    pub available: bool,
    pub curve: Option<PrCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    /// Proxy detector the patch was trained on, or `noise`.
    pub proxy: String,
    pub baseline: bool,
    pub cells: Vec<MatrixCell>,
}

/// Rows are patches, columns evaluation detectors, plus a noise row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub mode: PlacementMode,
    pub detectors: Vec<String>,
    /// Clean-image AP (percent) per column.
    pub clean: Vec<Option<f64>>,
    pub rows: Vec<MatrixRow>,
}

impl TransferMatrix {
    pub fn noise_row(&self) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.baseline)
    }

    pub fn column(&self, detector: &str) -> Option<usize> {
        self.detectors.iter().position(|d| d == detector)
    }

    /// The cell where `detector` is attacked by its own patch.
    pub fn white_box(&self, detector: &str) -> Option<&MatrixCell> {
        let c = self.column(detector)?;
        self.rows.iter().find(|r| !r.baseline && r.proxy == detector).map(|r| &r.cells[c])
    }
}

/// Evaluates every (patch, detector) pair plus the noise baseline.
pub fn run_transfer_benchmark(
    patches: &[(String, Patch)],
    detectors: &[DetectorSlot<'_>],
    images: &[SceneImage],
    s: &EvalSettings,
    noise_seed: u64,
) -> Result<TransferMatrix> {
    if detectors.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one detector".into()));
    }
    let resolution = patches.first().map(|(_, p)| p.height()).unwrap_or(crate::DEFAULT_PATCH_RESOLUTION);
    let noise = noise_patch(resolution, noise_seed)?;
    let mut clean = Vec::with_capacity(detectors.len());
    for slot in detectors {
        clean.push(match slot.adapter {
            Some(a) => percent(&evaluate(a, images, None, s)?),
            None => {
                log::warn!("detector `{}` unavailable; its column is marked as such", slot.id);
                None
            }
        });
    }
    let mut rows = Vec::with_capacity(patches.len() + 1);
    let all_rows = patches
        .iter()
        .map(|(proxy, p)| (proxy.as_str(), p, false))
        .chain(std::iter::once(("noise", &noise, true)));
    for (proxy, p, baseline) in all_rows {
        let mut cells = Vec::with_capacity(detectors.len());
        for slot in detectors {
            let white_box = !baseline && slot.id == proxy;
            cells.push(match slot.adapter {
                Some(a) => {
                    let r = evaluate(a, images, Some(p), s)?;
                    MatrixCell {
                        ap: percent(&r),
                        white_box,
                        available: true,
                        curve: r.map(|r| r.curve),
                    }
                }
                None => MatrixCell {
                    ap: None,
                    white_box,
                    available: false,
                    curve: None,
                },
            });
        }
        rows.push(MatrixRow {
            proxy: proxy.to_string(),
            baseline,
            cells,
        });
    }
    Ok(TransferMatrix {
        mode: s.placement.mode,
        detectors: detectors.iter().map(|d| d.id.clone()).collect(),
        clean,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub angle_deg: f64,
    pub scale: f64,
    pub brightness: f64,
    /// AP in percent.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub detector: String,
    pub patch: String,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, angle_deg: f64, scale: f64, brightness: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.angle_deg == angle_deg && c.scale == scale && c.brightness == brightness)
    }
}

/// Patched AP under each fixed (angle, scale, brightness) condition.
pub fn run_dynamics_sweep(
    patch: &Patch,
    detector: &dyn DetectorAdapter,
    images: &[SceneImage],
    s: &EvalSettings,
    angles: &[f64],
    scales: &[f64],
    brightness: &[f64],
) -> Result<SweepTable> {
    if angles.is_empty() || scales.is_empty() || brightness.is_empty() {
        return Err(Error::InvalidArgument("every sweep axis needs at least one value".into()));
    }
    if let Some(bad) = scales.iter().find(|&&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::InvalidArgument(format!("sweep scale {bad} must be positive")));
    }
    let mut cells = Vec::with_capacity(angles.len() * scales.len() * brightness.len());
    for &angle_deg in angles {
        for &scale in scales {
            for &b in brightness {
                let cond = TransformParams {
                    angle_deg,
                    scale,
                    brightness: b,
                    ..TransformParams::identity()
                };
                let r = evaluate_under(detector, images, Some(patch), s, &cond)?;
                cells.push(SweepCell {
                    angle_deg,
                    scale,
                    brightness: b,
                    ap: percent(&r),
                });
            }
        }
    }
    Ok(SweepTable {
        detector: detector.id().to_string(),
        patch: patch.id.clone(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub resolution: usize,
    pub patched_ap: Option<f64>,
    pub noise_ap: Option<f64>,
}

/// Trains one patch per resolution with otherwise identical settings.
pub fn run_resolution_ablation(
    resolutions: &[usize],
    cfg: &RunConfig,
    detector: &dyn DetectorAdapter,
    train: &[SceneImage],
    test: &[SceneImage],
) -> Result<Vec<AblationRow>> {
    if resolutions.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one resolution".into()));
    }
    let s = EvalSettings::from_config(cfg);
    let mut rows = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        let mut c = cfg.clone();
        c.patch_resolution = r;
        let (patch, _) = train_patch(&c, detector, train, None)?;
        let noise = noise_patch(r, cfg.evaluation.noise_seed)?;
        rows.push(AblationRow {
            resolution: r,
            patched_ap: percent(&evaluate(detector, test, Some(&patch), &s)?),
            noise_ap: percent(&evaluate(detector, test, Some(&noise), &s)?),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::synth::{generate_synthetic_dataset, SyntheticSceneSpec};
    use crate::detector::toy::{ArchDescriptor, ToyDetector};

    fn detector(seed: u64) -> ToyDetector {
        let spec = SyntheticSceneSpec::default();
        ToyDetector::new(format!("toy-{seed}"), ArchDescriptor::standard(96, spec.classes()), seed).unwrap()
    }

    fn setup() -> (RunConfig, EvalSettings, Vec<SceneImage>) {
        let mut cfg = RunConfig::default();
        cfg.patch_resolution = 8;
        cfg.batch_size = 2;
        cfg.hyperparameters.epochs = 1;
        cfg.hyperparameters.conf_threshold = 1e-6;
        let s = EvalSettings::from_config(&cfg);
        let imgs = generate_synthetic_dataset(&SyntheticSceneSpec::default(), 4, 21).unwrap();
        (cfg, s, imgs)
    }

    #[test]
    fn single_detector_matrix() {
        let (_, s, imgs) = setup();
        let d = detector(1);
        let p = init_patch(8, 4).unwrap();
        let slots = [DetectorSlot {
            id: "toy-1".into(),
            adapter: Some(&d),
        }];
        let m = run_transfer_benchmark(&[("toy-1".into(), p.clone())], &slots, &imgs, &s, 77).unwrap();
        assert_eq!(m.rows.len(), 2);
        assert!(m.rows[0].cells[0].white_box);
        assert!(m.rows[1].baseline && !m.rows[1].cells[0].white_box);
        let own = percent(&evaluate(&d, &imgs, Some(&p), &s).unwrap());
        assert_eq!(m.white_box("toy-1").unwrap().ap, own);
        let noise = percent(&evaluate(&d, &imgs, Some(&noise_patch(8, 77).unwrap()), &s).unwrap());
        assert_eq!(m.noise_row().unwrap().cells[0].ap, noise);
    }

    #[test]
    fn missing_adapter_is_marked_unavailable() {
        let (_, s, imgs) = setup();
        let d = detector(1);
        let slots = [
            DetectorSlot {
                id: "toy-1".into(),
                adapter: Some(&d),
            },
            DetectorSlot {
                id: "yolo".into(),
                adapter: None,
            },
        ];
        let m = run_transfer_benchmark(&[("toy-1".into(), init_patch(8, 0).unwrap())], &slots, &imgs, &s, 1).unwrap();
        assert!(m.rows.iter().all(|r| r.cells[0].available && !r.cells[1].available));
        assert_eq!(m.clean[1], None);
        assert!(run_transfer_benchmark(&[], &[], &imgs, &s, 1).is_err());
    }

    #[test]
    fn sweep_shape_and_identity_cell() {
        let (_, s, imgs) = setup();
        let d = detector(2);
        let p = init_patch(8, 5).unwrap();
        let t = run_dynamics_sweep(&p, &d, &imgs, &s, &[-20.0, 0.0, 20.0], &[0.8, 1.0, 1.2], &[0.0]).unwrap();
        assert_eq!(t.cells.len(), 9);
        assert!(t.cells.iter().all(|c| c.ap.is_some_and(|v| (0.0..=100.0).contains(&v))));
        let standard = percent(&evaluate(&d, &imgs, Some(&p), &s).unwrap());
        assert_eq!(t.cell(0.0, 1.0, 0.0).unwrap().ap.map(f64::to_bits), standard.map(f64::to_bits));
    }

    #[test]
    fn no_truths_gives_undefined_ap() {
        let (_, s, mut imgs) = setup();
        for i in &mut imgs {
            i.annotations.clear();
        }
        assert!(evaluate(&detector(3), &imgs, None, &s).unwrap().is_none());
    }

    #[test]
    fn ablation_rows() {
        let (cfg, _, imgs) = setup();
        let d = detector(4);
        let rows = run_resolution_ablation(&[6, 6], &cfg, &d, &imgs[..2], &imgs[2..]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], AblationRow { resolution: 6, ..rows[1].clone() });
        assert_eq!(run_resolution_ablation(&[6], &cfg, &d, &imgs[..2], &imgs[2..]).unwrap().len(), 1);
        assert!(run_resolution_ablation(&[], &cfg, &d, &imgs, &imgs).is_err());
    }
}
