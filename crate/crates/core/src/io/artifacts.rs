//! Run directory layout and the files written into it.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::report::{BenchmarkReport, REPORT_SCHEMA_VERSION};
use crate::losses::LossBreakdown;
use crate::types::{Hyperparameters, Patch, PlacementSpec, CHANNELS};

/// `runs/<hash>/{patch.png, patch.json, checkpoints/, loss.csv, reports/}`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn patch_png(&self) -> PathBuf {
        self.root.join("patch.png")
    }

    pub fn patch_json(&self) -> PathBuf {
        self.root.join("patch.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.reports()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }
}

pub const PATCH_SCHEMA_VERSION: u32 = 1;

/// Sidecar describing a trained patch. Holds the exact pixel values; the
/// PNG next to it is an 8-bit rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRecord {
    pub schema_version: u32,
    pub id: String,
    pub resolution: usize,
    pub placement: PlacementSpec,
    pub hyperparameters: Hyperparameters,
    pub detector_id: String,
    pub detector_checksum: String,
    pub config_hash: String,
    pub epochs_completed: usize,
    pub steps: u64,
    pub final_loss: Option<LossBreakdown>,
    pub pixels: Vec<f64>,
}

impl PatchRecord {
    pub fn patch(&self) -> Result<Patch> {
        Patch::new(self.id.clone(), self.resolution, self.resolution, self.pixels.clone())
    }
}

pub fn patch_to_rgb8(p: &Patch) -> RgbImage {
    let (h, w) = (p.height(), p.width());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            (p.get(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    })
}

pub fn save_patch_png(path: &Path, p: &Patch) -> Result<()> {
    patch_to_rgb8(p).save(path).map_err(|e| Error::data(path, e.to_string()))
}

/// Reads an image file as a patch (8-bit precision).
pub fn load_patch_png(path: &Path) -> Result<Patch> {
    let img = image::open(path)
        .map_err(|e| Error::data(path, format!("cannot decode patch: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px = vec![0.0; CHANNELS * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..CHANNELS {
            px[c * h * w + y as usize * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("patch").to_string();
    Patch::new(id, h, w, px)
}

pub fn save_patch_record(path: &Path, rec: &PatchRecord) -> Result<()> {
    write_json(path, rec)
}

/// Loads a patch from its JSON sidecar, or from any image file.
pub fn load_patch(path: &Path) -> Result<Patch> {
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let rec: PatchRecord = read_json_versioned(path, PATCH_SCHEMA_VERSION)?;
        rec.patch().map_err(|e| Error::data(path, e.to_string()))
    } else {
        load_patch_png(path)
    }
}

pub fn load_patch_record(path: &Path) -> Result<PatchRecord> {
    read_json_versioned(path, PATCH_SCHEMA_VERSION)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses JSON with a top-level `schema_version`, checking it first so a
/// version mismatch is reported as such rather than as a field error.
fn read_json_versioned<T: for<'de> Deserialize<'de>>(path: &Path, expected: u32) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::data(path, "missing schema_version"))?;
    if found != expected as u64 {
        return Err(Error::Version {
            found: found as u32,
            expected,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::data(path, e.to_string()))
}

pub fn save_report(path: &Path, report: &BenchmarkReport) -> Result<()> {
    write_json(path, report)
}

pub fn load_report(path: &Path) -> Result<BenchmarkReport> {
    read_json_versioned(path, REPORT_SCHEMA_VERSION)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::report::tests::headline_fixture;
    use crate::optimizer::init_patch;

    #[test]
    fn report_round_trip_is_exact_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let r = headline_fixture();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        save_report(&a, &r).unwrap();
        save_report(&b, &r).unwrap();
        assert_eq!(load_report(&a).unwrap(), r);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn invalid_field_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        save_report(&p, &headline_fixture()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replace("\"on_target\"", "\"sideways\"");
        std::fs::write(&p, text).unwrap();
        assert!(load_report(&p).is_err());
    }

    #[test]
    fn schema_mismatch_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        save_report(&p, &headline_fixture()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(load_report(&p), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn patch_record_keeps_exact_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_patch(5, 3).unwrap();
        let rec = PatchRecord {
            schema_version: PATCH_SCHEMA_VERSION,
            id: p.id.clone(),
            resolution: 5,
            placement: PlacementSpec::default(),
            hyperparameters: Hyperparameters::default(),
            detector_id: "toy".into(),
            detector_checksum: "x".into(),
            config_hash: "y".into(),
            epochs_completed: 0,
            steps: 0,
            final_loss: None,
            pixels: p.pixels().to_vec(),
        };
        let path = dir.path().join("patch.json");
        save_patch_record(&path, &rec).unwrap();
        assert_eq!(load_patch(&path).unwrap(), p);
        let png = dir.path().join("patch.png");
        save_patch_png(&png, &p).unwrap();
        let q = load_patch_png(&png).unwrap();
        for (a, b) in p.pixels().iter().zip(q.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
