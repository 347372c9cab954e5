//! Shared domain types.
//!
//! Pixel data is stored channel-major (`[c][y][x]`) with intensities in
//! `[0, 1]`. Patches hold `f64` so loss gradients can be checked with finite
//! differences; scene images hold `f32`, which is what detectors consume.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const DEFAULT_PATCH_RESOLUTION: usize = 50;
pub const DEFAULT_TARGET_CLASS: &str = "aircraft";

/// The optimizable pixel grid pasted into scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub id: String,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Patch {
    /// Builds a patch and checks every invariant.
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        validate_patch(Self::new_unchecked(id, height, width, pixels)?)
    }

    /// Builds a patch checking only the buffer length. Values may be out of
    /// range; use [`clamp_patch`] or [`validate_patch`] afterwards.
    pub fn new_unchecked(
        id: impl Into<String>,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        if pixels.len() != CHANNELS * height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", CHANNELS * height * width),
                actual: format!("{} values", pixels.len()),
            });
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    pub fn filled(id: impl Into<String>, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(id, height, width, vec![value; CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Mutable pixel access. Callers own re-establishing the `[0, 1]` range.
    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.pixels[i] = value;
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }
}

/// Returns the patch unchanged when every invariant holds.
pub fn validate_patch(p: Patch) -> Result<Patch> {
    if p.height < 2 || p.width < 2 {
        return Err(Error::Invariant {
            what: format!(
                "patch is {}x{}, at least 2x2 is required",
                p.height, p.width
            ),
        });
    }
    if let Some((index, &value)) = p
        .pixels
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { index });
        }
        return Err(Error::PixelOutOfRange { index, value });
    }
    Ok(p)
}

/// Maps every pixel into `[0, 1]`. Idempotent.
pub fn clamp_patch(mut p: Patch) -> Result<Patch> {
    if let Some(index) = p.pixels.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    for v in &mut p.pixels {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(p)
}

/// Axis-aligned box in corner convention, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::DegenerateBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

/// One post-processed detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub class_scores: BTreeMap<String, f64>,
    /// Index of the raw candidate this detection came from, when known.
    /// Gradients of the objectness are routed back through it.
    #[serde(default)]
    pub candidate: Option<usize>,
}

impl Detection {
    pub fn new(bbox: BoundingBox, objectness: f64) -> Self {
        Self {
            bbox,
            objectness,
            class_scores: BTreeMap::new(),
            candidate: None,
        }
    }

    pub fn with_class(mut self, class: impl Into<String>, score: f64) -> Self {
        self.class_scores.insert(class.into(), score);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.objectness) {
            return Err(Error::Invariant {
                what: format!("objectness {} outside [0, 1]", self.objectness),
            });
        }
        if let Some((k, v)) = self
            .class_scores
            .iter()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Invariant {
                what: format!("class score {k}={v} outside [0, 1]"),
            });
        }
        Ok(())
    }

    /// Highest-scoring class, ties broken by name order.
    pub fn top_class(&self) -> Option<&str> {
        let mut best: Option<(&str, f64)> = None;
        for (k, &v) in &self.class_scores {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((k.as_str(), v));
            }
        }
        best.map(|(k, _)| k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: String,
    pub bbox: BoundingBox,
}

/// Letterbox mapping from source-image coordinates into detector-input
/// coordinates: `dst = src * scale + pad`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub source_width: usize,
    pub source_height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub name: String,
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    pub annotations: Vec<Annotation>,
    pub letterbox: Option<Letterbox>,
}

impl SceneImage {
    pub fn new(
        name: impl Into<String>,
        width: usize,
        height: usize,
        pixels: Vec<f32>,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        let img = Self {
            name: name.into(),
            width,
            height,
            pixels,
            annotations,
            letterbox: None,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            name: String::new(),
            width,
            height,
            pixels: vec![value; CHANNELS * width * height],
            annotations: Vec::new(),
            letterbox: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != CHANNELS * self.width * self.height {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", CHANNELS * self.width * self.height),
                actual: format!("{} values", self.pixels.len()),
            });
        }
        if let Some(index) = self
            .pixels
            .iter()
            .position(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::PixelOutOfRange {
                index,
                value: self.pixels[index] as f64,
            });
        }
        for a in &self.annotations {
            a.bbox.validate()?;
            let b = &a.bbox;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > self.width as f64 || b.y2 > self.height as f64 {
                return Err(Error::Invariant {
                    what: format!(
                        "annotation {b:?} outside {}x{} image `{}`",
                        self.width, self.height, self.name
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    /// Boxes of every annotation with the given class.
    pub fn boxes_of(&self, class: &str) -> Vec<BoundingBox> {
        self.annotations
            .iter()
            .filter(|a| a.class == class)
            .map(|a| a.bbox)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    OnTarget,
    OutsideTarget,
}

impl std::fmt::Display for PlacementMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlacementMode::OnTarget => "on_target",
            PlacementMode::OutsideTarget => "outside_target",
        })
    }
}

/// Where the patch goes relative to each target and how large it is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementSpec {
    pub mode: PlacementMode,
    /// Patch area over target area (on-target mode).
    pub r_s: f64,
    /// Target height over patch-to-center distance (outside-target mode).
    pub r_d: f64,
}

impl Default for PlacementSpec {
    fn default() -> Self {
        Self {
            mode: PlacementMode::OnTarget,
            r_s: 0.2,
            r_d: 1.0,
        }
    }
}

impl PlacementSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_s > 0.0 && self.r_s <= 1.0) {
            return Err(Error::config("placement.r_s", format!("{} not in (0, 1]", self.r_s)));
        }
        if !(self.r_d > 0.0 && self.r_d.is_finite()) {
            return Err(Error::config("placement.r_d", format!("{} must be > 0", self.r_d)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparameters {
    /// Total-variation weight.
    pub alpha: f64,
    /// Non-printability weight.
    pub beta: f64,
    /// Learning rate of the adaptive-moment update.
    pub eta: f64,
    pub epochs: usize,
    /// Steps per epoch; `None` means ceil(dataset size / batch size).
    pub iterations_per_epoch: Option<usize>,
    pub iou_threshold: f64,
    pub conf_threshold: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            alpha: 2.5,
            beta: 0.01,
            eta: 0.03,
            epochs: 600,
            iterations_per_epoch: None,
            iou_threshold: 0.45,
            conf_threshold: 0.4,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("hyperparameters.alpha", self.alpha), ("hyperparameters.beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("{v} must be >= 0")));
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("hyperparameters.eta", format!("{} must be > 0", self.eta)));
        }
        for (key, v) in [
            ("hyperparameters.iou_threshold", self.iou_threshold),
            ("hyperparameters.conf_threshold", self.conf_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(key, format!("{v} not in (0, 1)")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::config("hyperparameters.epochs", "must be >= 1"));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(Error::config(
                "hyperparameters.iterations_per_epoch",
                "must be >= 1",
            ));
        }
        Ok(())
    }
}
