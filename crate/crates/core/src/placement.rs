//! Scale-adaptive patch placement and compositing.
//!
//! Geometry follows the on-target rule (patch centered on the target, area a
//! fixed fraction of the target area) and the outside-target rule (patch
//! centered above the target at a distance proportional to its height).
//! Compositing is `x* = (1 - M) * x + M * p_t` with `M` a square mask.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transforms::{apply_transform, bilinear_taps, PatchRaster, Taps, TransformParams, TransformedPatch};
use crate::types::{BoundingBox, Patch, PlacementMode, PlacementSpec, SceneImage, CHANNELS};

/// Center of a patch placed on the target.
pub fn center_on_target(b: &BoundingBox) -> Result<(f64, f64)> {
    b.validate()?;
    Ok(b.center())
}

/// Side length of the square patch whose area is `r_s` times the target area.
pub fn patch_size_on_target(b: &BoundingBox, r_s: f64) -> Result<(f64, f64)> {
    b.validate()?;
    if !(r_s > 0.0 && r_s <= 1.0) {
        return Err(Error::InvalidArgument(format!("area ratio {r_s} not in (0, 1]")));
    }
    let side = (r_s * b.width() * b.height()).sqrt();
    Ok((side, side))
}

/// Distance from the target center to the patch center in outside mode.
pub fn distance_outside_target(b: &BoundingBox, r_d: f64) -> Result<f64> {
    b.validate()?;
    if !(r_d > 0.0 && r_d.is_finite()) {
        return Err(Error::InvalidArgument(format!("distance ratio {r_d} must be > 0")));
    }
    Ok(b.height() / r_d)
}

/// Center of a patch placed above the target.
pub fn center_outside_target(b: &BoundingBox, r_d: f64) -> Result<(f64, f64)> {
    let d = distance_outside_target(b, r_d)?;
    let (cx, cy) = b.center();
    Ok((cx, cy - d))
}

/// Center and side length of the patch for one target.
pub fn placement_geometry(b: &BoundingBox, spec: &PlacementSpec) -> Result<((f64, f64), f64)> {
    let (side, _) = patch_size_on_target(b, spec.r_s)?;
    let center = match spec.mode {
        PlacementMode::OnTarget => center_on_target(b)?,
        PlacementMode::OutsideTarget => center_outside_target(b, spec.r_d)?,
    };
    Ok((center, side))
}

/// Square mask region. Rows and columns `origin .. origin + side` are set,
/// then clipped to the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub image_height: usize,
    pub image_width: usize,
    pub origin_y: i64,
    pub origin_x: i64,
    pub side: usize,
}

impl Mask {
    /// Clipped row range.
    pub fn rows(&self) -> std::ops::Range<usize> {
        clip_range(self.origin_y, self.side, self.image_height)
    }

    pub fn cols(&self) -> std::ops::Range<usize> {
        clip_range(self.origin_x, self.side, self.image_width)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.rows().contains(&y) && self.cols().contains(&x)
    }

    pub fn area(&self) -> usize {
        self.rows().len() * self.cols().len()
    }

    /// Dense 0/1 rendering, row-major.
    pub fn to_dense(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.image_height * self.image_width];
        for y in self.rows() {
            for x in self.cols() {
                m[y * self.image_width + x] = 1;
            }
        }
        m
    }
}

fn clip_range(origin: i64, side: usize, limit: usize) -> std::ops::Range<usize> {
    let lo = origin.clamp(0, limit as i64) as usize;
    let hi = (origin + side as i64).clamp(0, limit as i64) as usize;
    lo..hi.max(lo)
}

/// Rasterizes a `size`-wide square centered at `center = (cx, cy)`.
///
/// The region starts at `round(center - size / 2)` and spans `round(size)`
/// cells. Returns `Ok(None)` when nothing of it lands inside the image;
/// that is routine for outside-target placement near the top edge, so it
/// is only logged at debug level.
pub fn build_mask(
    image_height: usize,
    image_width: usize,
    center: (f64, f64),
    size: f64,
) -> Result<Option<Mask>> {
    if !(size > 0.0 && size.is_finite()) || !center.0.is_finite() || !center.1.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "mask size {size} at {center:?} must be positive and finite"
        )));
    }
    let side = size.round().max(1.0) as usize;
    let mask = Mask {
        image_height,
        image_width,
        origin_y: (center.1 - size / 2.0).round() as i64,
        origin_x: (center.0 - size / 2.0).round() as i64,
        side,
    };
    if mask.area() == 0 {
        debug!("patch mask at {center:?} (size {size}) lies outside the {image_width}x{image_height} image");
        return Ok(None);
    }
    Ok(Some(mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Precomputed gather from a source raster onto a `side x side` grid.
#[derive(Debug, Clone)]
pub struct Resampler {
    side: usize,
    src_plane: usize,
    taps: Vec<Taps>,
    nearest: Vec<usize>,
}

impl Resampler {
    pub fn new(src_height: usize, src_width: usize, side: usize, mode: ResampleMode) -> Self {
        let mut taps = Vec::with_capacity(side * side);
        let mut nearest = Vec::with_capacity(side * side);
        let sy = src_height as f64 / side as f64;
        let sx = src_width as f64 / side as f64;
        for i in 0..side {
            for j in 0..side {
                let ny = (((i as f64 + 0.5) * sy).floor() as usize).min(src_height - 1);
                let nx = (((j as f64 + 0.5) * sx).floor() as usize).min(src_width - 1);
                nearest.push(ny * src_width + nx);
                taps.push(match mode {
                    ResampleMode::Nearest => [((ny * src_width + nx) as u32, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)],
                    ResampleMode::Bilinear => {
                        let v = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, src_height as f64 - 1.0);
                        let u = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, src_width as f64 - 1.0);
                        bilinear_taps(v, u, src_height, src_width)
                    }
                });
            }
        }
        Self {
            side,
            src_plane: src_height * src_width,
            taps,
            nearest,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Weight of source cell `src` in output cell `out` (both spatial indices).
    pub fn weight(&self, out: usize, src: usize) -> f64 {
        self.taps[out]
            .iter()
            .filter(|(j, _)| *j as usize == src)
            .map(|(_, w)| w)
            .sum()
    }

    pub fn forward(&self, src: &PatchRaster) -> PatchRaster {
        let plane = self.side * self.side;
        let mut values = vec![0.0; CHANNELS * plane];
        for c in 0..CHANNELS {
            let s = &src.values[c * self.src_plane..(c + 1) * self.src_plane];
            for (o, t) in self.taps.iter().enumerate() {
                values[c * plane + o] = t.iter().map(|&(j, w)| w * s[j as usize]).sum();
            }
        }
        let valid = self.nearest.iter().map(|&n| src.valid[n]).collect();
        PatchRaster {
            height: self.side,
            width: self.side,
            values,
            valid,
        }
    }

    /// Adds the adjoint of `grad_out` (per output value) into `grad_src`.
    pub fn backward_into(&self, grad_out: &[f64], grad_src: &mut [f64]) {
        let plane = self.side * self.side;
        for c in 0..CHANNELS {
            for (o, t) in self.taps.iter().enumerate() {
                let g = grad_out[c * plane + o];
                if g == 0.0 {
                    continue;
                }
                for &(j, w) in t {
                    grad_src[c * self.src_plane + j as usize] += w * g;
                }
            }
        }
    }
}

/// Pastes an already-resampled raster into the masked region of `x`.
pub fn composite(x: &SceneImage, p_t: &PatchRaster, mask: &Mask) -> Result<SceneImage> {
    let mut out = x.clone();
    composite_in_place(&mut out, p_t, mask)?;
    Ok(out)
}

fn composite_in_place(x: &mut SceneImage, p_t: &PatchRaster, mask: &Mask) -> Result<()> {
    if p_t.height != mask.side || p_t.width != mask.side {
        return Err(Error::ShapeMismatch {
            expected: format!("{0}x{0} patch raster", mask.side),
            actual: format!("{}x{}", p_t.height, p_t.width),
        });
    }
    if mask.image_height != x.height() || mask.image_width != x.width() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} image", mask.image_width, mask.image_height),
            actual: format!("{}x{}", x.width(), x.height()),
        });
    }
    let plane = p_t.plane();
    for y in mask.rows() {
        let py = (y as i64 - mask.origin_y) as usize;
        for xx in mask.cols() {
            let px = (xx as i64 - mask.origin_x) as usize;
            let k = py * p_t.width + px;
            if !p_t.valid[k] {
                continue;
            }
            for c in 0..CHANNELS {
                let i = x.index(c, y, xx);
                x.pixels_mut()[i] = p_t.values[c * plane + k] as f32;
            }
        }
    }
    Ok(())
}

/// One pasted patch copy, with the state needed to backpropagate through it.
#[derive(Debug, Clone)]
pub struct AppliedPatch {
    pub mask: Mask,
    transformed: TransformedPatch,
    resampler: Resampler,
    resampled: PatchRaster,
}

/// A scene with patches pasted in, ready for a detector.
#[derive(Debug, Clone)]
pub struct PatchedScene {
    pub image: SceneImage,
    pub applied: Vec<AppliedPatch>,
}

impl PatchedScene {
    /// Gradient of a scalar with respect to the source patch, given its
    /// gradient with respect to every image pixel. Where copies overlap, only
    /// the last one pasted (the visible one) receives gradient.
    pub fn backward(&self, grad_image: &[f32], patch_height: usize, patch_width: usize) -> Vec<f64> {
        let (h, w) = (self.image.height(), self.image.width());
        let mut claimed = vec![false; h * w];
        let mut grad_patch = vec![0.0; CHANNELS * patch_height * patch_width];
        for ap in self.applied.iter().rev() {
            let side = ap.mask.side;
            let plane = side * side;
            let mut grad_resampled = vec![0.0; CHANNELS * plane];
            let mut any = false;
            for y in ap.mask.rows() {
                let py = (y as i64 - ap.mask.origin_y) as usize;
                for x in ap.mask.cols() {
                    let px = (x as i64 - ap.mask.origin_x) as usize;
                    let k = py * side + px;
                    if !ap.resampled.valid[k] || claimed[y * w + x] {
                        continue;
                    }
                    claimed[y * w + x] = true;
                    for c in 0..CHANNELS {
                        let g = grad_image[(c * h + y) * w + x] as f64;
                        grad_resampled[c * plane + k] = g;
                        any |= g != 0.0;
                    }
                }
            }
            if !any {
                continue;
            }
            let mut grad_transformed = vec![0.0; ap.transformed.raster.values.len()];
            ap.resampler.backward_into(&grad_resampled, &mut grad_transformed);
            for (acc, g) in grad_patch.iter_mut().zip(ap.transformed.backward(&grad_transformed)) {
                *acc += g;
            }
        }
        grad_patch
    }
}

/// Transforms, resamples and pastes one patch copy per box, in order, so
/// later boxes overwrite earlier ones where they overlap.
pub fn apply_patches(
    x: &SceneImage,
    p: &Patch,
    spec: &PlacementSpec,
    boxes: &[BoundingBox],
    params: &[TransformParams],
    mode: ResampleMode,
) -> Result<PatchedScene> {
    if params.len() != boxes.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} transform draws", boxes.len()),
            actual: format!("{}", params.len()),
        });
    }
    let mut image = x.clone();
    let mut applied = Vec::with_capacity(boxes.len());
    for (b, tp) in boxes.iter().zip(params) {
        let (center, side) = placement_geometry(b, spec)?;
        let Some(mask) = build_mask(x.height(), x.width(), center, side * tp.scale)? else {
            continue;
        };
        let transformed = apply_transform(p, tp)?;
        let resampler = Resampler::new(p.height(), p.width(), mask.side, mode);
        let resampled = resampler.forward(&transformed.raster);
        composite_in_place(&mut image, &resampled, &mask)?;
        applied.push(AppliedPatch {
            mask,
            transformed,
            resampler,
            resampled,
        });
    }
    Ok(PatchedScene { image, applied })
}

/// Pastes an untransformed copy of `p` onto every box.
pub fn place_all(x: &SceneImage, p: &Patch, spec: &PlacementSpec, boxes: &[BoundingBox]) -> Result<SceneImage> {
    if boxes.is_empty() {
        warn!("no target boxes in `{}`; image left unchanged", x.name);
        return Ok(x.clone());
    }
    let params = vec![TransformParams::identity(); boxes.len()];
    Ok(apply_patches(x, p, spec, boxes, &params, ResampleMode::Bilinear)?.image)
}
