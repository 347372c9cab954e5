//! Synthetic aerial-like scenes: a smooth textured ground with bright
//! aircraft glyphs (cross-shaped) and rectangular distractors.
//!
//! Pixels are quantized to multiples of 1/255 so scenes survive an 8-bit PNG
//! round trip unchanged, and annotations are the exact bounds of the cells
//! each glyph painted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Annotation, BoundingBox, SceneImage, CHANNELS};

pub const DISTRACTOR_CLASS: &str = "distractor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneSpec {
    pub image_size: usize,
    /// Inclusive range of aircraft per image.
    pub targets_per_image: [usize; 2],
    pub distractors_per_image: [usize; 2],
    /// Inclusive range of the glyph span in pixels.
    pub glyph_scale: [f64; 2],
    pub texture_seed: u64,
    pub target_class: String,
    pub distractor_class: String,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            image_size: 96,
            targets_per_image: [1, 4],
            distractors_per_image: [0, 2],
            glyph_scale: [14.0, 28.0],
            texture_seed: 7,
            target_class: crate::types::DEFAULT_TARGET_CLASS.to_string(),
            distractor_class: DISTRACTOR_CLASS.to_string(),
        }
    }
}

impl SyntheticSceneSpec {
    pub fn classes(&self) -> Vec<String> {
        vec![self.target_class.clone(), self.distractor_class.clone()]
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.image_size < 16 {
            return bad("image_size must be >= 16");
        }
        if self.targets_per_image[0] > self.targets_per_image[1]
            || self.distractors_per_image[0] > self.distractors_per_image[1]
        {
            return bad("count ranges must be ordered");
        }
        let [lo, hi] = self.glyph_scale;
        if !(lo >= 4.0 && hi >= lo && hi < self.image_size as f64 / 2.0) {
            return bad("glyph_scale must satisfy 4 <= lo <= hi < image_size / 2");
        }
        Ok(())
    }
}

struct Canvas {
    size: usize,
    pixels: Vec<f32>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.iter().enumerate() {
            self.pixels[(c * self.size + y) * self.size + x] = *v;
        }
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let base = [
        rng.gen_range(0.30..0.50f32),
        rng.gen_range(0.30..0.45f32),
        rng.gen_range(0.22..0.38f32),
    ];
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(-0.25..0.25f32),
                rng.gen_range(-0.25..0.25f32),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.015..0.05f32),
            )
        })
        .collect();
    let mut pixels = vec![0.0f32; CHANNELS * size * size];
    for y in 0..size {
        for x in 0..size {
            let mut shade = 0.0;
            for &(fy, fx, ph, amp) in &waves {
                shade += amp * (fy * y as f32 + fx * x as f32 + ph).sin();
            }
            let grain = rng.gen_range(-0.04..0.04f32);
            for c in 0..CHANNELS {
                pixels[(c * size + y) * size + x] = base[c] + shade + grain;
            }
        }
    }
    Canvas { size, pixels }
}

/// Cells of an aircraft silhouette in an `span x span` local frame, nose up.
fn aircraft_cells(span: usize, wing_ratio: f64) -> Vec<(usize, usize)> {
    let s = span as f64;
    let body = ((s / 6.0).round() as usize).max(2);
    let wing_thick = ((s / 7.0).round() as usize).max(2);
    let wing_span = ((s * wing_ratio).round() as usize).clamp(body + 2, span);
    let tail_span = ((s * 0.45).round() as usize).max(body + 2).min(wing_span);
    let wing_top = (s * 0.35).round() as usize;
    let tail_top = span - wing_thick.max(2);
    let mid = span / 2;
    let mut cells = Vec::new();
    for y in 0..span {
        for x in 0..span {
            let in_body = x + body / 2 >= mid && x < mid - body / 2 + body;
            let in_wing = y >= wing_top
                && y < wing_top + wing_thick
                && x + wing_span / 2 >= mid
                && x < mid - wing_span / 2 + wing_span;
            let in_tail = y >= tail_top && x + tail_span / 2 >= mid && x < mid - tail_span / 2 + tail_span;
            if in_body || in_wing || in_tail {
                cells.push((y, x));
            }
        }
    }
    cells
}

fn orient(cells: &[(usize, usize)], span: usize, turn: u8) -> Vec<(usize, usize)> {
    let m = span - 1;
    cells
        .iter()
        .map(|&(y, x)| match turn % 4 {
            0 => (y, x),
            1 => (x, m - y),
            2 => (m - y, m - x),
            _ => (m - x, y),
        })
        .collect()
}

fn bounds(cells: &[(usize, usize)], oy: usize, ox: usize) -> Result<BoundingBox> {
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for &(y, x) in cells {
        y0 = y0.min(y);
        x0 = x0.min(x);
        y1 = y1.max(y);
        x1 = x1.max(x);
    }
    BoundingBox::new(
        (ox + x0) as f64,
        (oy + y0) as f64,
        (ox + x1 + 1) as f64,
        (oy + y1 + 1) as f64,
    )
}

fn overlaps(taken: &[BoundingBox], b: &BoundingBox, margin: f64) -> bool {
    taken.iter().any(|t| {
        b.x1 < t.x2 + margin && t.x1 < b.x2 + margin && b.y1 < t.y2 + margin && t.y1 < b.y2 + margin
    })
}

fn glyph_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let v = rng.gen_range(0.78..0.95f32);
    [
        v + rng.gen_range(-0.04..0.04f32),
        v + rng.gen_range(-0.04..0.04f32),
        v + rng.gen_range(-0.04..0.04f32),
    ]
}

/// Renders scene `index` of a dataset.
pub fn render_scene(spec: &SyntheticSceneSpec, seed: u64, index: u64) -> Result<SceneImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut tex_rng = ChaCha8Rng::seed_from_u64(spec.texture_seed ^ seed.rotate_left(17));
    tex_rng.set_stream(index);
    let size = spec.image_size;
    let mut canvas = background(size, &mut tex_rng);

    let n_targets = rng.gen_range(spec.targets_per_image[0]..=spec.targets_per_image[1]);
    let n_distractors = rng.gen_range(spec.distractors_per_image[0]..=spec.distractors_per_image[1]);
    let mut taken: Vec<BoundingBox> = Vec::new();
    let mut annotations = Vec::new();
    let kinds = std::iter::repeat_n(true, n_targets).chain(std::iter::repeat_n(false, n_distractors));
    for is_target in kinds {
        let span = rng.gen_range(spec.glyph_scale[0]..=spec.glyph_scale[1]).round() as usize;
        let cells = if is_target {
            let wing = rng.gen_range(0.8..1.0);
            orient(&aircraft_cells(span, wing), span, rng.gen_range(0..4))
        } else {
            let w = ((span as f64 * rng.gen_range(0.5..0.9)).round() as usize).max(3);
            let h = ((span as f64 * rng.gen_range(0.3..0.5)).round() as usize).max(3);
            let rect: Vec<_> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
            if rng.gen_bool(0.5) {
                rect
            } else {
                rect.into_iter().map(|(y, x)| (x, y)).collect()
            }
        };
        let color = glyph_color(&mut rng);
        let mut placed = false;
        for _ in 0..60 {
            let oy = rng.gen_range(1..size - span - 1);
            let ox = rng.gen_range(1..size - span - 1);
            let b = bounds(&cells, oy, ox)?;
            if overlaps(&taken, &b, 4.0) {
                continue;
            }
            for &(y, x) in &cells {
                canvas.paint(oy + y, ox + x, color);
            }
            taken.push(b);
            annotations.push(Annotation {
                class: if is_target {
                    spec.target_class.clone()
                } else {
                    spec.distractor_class.clone()
                },
                bbox: b,
            });
            placed = true;
            break;
        }
        if !placed {
            log::debug!("scene {index}: no room for another glyph");
        }
    }

    for v in &mut canvas.pixels {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    SceneImage::new(format!("synth_{seed}_{index:06}"), size, size, canvas.pixels, annotations)
}

/// Generates `n_images` scenes; identical for identical `(spec, seed)`.
pub fn generate_synthetic_dataset(spec: &SyntheticSceneSpec, n_images: usize, seed: u64) -> Result<Vec<SceneImage>> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be > 0".into()));
    }
    (0..n_images as u64).map(|i| render_scene(spec, seed, i)).collect()
}
