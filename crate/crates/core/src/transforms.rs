//! Randomized physical-dynamics transforms applied to the patch before it is
//! pasted: contrast, brightness, additive noise, rotation and scale jitter.
//!
//! Every transform is differentiable with respect to the patch pixels for a
//! fixed parameter draw; [`TransformedPatch::backward`] is the adjoint.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Patch, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    /// Half-width of the per-pixel uniform noise.
    pub noise_amplitude: f64,
    pub rotation_max_deg: f64,
    /// Placement size is multiplied by a factor in `[1 - s, 1 + s]`.
    pub scale_jitter: f64,
    /// Additive lighting shift drawn from `[-b, b]`.
    pub brightness_shift: f64,
    pub contrast_range: [f64; 2],
    pub rng_seed: u64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            noise_amplitude: 0.05,
            rotation_max_deg: 20.0,
            scale_jitter: 0.1,
            brightness_shift: 0.1,
            contrast_range: [0.8, 1.2],
            rng_seed: 0,
        }
    }
}

impl TransformConfig {
    /// A configuration whose every draw is the identity.
    pub fn identity() -> Self {
        Self {
            noise_amplitude: 0.0,
            rotation_max_deg: 0.0,
            scale_jitter: 0.0,
            brightness_shift: 0.0,
            contrast_range: [1.0, 1.0],
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("transforms.noise_amplitude", self.noise_amplitude),
            ("transforms.scale_jitter", self.scale_jitter),
            ("transforms.brightness_shift", self.brightness_shift),
            ("transforms.contrast_range", self.contrast_range[0]),
        ];
        for (key, v) in ranges {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("{v} must be a nonnegative number")));
            }
        }
        if !(0.0..=180.0).contains(&self.rotation_max_deg) {
            return Err(Error::config(
                "transforms.rotation_max_deg",
                format!("{} not in [0, 180]", self.rotation_max_deg),
            ));
        }
        if self.scale_jitter >= 1.0 {
            return Err(Error::config("transforms.scale_jitter", "must be < 1"));
        }
        if !(self.contrast_range[1] >= self.contrast_range[0] && self.contrast_range[1].is_finite()) {
            return Err(Error::config(
                "transforms.contrast_range",
                "upper bound must be finite and >= lower bound",
            ));
        }
        Ok(())
    }
}

/// One concrete draw of transform parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams {
    pub contrast: f64,
    pub brightness: f64,
    /// Per-pixel additive noise in patch layout; empty means no noise.
    pub noise: Vec<f64>,
    pub angle_deg: f64,
    /// Multiplier on the placement size.
    pub scale: f64,
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            contrast: 1.0,
            brightness: 0.0,
            noise: Vec::new(),
            angle_deg: 0.0,
            scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.contrast == 1.0
            && self.brightness == 0.0
            && self.noise.iter().all(|&n| n == 0.0)
            && self.angle_deg == 0.0
            && self.scale == 1.0
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.gen_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Draws one parameter set for a patch of the given size.
pub fn sample_transform<R: Rng + ?Sized>(
    cfg: &TransformConfig,
    rng: &mut R,
    patch_height: usize,
    patch_width: usize,
) -> TransformParams {
    let [lo, hi] = cfg.contrast_range;
    let contrast = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let brightness = symmetric(rng, cfg.brightness_shift);
    let noise = if cfg.noise_amplitude > 0.0 {
        (0..CHANNELS * patch_height * patch_width)
            .map(|_| symmetric(rng, cfg.noise_amplitude))
            .collect()
    } else {
        Vec::new()
    };
    let angle_deg = symmetric(rng, cfg.rotation_max_deg);
    let scale = 1.0 + symmetric(rng, cfg.scale_jitter);
    TransformParams {
        contrast,
        brightness,
        noise,
        angle_deg,
        scale,
    }
}

/// A bilinear gather: up to four weighted source cells.
pub(crate) type Taps = [(u32, f64); 4];

/// A small channel-major raster with a per-cell validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRaster {
    pub height: usize,
    pub width: usize,
    /// Channel-major values.
    pub values: Vec<f64>,
    /// Spatial validity; invalid cells are never composited.
    pub valid: Vec<bool>,
}

impl PatchRaster {
    pub fn from_patch(p: &Patch) -> Self {
        Self {
            height: p.height(),
            width: p.width(),
            values: p.pixels().to_vec(),
            valid: vec![true; p.height() * p.width()],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Output of [`apply_transform`] together with what the adjoint needs.
#[derive(Debug, Clone)]
pub struct TransformedPatch {
    pub raster: PatchRaster,
    pub scale: f64,
    contrast: f64,
    rotation: Option<Vec<Taps>>,
    /// Whether the clamp was inactive (derivative 1) per value.
    unclamped: Vec<bool>,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Rotation about the patch center; positive angles turn the content
/// counterclockwise as displayed (y axis pointing down).
fn rotation_taps(height: usize, width: usize, angle_deg: f64) -> (Vec<Taps>, Vec<bool>) {
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let mut taps = Vec::with_capacity(height * width);
    let mut valid = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = snap(dx * cos - dy * sin + cx);
            let v = snap(dx * sin + dy * cos + cy);
            let inside = u >= 0.0 && v >= 0.0 && u <= width as f64 - 1.0 && v <= height as f64 - 1.0;
            valid.push(inside);
            if !inside {
                taps.push([(0, 0.0); 4]);
                continue;
            }
            taps.push(bilinear_taps(v, u, height, width));
        }
    }
    (taps, valid)
}

/// Bilinear taps at continuous source position `(v, u)` (row, column), with
/// coordinates already clamped into the grid.
pub(crate) fn bilinear_taps(v: f64, u: f64, height: usize, width: usize) -> Taps {
    let y0 = v.floor() as usize;
    let x0 = u.floor() as usize;
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let fy = v - y0 as f64;
    let fx = u - x0 as f64;
    [
        ((y0 * width + x0) as u32, (1.0 - fy) * (1.0 - fx)),
        ((y0 * width + x1) as u32, (1.0 - fy) * fx),
        ((y1 * width + x0) as u32, fy * (1.0 - fx)),
        ((y1 * width + x1) as u32, fy * fx),
    ]
}

/// Applies contrast, brightness, noise and rotation in that order and clamps
/// to `[0, 1]`. Scale jitter is carried along for the placement step.
pub fn apply_transform(p: &Patch, params: &TransformParams) -> Result<TransformedPatch> {
    let (h, w) = (p.height(), p.width());
    let plane = h * w;
    if !params.noise.is_empty() && params.noise.len() != CHANNELS * plane {
        return Err(Error::ShapeMismatch {
            expected: format!("{} noise values", CHANNELS * plane),
            actual: format!("{}", params.noise.len()),
        });
    }
    let mut pre: Vec<f64> = p
        .pixels()
        .iter()
        .map(|&v| params.contrast * v + params.brightness)
        .collect();
    for (v, n) in pre.iter_mut().zip(&params.noise) {
        *v += n;
    }

    let (values, valid, rotation) = if params.angle_deg == 0.0 {
        (pre, vec![true; plane], None)
    } else {
        let (taps, valid) = rotation_taps(h, w, params.angle_deg);
        let mut out = vec![0.0; CHANNELS * plane];
        for c in 0..CHANNELS {
            let src = &pre[c * plane..(c + 1) * plane];
            let dst = &mut out[c * plane..(c + 1) * plane];
            for (i, t) in taps.iter().enumerate() {
                if valid[i] {
                    dst[i] = t.iter().map(|&(j, wgt)| wgt * src[j as usize]).sum();
                }
            }
        }
        (out, valid, Some(taps))
    };

    let mut unclamped = Vec::with_capacity(values.len());
    let values = values
        .into_iter()
        .map(|v| {
            unclamped.push((0.0..=1.0).contains(&v));
            v.clamp(0.0, 1.0)
        })
        .collect();

    Ok(TransformedPatch {
        raster: PatchRaster {
            height: h,
            width: w,
            values,
            valid,
        },
        scale: params.scale,
        contrast: params.contrast,
        rotation,
        unclamped,
    })
}

impl TransformedPatch {
    /// Maps a gradient on the transformed raster back onto the source patch.
    pub fn backward(&self, grad_out: &[f64]) -> Vec<f64> {
        let plane = self.raster.plane();
        let gated: Vec<f64> = grad_out
            .iter()
            .zip(&self.unclamped)
            .map(|(&g, &pass)| if pass { g } else { 0.0 })
            .collect();
        let mut grad_pre = match &self.rotation {
            None => gated,
            Some(taps) => {
                let mut acc = vec![0.0; gated.len()];
                for c in 0..CHANNELS {
                    for (i, t) in taps.iter().enumerate() {
                        if !self.raster.valid[i] {
                            continue;
                        }
                        let g = gated[c * plane + i];
                        for &(j, wgt) in t {
                            acc[c * plane + j as usize] += wgt * g;
                        }
                    }
                }
                acc
            }
        };
        for g in &mut grad_pre {
            *g *= self.contrast;
        }
        grad_pre
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch_2x2(vals: [f64; 4]) -> Patch {
        let mut px = Vec::new();
        for _ in 0..3 {
            px.extend_from_slice(&vals);
        }
        Patch::new("t", 2, 2, px).unwrap()
    }

    #[test]
    fn zero_ranges_sample_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_transform(&TransformConfig::identity(), &mut rng, 4, 4);
        assert!(p.is_identity());
        assert_eq!(p, TransformParams::identity());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let cfg = TransformConfig::default();
        let a = sample_transform(&cfg, &mut ChaCha8Rng::seed_from_u64(9), 5, 5);
        let b = sample_transform(&cfg, &mut ChaCha8Rng::seed_from_u64(9), 5, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_angle_within_range() {
        let cfg = TransformConfig {
            rotation_max_deg: 20.0,
            ..TransformConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = sample_transform(&cfg, &mut rng, 2, 2);
            assert!((-20.0..=20.0).contains(&p.angle_deg));
        }
    }

    #[test]
    fn identity_params_are_fixed_point() {
        let p = patch_2x2([0.1, 0.9, 0.3, 0.7]);
        let t = apply_transform(&p, &TransformParams::identity()).unwrap();
        assert_eq!(t.raster.values, p.pixels());
        assert!(t.raster.valid.iter().all(|&v| v));
    }

    #[test]
    fn brightness_shift_on_constant_patch() {
        let p = Patch::filled("t", 3, 3, 0.5).unwrap();
        let params = TransformParams {
            brightness: 0.1,
            ..TransformParams::identity()
        };
        let t = apply_transform(&p, &params).unwrap();
        assert!(t.raster.values.iter().all(|&v| (v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn quarter_turn_permutes_cells() {
        // [[a, b], [c, d]] turned counterclockwise is [[b, d], [a, c]].
        let (a, b, c, d) = (0.1, 0.2, 0.3, 0.4);
        let p = patch_2x2([a, b, c, d]);
        let params = TransformParams {
            angle_deg: 90.0,
            ..TransformParams::identity()
        };
        let t = apply_transform(&p, &params).unwrap();
        let expect = [b, d, a, c];
        for ch in 0..3 {
            for i in 0..4 {
                assert!((t.raster.values[ch * 4 + i] - expect[i]).abs() < 1e-12);
            }
        }
        assert!(t.raster.valid.iter().all(|&v| v));
    }

    #[test]
    fn rotation_marks_corners_invalid() {
        let p = Patch::filled("t", 9, 9, 0.5).unwrap();
        let params = TransformParams {
            angle_deg: 45.0,
            ..TransformParams::identity()
        };
        let t = apply_transform(&p, &params).unwrap();
        assert!(!t.raster.valid[0]);
        assert!(t.raster.valid[4 * 9 + 4]);
    }

    #[test]
    fn gradient_equals_contrast_for_identity_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let px: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(0.3..0.6)).collect();
        let p = Patch::new("t", 4, 4, px).unwrap();
        let params = TransformParams {
            contrast: 1.15,
            brightness: 0.02,
            ..TransformParams::identity()
        };
        let t = apply_transform(&p, &params).unwrap();
        let h = 1e-6;
        for k in [0usize, 7, 20, 47] {
            let mut g = vec![0.0; 48];
            g[k] = 1.0;
            let analytic = t.backward(&g)[k];
            let mut plus = p.clone();
            plus.pixels_mut()[k] += h;
            let mut minus = p.clone();
            minus.pixels_mut()[k] -= h;
            let fp = apply_transform(&plus, &params).unwrap().raster.values[k];
            let fm = apply_transform(&minus, &params).unwrap().raster.values[k];
            let fd = (fp - fm) / (2.0 * h);
            assert!(((fd - analytic) / analytic).abs() < 1e-4, "{fd} vs {analytic}");
            assert!((analytic - 1.15).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let px: Vec<f64> = (0..3 * 36).map(|_| rng.gen_range(0.3..0.7)).collect();
        let p = Patch::new("t", 6, 6, px).unwrap();
        let params = TransformParams {
            angle_deg: 17.0,
            ..TransformParams::identity()
        };
        let base = apply_transform(&p, &params).unwrap();
        let weights: Vec<f64> = (0..108).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = base.backward(&weights);
        let objective = |q: &Patch| -> f64 {
            let t = apply_transform(q, &params).unwrap();
            t.raster.values.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for k in [0usize, 14, 50, 90] {
            let mut plus = p.clone();
            plus.pixels_mut()[k] += h;
            let mut minus = p.clone();
            minus.pixels_mut()[k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6, "{k}: {fd} vs {}", grad[k]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn output_in_unit_range(seed in 0u64..1000, angle in -180.0f64..180.0,
                                    contrast in 0.0f64..3.0, brightness in -1.0f64..1.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let px: Vec<f64> = (0..3 * 25).map(|_| rng.gen_range(0.0..=1.0)).collect();
                let p = Patch::new("t", 5, 5, px).unwrap();
                let params = TransformParams {
                    contrast, brightness, angle_deg: angle,
                    noise: (0..75).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                    scale: 1.0,
                };
                let t = apply_transform(&p, &params).unwrap();
                prop_assert!(t.raster.values.iter().all(|v| (0.0..=1.0).contains(v)));
            }

            #[test]
            fn same_seed_same_output(seed in 0u64..1000) {
                let cfg = TransformConfig::default();
                let p = Patch::filled("t", 6, 6, 0.4).unwrap();
                let run = || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let params = sample_transform(&cfg, &mut rng, 6, 6);
                    apply_transform(&p, &params).unwrap().raster.values
                };
                let (a, b) = (run(), run());
                prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
