//! Objectness, total-variation and non-printability losses, each with an
//! analytic gradient with respect to patch pixels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Detection, Hyperparameters, Patch, CHANNELS};

/// Smoothing inside the total-variation square root.
pub const TV_EPS: f64 = 1e-8;

const DEFAULT_COLORS: &str = include_str!("../data/printable_colors.txt");

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_obj: f64,
    pub l_tv: f64,
    pub l_nps: f64,
    pub total: f64,
    pub n_detections: usize,
}

impl LossBreakdown {
    pub fn new(l_obj: f64, l_tv: f64, l_nps: f64, n_detections: usize, h: &Hyperparameters) -> Self {
        Self {
            l_obj,
            l_tv,
            l_nps,
            total: total_loss(l_obj, l_tv, l_nps, h),
            n_detections,
        }
    }
}

/// Mean objectness of the given (already filtered) detections; zero when
/// nothing was detected.
pub fn objectness_loss(detections: &[Detection]) -> Result<f64> {
    if let Some(d) = detections.iter().find(|d| !(0.0..=1.0).contains(&d.objectness)) {
        return Err(Error::Invariant {
            what: format!("objectness {} outside [0, 1]", d.objectness),
        });
    }
    if detections.is_empty() {
        return Ok(0.0);
    }
    Ok(detections.iter().map(|d| d.objectness).sum::<f64>() / detections.len() as f64)
}

pub fn total_loss(l_obj: f64, l_tv: f64, l_nps: f64, h: &Hyperparameters) -> f64 {
    l_obj + h.alpha * l_tv + h.beta * l_nps
}

/// Total variation of a channel-major grid, normalized by `height * width`.
///
/// Only interior cells (`i < height - 1`, `j < width - 1`) contribute.
pub fn tv_of_grid(values: &[f64], channels: usize, height: usize, width: usize, eps: f64) -> Result<f64> {
    check_grid(values, channels, height, width)?;
    let plane = height * width;
    let mut sum = 0.0;
    for c in 0..channels {
        let g = &values[c * plane..(c + 1) * plane];
        for i in 0..height - 1 {
            for j in 0..width - 1 {
                let v = g[i * width + j];
                let dy = g[(i + 1) * width + j] - v;
                let dx = g[i * width + j + 1] - v;
                sum += (dy * dy + dx * dx + eps).sqrt();
            }
        }
    }
    Ok(sum / plane as f64)
}

/// Value and gradient of [`tv_of_grid`].
pub fn tv_grad_of_grid(
    values: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    check_grid(values, channels, height, width)?;
    let plane = height * width;
    let norm = 1.0 / plane as f64;
    let mut grad = vec![0.0; values.len()];
    let mut sum = 0.0;
    for c in 0..channels {
        let base = c * plane;
        for i in 0..height - 1 {
            for j in 0..width - 1 {
                let k = base + i * width + j;
                let kd = k + width;
                let kr = k + 1;
                let dy = values[kd] - values[k];
                let dx = values[kr] - values[k];
                let s = (dy * dy + dx * dx + eps).sqrt();
                sum += s;
                if s > 0.0 {
                    let (gy, gx) = (dy / s * norm, dx / s * norm);
                    grad[kd] += gy;
                    grad[kr] += gx;
                    grad[k] -= gy + gx;
                }
            }
        }
    }
    Ok((sum * norm, grad))
}

fn check_grid(values: &[f64], channels: usize, height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 {
        return Err(Error::Invariant {
            what: format!("total variation needs at least 2x2, got {height}x{width}"),
        });
    }
    if values.len() != channels * height * width {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", channels * height * width),
            actual: format!("{}", values.len()),
        });
    }
    Ok(())
}

pub fn tv_loss(p: &Patch) -> Result<f64> {
    tv_of_grid(p.pixels(), CHANNELS, p.height(), p.width(), TV_EPS)
}

pub fn tv_loss_grad(p: &Patch) -> Result<(f64, Vec<f64>)> {
    tv_grad_of_grid(p.pixels(), CHANNELS, p.height(), p.width(), TV_EPS)
}

/// Colors a printer can reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrintableColorSet {
    colors: Vec<[f64; 3]>,
}

impl PrintableColorSet {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.is_empty() {
            return Err(Error::InvalidArgument("printable color set is empty".into()));
        }
        if let Some(c) = colors.iter().find(|c| c.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::InvalidArgument(format!("printable color {c:?} outside [0, 1]")));
        }
        Ok(Self { colors })
    }

    /// The 30-color gamut shipped with the crate.
    pub fn default_gamut() -> Self {
        Self::parse(DEFAULT_COLORS, Path::new("<builtin printable_colors.txt>"))
            .expect("builtin gamut parses")
    }

    /// Parses one `r g b` triple per line; `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut colors = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::data(origin, format!("line {}: {e}", n + 1)))?;
            let [r, g, b] = vals[..] else {
                return Err(Error::data(origin, format!("line {}: expected 3 values", n + 1)));
            };
            colors.push([r, g, b]);
        }
        Self::new(colors).map_err(|e| Error::data(origin, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn without(&self, index: usize) -> Result<Self> {
        let mut colors = self.colors.clone();
        colors.remove(index);
        Self::new(colors)
    }
}

/// Nearest-color distance per pixel plus the nearest color index.
fn nearest_color(px: [f64; 3], set: &PrintableColorSet) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in set.colors.iter().enumerate() {
        let d = ((px[0] - c[0]).powi(2) + (px[1] - c[1]).powi(2) + (px[2] - c[2]).powi(2)).sqrt();
        if d < best.0 {
            best = (d, i);
        }
    }
    best
}

/// Mean over pixels of the Euclidean RGB distance to the nearest printable
/// color.
pub fn nps_loss(p: &Patch, set: &PrintableColorSet) -> f64 {
    nps_loss_grad_inner(p, set, false).0
}

pub fn nps_loss_grad(p: &Patch, set: &PrintableColorSet) -> (f64, Vec<f64>) {
    nps_loss_grad_inner(p, set, true)
}

fn nps_loss_grad_inner(p: &Patch, set: &PrintableColorSet, want_grad: bool) -> (f64, Vec<f64>) {
    let plane = p.height() * p.width();
    let px = p.pixels();
    let norm = 1.0 / plane as f64;
    let mut grad = if want_grad { vec![0.0; px.len()] } else { Vec::new() };
    let mut sum = 0.0;
    for k in 0..plane {
        let rgb = [px[k], px[plane + k], px[2 * plane + k]];
        let (d, ci) = nearest_color(rgb, set);
        sum += d;
        if want_grad && d > 0.0 {
            let c = set.colors[ci];
            for ch in 0..3 {
                grad[ch * plane + k] = (rgb[ch] - c[ch]) / d * norm;
            }
        }
    }
    (sum * norm, grad)
}
