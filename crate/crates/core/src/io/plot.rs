//! Static plot files: P-R curves and transfer-matrix heatmaps, drawn
//! directly into RGB rasters, plus the data files behind them.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::eval::bench::TransferMatrix;
use crate::eval::metrics::PrCurve;

const PLOT_SIZE: u32 = 320;
const MARGIN: u32 = 30;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

/// `recall,precision,cutoff` rows.
pub fn pr_curve_csv(curve: &PrCurve) -> String {
    let mut s = String::from("recall,precision,cutoff\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.recall, p.precision, p.cutoff);
    }
    s
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Precision against recall for each named curve, on unit axes.
pub fn render_pr_plot(curves: &[(String, PrCurve)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_SIZE, PLOT_SIZE, Rgb([255, 255, 255]));
    let span = (PLOT_SIZE - 2 * MARGIN) as f64;
    let to_px = |r: f64, p: f64| {
        (
            MARGIN as i64 + (r * span).round() as i64,
            (PLOT_SIZE - MARGIN) as i64 - (p * span).round() as i64,
        )
    };
    let axis = Rgb([0, 0, 0]);
    line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), axis);
    line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), axis);
    let grid = Rgb([225, 225, 225]);
    for t in 1..=4 {
        let v = t as f64 / 4.0;
        line(&mut img, to_px(v, 0.0), to_px(v, 1.0), grid);
        line(&mut img, to_px(0.0, v), to_px(1.0, v), grid);
    }
    for (k, (_, curve)) in curves.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let mut prev = to_px(0.0, curve.points.first().map_or(0.0, |p| p.precision));
        for p in &curve.points {
            let cur = to_px(p.recall, p.precision);
            line(&mut img, prev, cur, color);
            prev = cur;
        }
    }
    img
}

/// One square per cell, white at 100% AP shading to red at 0%; grey for
/// undefined or unavailable cells. White-box cells get a black frame.
pub fn render_heatmap(m: &TransferMatrix) -> RgbImage {
    let cell = 40u32;
    let (cols, rows) = (m.detectors.len().max(1) as u32, m.rows.len().max(1) as u32);
    let mut img = RgbImage::from_pixel(cols * cell + 2, rows * cell + 2, Rgb([255, 255, 255]));
    for (r, row) in m.rows.iter().enumerate() {
        for (c, v) in row.cells.iter().enumerate() {
            let color = match v.ap {
                Some(ap) if v.available => {
                    let t = (ap / 100.0).clamp(0.0, 1.0);
                    let g = (255.0 * t).round() as u8;
                    Rgb([255, g, g])
                }
                _ => Rgb([160, 160, 160]),
            };
            let (x0, y0) = (1 + c as u32 * cell, 1 + r as u32 * cell);
            for y in y0..y0 + cell {
                for x in x0..x0 + cell {
                    let edge = x == x0 || y == y0 || x == x0 + cell - 1 || y == y0 + cell - 1;
                    let px = if edge && v.white_box { Rgb([0, 0, 0]) } else { color };
                    img.put_pixel(x, y, px);
                }
            }
        }
    }
    img
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::data(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::metrics::average_precision;
    use crate::eval::report::tests::headline_fixture;
    use crate::eval::ApInterpolation;

    #[test]
    fn plots_have_ink() {
        let c = average_precision(&[(0.9, true), (0.5, false), (0.3, true)], 3, ApInterpolation::AllPoint)
            .unwrap()
            .curve;
        let img = render_pr_plot(&[("a".into(), c.clone())]);
        assert!(img.pixels().any(|p| p.0 == PALETTE[0]));
        assert_eq!(pr_curve_csv(&c).lines().count(), 4);
        let h = render_heatmap(&headline_fixture().matrices[0]);
        assert_eq!((h.width(), h.height()), (42, 82));
        assert_eq!(h.get_pixel(1, 1).0, [0, 0, 0]);
    }
}
