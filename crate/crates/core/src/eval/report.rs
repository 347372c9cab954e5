//! The benchmark report: raw matrix cells plus derived per-detector
//! summaries, and plain-text and CSV rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::eval::bench::TransferMatrix;
use crate::types::PlacementMode;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Tolerance when checking stored derived values against recomputation.
pub const DERIVED_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSummary {
    pub mode: PlacementMode,
    pub noise_ap: Option<f64>,
    /// White-box AP: the detector attacked by its own patch.
    pub patched_ap: Option<f64>,
    /// `noise_ap - patched_ap`.
    pub ap_drop: Option<f64>,
    /// `patched_ap / clean_ap`, in percent.
    pub relative_ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSummary {
    pub detector: String,
    pub clean_ap: Option<f64>,
    pub modes: Vec<ModeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeInfo {
    pub seconds: f64,
    pub n_images: usize,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub summaries: Vec<DetectorSummary>,
    pub matrices: Vec<TransferMatrix>,
    pub runtime: RuntimeInfo,
}

fn sub(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// Derives the per-detector summaries from raw matrix cells.
pub fn summarize(matrices: &[TransferMatrix]) -> Vec<DetectorSummary> {
    let mut ids: Vec<String> = Vec::new();
    for m in matrices {
        for d in &m.detectors {
            if !ids.contains(d) {
                ids.push(d.clone());
            }
        }
    }
    ids.into_iter()
        .map(|id| {
            let clean_ap = matrices
                .iter()
                .find_map(|m| m.column(&id).and_then(|c| m.clean[c]));
            let modes = matrices
                .iter()
                .filter_map(|m| {
                    let c = m.column(&id)?;
                    let noise_ap = m.noise_row().and_then(|r| r.cells[c].ap);
                    let patched_ap = m.white_box(&id).and_then(|cell| cell.ap);
                    let relative_ap = match (patched_ap, clean_ap) {
                        (Some(p), Some(c)) if c > 0.0 => Some(p / c * 100.0),
                        _ => None,
                    };
                    Some(ModeSummary {
                        mode: m.mode,
                        noise_ap,
                        patched_ap,
                        ap_drop: sub(noise_ap, patched_ap),
                        relative_ap,
                    })
                })
                .collect();
            DetectorSummary {
                detector: id,
                clean_ap,
                modes,
            }
        })
        .collect()
}

impl BenchmarkReport {
    pub fn new(config_hash: impl Into<String>, matrices: Vec<TransferMatrix>, runtime: RuntimeInfo) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config_hash: config_hash.into(),
            summaries: summarize(&matrices),
            matrices,
            runtime,
        }
    }

    /// Rebuilds the derived fields from the raw cells and lists every stored
    /// value that disagrees with the recomputation.
    pub fn recompute(&self) -> (BenchmarkReport, Vec<String>) {
        let fresh = summarize(&self.matrices);
        let mut mismatches = Vec::new();
        let differs = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() > DERIVED_TOLERANCE,
            (None, None) => false,
            _ => true,
        };
        for f in &fresh {
            let Some(stored) = self.summaries.iter().find(|s| s.detector == f.detector) else {
                mismatches.push(format!("{}: summary missing", f.detector));
                continue;
            };
            if differs(stored.clean_ap, f.clean_ap) {
                mismatches.push(format!("{}: clean_ap {:?} != {:?}", f.detector, stored.clean_ap, f.clean_ap));
            }
            for fm in &f.modes {
                let Some(sm) = stored.modes.iter().find(|m| m.mode == fm.mode) else {
                    mismatches.push(format!("{} {}: summary missing", f.detector, fm.mode));
                    continue;
                };
                let fields = [
                    ("noise_ap", sm.noise_ap, fm.noise_ap),
                    ("patched_ap", sm.patched_ap, fm.patched_ap),
                    ("ap_drop", sm.ap_drop, fm.ap_drop),
                    ("relative_ap", sm.relative_ap, fm.relative_ap),
                ];
                for (name, s, r) in fields {
                    if differs(s, r) {
                        mismatches.push(format!("{} {}: {name} stored {s:?}, recomputed {r:?}", f.detector, fm.mode));
                    }
                }
            }
        }
        if self.summaries.len() != fresh.len() {
            mismatches.push(format!("{} stored summaries, {} detectors", self.summaries.len(), fresh.len()));
        }
        let mut report = self.clone();
        report.summaries = fresh;
        (report, mismatches)
    }
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.2}"))
}

/// Matrix as CSV: one row per patch plus the noise row. White-box cells
/// carry a trailing `*`; unavailable cells read `unavailable`.
pub fn matrix_csv(m: &TransferMatrix) -> String {
    let mut s = String::from("patch");
    for d in &m.detectors {
        let _ = write!(s, ",{d}");
    }
    s.push('\n');
    for r in &m.rows {
        s.push_str(&r.proxy);
        for c in &r.cells {
            let v = if !c.available {
                "unavailable".to_string()
            } else if c.white_box {
                format!("{}*", fmt_ap(c.ap))
            } else {
                fmt_ap(c.ap)
            };
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Per-detector summary as CSV.
pub fn summary_csv(report: &BenchmarkReport) -> String {
    let mut s = String::from("detector,mode,clean_ap,noise_ap,patched_ap,ap_drop,relative_ap\n");
    for d in &report.summaries {
        for m in &d.modes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                d.detector,
                m.mode,
                fmt_ap(d.clean_ap),
                fmt_ap(m.noise_ap),
                fmt_ap(m.patched_ap),
                fmt_ap(m.ap_drop),
                fmt_ap(m.relative_ap)
            );
        }
    }
    s
}

/// Human-readable tables. Deterministic for a given report.
pub fn render_tables(report: &BenchmarkReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "config {}", report.config_hash);
    for m in &report.matrices {
        let _ = writeln!(out, "\nTransfer matrix, {} placement (AP %, * = white-box)", m.mode);
        let width = m.detectors.iter().map(|d| d.len()).max().unwrap_or(0).max(11);
        let _ = write!(out, "{:<12}", "patch");
        for d in &m.detectors {
            let _ = write!(out, " {d:>width$}");
        }
        out.push('\n');
        let _ = write!(out, "{:<12}", "clean");
        for c in &m.clean {
            let _ = write!(out, " {:>width$}", fmt_ap(*c));
        }
        out.push('\n');
        for r in &m.rows {
            let _ = write!(out, "{:<12}", r.proxy);
            for c in &r.cells {
                let v = match (c.available, c.white_box) {
                    (false, _) => "unavailable".to_string(),
                    (true, true) => format!("{}*", fmt_ap(c.ap)),
                    (true, false) => fmt_ap(c.ap),
                };
                let _ = write!(out, " {v:>width$}");
            }
            out.push('\n');
        }
    }
    let _ = writeln!(out, "\nSummary (AP %)");
    let _ = writeln!(
        out,
        "{:<16} {:<14} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "detector", "mode", "clean", "noise", "patched", "drop", "rel"
    );
    for d in &report.summaries {
        for m in &d.modes {
            let _ = writeln!(
                out,
                "{:<16} {:<14} {:>8} {:>8} {:>8} {:>8} {:>8}",
                d.detector,
                m.mode.to_string(),
                fmt_ap(d.clean_ap),
                fmt_ap(m.noise_ap),
                fmt_ap(m.patched_ap),
                fmt_ap(m.ap_drop),
                fmt_ap(m.relative_ap)
            );
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::eval::bench::{MatrixCell, MatrixRow};

    fn cell(ap: f64, white_box: bool) -> MatrixCell {
        MatrixCell {
            ap: Some(ap),
            white_box,
            available: true,
            curve: None,
        }
    }

    /// One detector, its own patch at 6.33 and noise at 94.19.
    pub(crate) fn headline_fixture() -> BenchmarkReport {
        let m = TransferMatrix {
            mode: PlacementMode::OnTarget,
            detectors: vec!["YOLOv2".into()],
            clean: vec![Some(95.0)],
            rows: vec![
                MatrixRow {
                    proxy: "YOLOv2".into(),
                    baseline: false,
                    cells: vec![cell(6.33, true)],
                },
                MatrixRow {
                    proxy: "noise".into(),
                    baseline: true,
                    cells: vec![cell(94.19, false)],
                },
            ],
        };
        BenchmarkReport::new(
            "fixture",
            vec![m],
            RuntimeInfo {
                seconds: 0.0,
                n_images: 0,
                tool_version: "test".into(),
            },
        )
    }

    #[test]
    fn headline_drop() {
        let r = headline_fixture();
        let drop = r.summaries[0].modes[0].ap_drop.unwrap();
        assert!((drop - 87.86).abs() < DERIVED_TOLERANCE);
        assert!(render_tables(&r).contains("87.86"));
        assert!(summary_csv(&r).contains(",87.86,"));
    }

    #[test]
    fn tampered_drop_is_flagged_and_fixed() {
        let mut r = headline_fixture();
        r.summaries[0].modes[0].ap_drop = Some(50.0);
        let (fixed, bad) = r.recompute();
        assert_eq!(bad.len(), 1, "{bad:?}");
        assert!(bad[0].contains("ap_drop"));
        assert_eq!(fixed, headline_fixture());
    }

    #[test]
    fn minimal_matrix_csv_has_two_rows() {
        let csv = matrix_csv(&headline_fixture().matrices[0]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("YOLOv2,6.33*"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let r = headline_fixture();
        assert_eq!(render_tables(&r), render_tables(&r.clone()));
    }

    #[test]
    fn undefined_ap_renders_na() {
        let mut r = headline_fixture();
        r.matrices[0].rows[0].cells[0].ap = None;
        let (r, _) = r.recompute();
        assert_eq!(r.summaries[0].modes[0].ap_drop, None);
        assert!(render_tables(&r).contains("N/A"));
    }
}
