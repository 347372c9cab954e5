//! Metrics, benchmark runs and reports.

pub mod bench;
pub mod metrics;
pub mod report;

pub use bench::{
    evaluate, evaluate_under, noise_patch, run_dynamics_sweep, run_resolution_ablation, run_transfer_benchmark,
    DetectorSlot, EvalSettings, SweepTable, TransferMatrix,
};
pub use metrics::{average_precision, match_detections, ApAccumulator, ApInterpolation, ApResult, PrCurve, PrPoint};
pub use report::{render_tables, BenchmarkReport};
