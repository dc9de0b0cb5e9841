//! Evaluation: ROUGE, anchor ablations, truncation baselines, heatmaps,
//! reports and the complexity benchmark. Sweeps live in the pipeline since
//! they need trained models.

pub mod ablation;
pub mod bench;
pub mod heatmap;
pub mod report;
pub mod rouge;

pub use ablation::{ablate_anchors, high_frequency_pool, truncate_input, Ablated, AblationMode, AblationSpec, TruncationSide};
pub use bench::{benchmark_complexity, fit_power_law, BenchConfig, BenchReport};
pub use heatmap::export_heatmap;
pub use report::{write_report, ReportMeta};
pub use rouge::{mean_score, rouge, RougeScore};
