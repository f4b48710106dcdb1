//! Quantitative instruments: image metrics, the semantic-disentanglement
//! metric, attention-map probing, the semantic-loss experiment, and the
//! editing benchmark.

mod benchmark;
mod metrics;
mod probe;
mod sde;
mod semantic_loss;

pub use benchmark::{
    generate_benchmark, run_benchmark, write_report_csv, write_summary_json, BenchConfig,
    BenchReport, BenchRow,
};
pub use metrics::{psnr, spearman, ssim, tv_distance_from_uniform};
pub use probe::{probe, probe_shuffled_control, ProbeConfig, ProbeReport};
pub use sde::{sde_for_attribute, SdeConfig, SdeReport};
pub use semantic_loss::{semantic_loss_curve, SemanticLossPoint};
