//! Quantitative analysis: classification metrics, rank-sum test, REML timing model,
//! bootstrap model comparison.

pub mod bootstrap;
pub mod lmm;
pub mod metrics;
pub mod paired;
pub mod wilcoxon;

pub use bootstrap::{bootstrap_compare, BootstrapConfig, BootstrapResult};
pub use lmm::{fit_lmm, lmm_round_effects, LmmFit, TimingRow};
pub use paired::{paired_grader_comparison, GoldLabels, GradingTarget, PairedComparison};
pub use metrics::{confusion, per_class_metrics, ClassMetrics, ConfusionMatrix, F1Average};
pub use wilcoxon::{wilcoxon_rank_sum, WilcoxonMethod, WilcoxonResult};
