//! Metrics, representation-similarity and correlation analyses, reports and the
//! ablation harness.

pub mod cka;
pub mod metrics;
pub mod pearson;
pub mod report;
pub mod variants;

pub use cka::linear_cka;
pub use metrics::{mae, mse};
pub use pearson::pearson_corr_map;
pub use report::EvalReport;
pub use variants::{run_variant, Variant};
