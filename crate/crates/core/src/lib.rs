//! Dual-branch multivariate forecasting: a mostly frozen pretrained transformer
//! models channel correlations and temporal patches, a patch-transformer branch
//! produces the forecast, and per-depth fusion blocks feed PLM features into it.

pub mod backbone;
pub mod channel_text;
pub mod checkpoint;
pub mod cli;
pub mod cmf;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod plm_branch;
pub mod synthetic;
pub mod tokenizer;
pub mod training;
pub mod ts_branch;

pub use error::{Error, Result};
pub use model::Model;
