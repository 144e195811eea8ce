//! Evaluation: image quality, model complexity and runtime.

pub mod complexity;
pub mod quality;
pub mod runtime;

pub use complexity::{count_flops, count_params, Ledger, LedgerRow, OpKind, ParamReport};
pub use quality::{fmt_metric, psnr, ssim, ImageScore, MetricsReport, SsimParams};
pub use runtime::{hardware_string, profile_runtime, RuntimeProfile};
