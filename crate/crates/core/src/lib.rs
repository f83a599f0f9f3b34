//! Unsupervised anomaly detection by feature reconstruction.
//!
//! A residual encoder produces a three-stage feature pyramid; a fusion
//! bottleneck and a reversed decoder reconstruct it. Training contrasts the
//! two pyramids with cosine losses. Optional pieces are a trainable encoder
//! behind a stop-gradient, a frozen pretrained twin for cross
//! reconstruction, and hard-normal mining. At test time the per-point
//! cosine distances localize anomalies.
//!
//! Module map:
//! - [`backbone`]: encoder / bottleneck / decoder construction, BN policies
//! - [`losses`]: distance maps, regional / global / hard-mined losses
//! - [`graph`]: configuration variants and gradient-flow wiring
//! - [`scoring`]: anomaly maps and image scores
//! - [`metrics`]: AUROC, AUPRO, optimal-F1
//! - [`data`]: dataset layouts, preprocessing, synthetic defects
//! - [`engine`]: training, evaluation, diagnostics

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod scoring;

pub use candle_core::Device;
pub use error::{Error, Result};
