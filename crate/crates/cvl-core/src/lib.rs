//! Characteristic-vector linkage research library.
//!
//! Firms with similar characteristic vectors tend to lead and lag each
//! other's returns. This crate measures that similarity two ways — plain
//! Euclidean distance and a learned quantum-state embedding — turns it into
//! linkage-weighted momentum-spillover signals, and evaluates the signals
//! with a control-neutral Markowitz backtester. A synthetic market generator
//! with planted linkages makes every claim testable end to end.
//!
//! Modules follow the data flow:
//!
//! - [`hermitian`]: complex Hermitian operators and pure states.
//! - [`qcml`]: supervised quantum-state model and ensemble training.
//! - [`metrics`]: distances, the similarity kernel, bandwidth calibration.
//! - [`panel`]: data panels, preprocessing, targets, the synthetic market.
//! - [`signal`]: linkage weights and spillover signals.
//! - [`backtest`]: covariance, projection, portfolio construction, reports.
//! - [`pipeline`]: run configuration and stage orchestration.
//! - [`io`]: delimited-text artifact formats with config digests.

pub mod backtest;
pub mod hermitian;
pub mod io;
pub mod metrics;
pub mod panel;
pub mod pipeline;
pub mod qcml;
pub mod seed;
pub mod signal;
