//! Relative navigation about a non-cooperative target: an adaptive unscented
//! Kalman filter over relative orbital elements and relative attitude, fed by
//! keypoint heatmap measurements, with an online supervised training loop that
//! refines the keypoint predictor from the filter's own state estimates.
//!
//! The crate is organized around the simulation pipeline:
//!
//! * [`geometry`] — quaternions, MRPs, pinhole projection, RoI cropping
//! * [`dynamics`] — ROE state-transition matrices, ROE→RTN map, torque-free
//!   attitude propagation, and a nonlinear integration oracle
//! * [`heatmap`] — Gaussian blob rendering, sub-pixel decoding, spread
//!   covariance and the heatmap MSE loss
//! * [`predictor`] — synthetic detector with parametric domain gap plus a
//!   small trainable coordinate-refinement model (analytic backprop, AdamW)
//! * [`filter`] — the adaptive UKF: USQUE-style multiplicative attitude
//!   handling, heatmap-derived R, Mahalanobis gating, adaptive process noise
//! * [`ost`] — pseudo-label generation and the one-step online training loop
//! * [`pose`] — EPnP pose recovery and evaluation metrics
//! * [`scenario`] — config-driven end-to-end runs, logging and comparison

pub mod dynamics;
pub mod filter;
pub mod geometry;
pub mod heatmap;
pub mod ost;
pub mod pose;
pub mod predictor;
pub mod scenario;

pub use geometry::{CameraModel, KeypointModel, Mrp, Quaternion, Roi};
pub use heatmap::{HeatmapStack, KeypointMeasurement};
pub use scenario::{RunLog, ScenarioConfig};
