//! Desk-scale radar precipitation nowcasting.
//!
//! An encoder-forecaster ConvLSTM network over radar reflectivity mosaics,
//! together with everything needed to train and judge it on one machine:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff and the handful of
//!   differentiable ops the network needs (convolutions, group norm,
//!   activations, temporal reductions).
//! - [`model`]: the three-layer encoder-forecaster with the large-viewport
//!   input transform, NWP conditioning path and the trainable hidden-state
//!   bridge.
//! - [`train`]: weighted MAE+MSE loss, Adam with gradient clipping and
//!   stochastic weight averaging, and the training loop.
//! - [`data`]: synthetic storm-field generation, NWP surrogate frames,
//!   dataset windowing and the on-disk sequence container.
//! - [`baselines`]: persistence and dense optical-flow extrapolation.
//! - [`metrics`]: MAE, F1 at reflectivity thresholds, bias, PSNR, MS-SSIM and
//!   per-lead-time report aggregation.

pub mod baselines;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
