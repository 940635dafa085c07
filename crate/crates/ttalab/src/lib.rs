//! Desk-scale test-time adaptation laboratory.
//!
//! Small MLP classifiers with swappable normalization layers adapt online to
//! synthetically generated "wild" test streams (mixed corruptions, tiny
//! batches, imbalanced label shifts). Adaptation methods: plain entropy
//! minimization, gradient-clipped variants, and sharpness-aware reliable
//! entropy minimization with model recovery.

pub mod adapt;
pub mod config;
pub mod models;
pub mod runner;
pub mod shiftgen;
pub mod telemetry;
pub mod tensor;
