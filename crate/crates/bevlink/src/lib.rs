//! Deterministic vehicle-to-infrastructure link-prediction workbench.
//!
//! The crate simulates a small urban scene, traces the mmWave uplink between
//! an ego vehicle and a roadside unit with an image-method ray tracer, turns
//! multi-agent LiDAR + camera-visibility sensing into bird's-eye-view grids,
//! and trains a compact connector (temporal attention, grid warping, conv
//! aggregation, instruction-aware Q-Former, cross-attention injection, MLP
//! head) on three binary link-prediction tasks. Every stage is a pure
//! function of its configuration and seed.

pub mod autodiff;
pub mod bevpipe;
pub mod channel;
pub mod cli;
pub mod connector;
pub mod datasetio;
pub mod error;
pub mod eval;
pub mod geom;
pub mod scene;
pub mod seeded;
pub mod sensing;
pub mod tasks;

pub use error::Error;
