//! 3D multi-object tracking with interchangeable motion modules.
//!
//! The pipeline is tracking-by-detection: detections are filtered and
//! de-duplicated, tracks are predicted with a motion module, matched to
//! detections in two stages (3D GIoU, then BEV GIoU), updated, and managed by
//! a confidence-based lifecycle. Motion modules are either a classical
//! (extended) Kalman filter or a recurrent network that emits the Kalman gain
//! directly and is trained with annotations plus EKF pseudo-labels.

pub mod assign;
pub mod cli;
pub mod config;
pub mod error;
pub mod filter;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod gkf;
pub mod motion;
pub mod neural;
pub mod scene;
pub mod simulator;
pub mod tracker;
pub mod trainer;

pub use error::{Error, Result};
