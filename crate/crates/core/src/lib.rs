//! Trace-driven live volumetric video streaming.
//!
//! The pipeline runs capture → synchronization → skeleton calibration →
//! body/scene segmentation → cube-level scene reuse → adaptive bitrate
//! scheduling → framed transport, entirely in software. Every stage is a
//! module here; [`transport::session`] wires them end to end.

pub mod geometry;
pub mod capture;
pub mod segmentation;
pub mod calibration;
pub mod scene_reuse;
pub mod vabr;
pub mod transport;
pub mod report;
