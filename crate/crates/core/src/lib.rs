//! Local-mapping back end for keyframe-based visual SLAM.
//!
//! The crate covers the four heavy local-mapping stages (map-point creation,
//! duplicate fusion, local bundle adjustment and keyframe culling), a
//! persistent keyframe store with transfer accounting, a queue-driven
//! orchestrator with per-stage timings, and a synthetic benchmark harness.

pub mod ba;
pub mod culling;
pub mod device_store;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod geometry;
pub mod map;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod triangulation;

pub use error::{Error, Result};
pub use exec::Executor;
pub use geometry::{BinaryDescriptor, CameraIntrinsics, KeyPoint, SE3Pose};
pub use map::{KeyFrame, KeyFrameId, Map, MapConfig, MapPoint, MapPointId};
