//! Per-camera frame sources and multi-camera synchronization.

pub mod ingest;
pub mod skeleton;
pub mod sync;
pub mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::ply::PlyError;
use crate::geometry::PointCloud;

pub use ingest::{ingest_ply_sequence, Manifest, ManifestCamera, ManifestFrame, PlySequence};
pub use skeleton::{Joint, JointSample, Skeleton, SkeletonError, JOINT_COUNT};
pub use sync::{synchronize, SlotDuration, SyncConfig, SyncStats, SyncedGroup, Synchronizer};
pub use synth::{synth_scene, GroundTruth, SceneScript, SceneSynthesizer, SynthFrame};

pub type CameraId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDescriptor {
    pub camera_id: CameraId,
    /// Microseconds on the shared clock.
    pub capture_timestamp: i64,
    pub sequence_number: u64,
    pub point_count: usize,
}

/// One camera's frame: a camera-local cloud, its descriptor and an
/// optional tracked skeleton in the same camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedFrame {
    pub descriptor: FrameDescriptor,
    pub cloud: PointCloud,
    pub skeleton: Option<Skeleton>,
}

impl TaggedFrame {
    pub fn new(
        camera_id: CameraId,
        capture_timestamp: i64,
        sequence_number: u64,
        cloud: PointCloud,
        skeleton: Option<Skeleton>,
    ) -> Self {
        TaggedFrame {
            descriptor: FrameDescriptor {
                camera_id,
                capture_timestamp,
                sequence_number,
                point_count: cloud.len(),
            },
            cloud,
            skeleton,
        }
    }

    pub fn camera_id(&self) -> CameraId {
        self.descriptor.camera_id
    }

    pub fn timestamp(&self) -> i64 {
        self.descriptor.capture_timestamp
    }
}

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("scene script: {field}: {message}{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Script {
        field: String,
        line: Option<usize>,
        message: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("camera {camera} frame {sequence}: missing file {}", path.display())]
    MissingFile {
        camera: CameraId,
        sequence: u64,
        path: PathBuf,
    },
    #[error("camera {camera} frame {sequence}: {source}")]
    Ply {
        camera: CameraId,
        sequence: u64,
        #[source]
        source: PlyError,
    },
    #[error("camera {camera} frame {sequence}: bad skeleton sidecar: {message}")]
    Skeleton {
        camera: CameraId,
        sequence: u64,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
