//! Skeleton-driven extrinsic calibration of sub cameras onto the master.
//!
//! Every sub camera's transform maps its local coordinates into the master
//! camera's frame, which serves as the world frame. Transforms are
//! re-estimated every `refresh_interval` slots from the joints both cameras
//! track with enough confidence.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::skeleton::{Skeleton, JOINT_COUNT};
use crate::capture::{CameraId, SyncedGroup};
use crate::geometry::{apply_transform, estimate_rigid_transform, GeometryError, PointCloud, ReferenceFrame, RigidTransform};

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_REFRESH_INTERVAL: i64 = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("only {0} joints pass the confidence threshold in both skeletons; need 3")]
    TooFewJoints(usize),
    #[error("calibration degenerate: {0}")]
    Degenerate(String),
    #[error("camera {0} has no calibration")]
    NotCalibrated(CameraId),
    #[error("calibration file line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Joints whose confidence reaches `threshold`.
pub fn denoise_skeleton(s: &Skeleton, threshold: f64) -> [bool; JOINT_COUNT] {
    let mut mask = [false; JOINT_COUNT];
    for (m, j) in mask.iter_mut().zip(s.joints()) {
        *m = j.confidence >= threshold;
    }
    mask
}

/// Transform mapping `sub` camera coordinates onto `master` camera
/// coordinates, weighted by the product of joint confidences.
pub fn calibrate_pair(sub: &Skeleton, master: &Skeleton, threshold: f64) -> Result<RigidTransform, CalibrationError> {
    let ms = denoise_skeleton(sub, threshold);
    let mm = denoise_skeleton(master, threshold);
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut w = Vec::new();
    for i in 0..JOINT_COUNT {
        let weight = sub.joints()[i].confidence * master.joints()[i].confidence;
        if ms[i] && mm[i] && weight > 0.0 {
            src.push(sub.joints()[i].position);
            dst.push(master.joints()[i].position);
            w.push(weight);
        }
    }
    if src.len() < 3 {
        return Err(CalibrationError::TooFewJoints(src.len()));
    }
    estimate_rigid_transform(&src, &dst, &w).map_err(|e| match e {
        GeometryError::CalibrationDegenerate(m) => CalibrationError::Degenerate(m),
        other => CalibrationError::Degenerate(other.to_string()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CalibrationOutcome {
    Updated,
    /// Estimation failed; the previous transform (if any) was kept.
    Retained(String),
    MissingSkeleton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEvent {
    pub slot: i64,
    pub camera: CameraId,
    pub outcome: CalibrationOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub master_camera_id: CameraId,
    pub transforms: BTreeMap<CameraId, RigidTransform>,
    pub last_update_slot: Option<i64>,
    pub refresh_interval: i64,
    pub confidence_threshold: f64,
    pub recomputations: u64,
    pub log: Vec<CalibrationEvent>,
}

/// Merged world cloud plus the cameras left out for lack of calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutput {
    pub cloud: PointCloud,
    pub excluded: Vec<CameraId>,
    pub excluded_points: usize,
}

impl CalibrationState {
    pub fn new(master_camera_id: CameraId) -> Self {
        CalibrationState {
            master_camera_id,
            transforms: BTreeMap::new(),
            last_update_slot: None,
            refresh_interval: DEFAULT_REFRESH_INTERVAL,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            recomputations: 0,
            log: Vec::new(),
        }
    }

    /// Master defaults to the lowest camera id.
    pub fn for_cameras(ids: &[CameraId]) -> Self {
        Self::new(*ids.iter().min().expect("at least one camera"))
    }

    pub fn with_interval(mut self, interval: i64) -> Self {
        assert!(interval >= 1);
        self.refresh_interval = interval;
        self
    }

    pub fn transform(&self, camera: CameraId) -> Option<RigidTransform> {
        if camera == self.master_camera_id {
            Some(RigidTransform::identity())
        } else {
            self.transforms.get(&camera).copied()
        }
    }

    pub fn is_due(&self, slot: i64) -> bool {
        self.last_update_slot.is_none_or(|last| slot - last >= self.refresh_interval)
    }

    /// Re-estimates every sub camera if the refresh interval has elapsed
    /// and the master has a skeleton. Returns whether an attempt was made.
    pub fn refresh(&mut self, group: &SyncedGroup) -> bool {
        let slot = group.slot_index;
        if !self.is_due(slot) {
            return false;
        }
        let Some(master) = group
            .frames
            .iter()
            .find(|f| f.camera_id() == self.master_camera_id)
            .and_then(|f| f.skeleton.as_ref())
        else {
            return false;
        };
        let threshold = self.confidence_threshold;
        let results: Vec<(CameraId, Result<RigidTransform, CalibrationOutcome>)> = group
            .frames
            .par_iter()
            .filter(|f| f.camera_id() != self.master_camera_id)
            .map(|f| {
                let r = match &f.skeleton {
                    None => Err(CalibrationOutcome::MissingSkeleton),
                    Some(s) => calibrate_pair(s, master, threshold).map_err(|e| CalibrationOutcome::Retained(e.to_string())),
                };
                (f.camera_id(), r)
            })
            .collect();
        for (camera, r) in results {
            let outcome = match r {
                Ok(t) => {
                    self.transforms.insert(camera, t);
                    CalibrationOutcome::Updated
                }
                Err(o) => o,
            };
            self.log.push(CalibrationEvent { slot, camera, outcome });
        }
        self.last_update_slot = Some(slot);
        self.recomputations += 1;
        true
    }

    /// Skeleton fused across all calibrated cameras, in the world frame.
    pub fn fused_skeleton(&self, group: &SyncedGroup) -> Option<Skeleton> {
        let world: Vec<Skeleton> = group
            .frames
            .iter()
            .filter_map(|f| Some(f.skeleton.as_ref()?.transformed(&self.transform(f.camera_id())?)))
            .collect();
        Skeleton::fuse(&world)
    }

    pub fn export_text(&self) -> String {
        let mut out = format!("master {}\n", self.master_camera_id);
        for (id, t) in &self.transforms {
            let _ = write!(out, "{id}");
            for v in t.to_row_major() {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn import_text(text: &str) -> Result<Self, CalibrationError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let err = |line: usize, message: &str| CalibrationError::Parse {
            line: line + 1,
            message: message.to_string(),
        };
        let (n, first) = lines.next().ok_or_else(|| err(0, "empty calibration file"))?;
        let master = first
            .trim()
            .strip_prefix("master")
            .and_then(|s| s.trim().parse::<CameraId>().ok())
            .ok_or_else(|| err(n, "expected `master <id>`"))?;
        let mut state = CalibrationState::new(master);
        for (n, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 13 {
                return Err(err(n, "expected camera id followed by 9 rotation and 3 translation values"));
            }
            let id: CameraId = fields[0].parse().map_err(|_| err(n, "bad camera id"))?;
            let mut v = [0.0; 12];
            for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                *slot = f.parse::<f64>().map_err(|_| err(n, "bad number"))?;
                if !slot.is_finite() {
                    return Err(err(n, "non-finite value"));
                }
            }
            state.transforms.insert(id, RigidTransform::from_row_major(&v));
        }
        Ok(state)
    }
}

/// Concatenates every camera's cloud in the master frame. Fails if any
/// sub camera is uncalibrated.
pub fn merge_group(group: &SyncedGroup, state: &CalibrationState) -> Result<PointCloud, CalibrationError> {
    let out = merge_available(group, state);
    match out.excluded.first() {
        Some(&c) => Err(CalibrationError::NotCalibrated(c)),
        None => Ok(out.cloud),
    }
}

/// Like [`merge_group`] but leaves uncalibrated cameras out and reports them.
pub fn merge_available(group: &SyncedGroup, state: &CalibrationState) -> MergeOutput {
    let mut cloud = PointCloud::new(ReferenceFrame::World);
    let mut excluded = Vec::new();
    let mut excluded_points = 0;
    for f in &group.frames {
        match state.transform(f.camera_id()) {
            Some(_) if f.camera_id() == state.master_camera_id => cloud.points.extend_from_slice(&f.cloud.points),
            Some(t) => cloud.points.extend(apply_transform(&f.cloud, &t).points),
            None => {
                excluded.push(f.camera_id());
                excluded_points += f.cloud.len();
            }
        }
    }
    MergeOutput {
        cloud,
        excluded,
        excluded_points,
    }
}
