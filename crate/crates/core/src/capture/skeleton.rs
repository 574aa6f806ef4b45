use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::RigidTransform;

pub const JOINT_COUNT: usize = 32;

/// Joint indices of the 32-joint body-tracking skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Joint {
    Pelvis = 0,
    SpineNavel = 1,
    SpineChest = 2,
    Neck = 3,
    ClavicleLeft = 4,
    ShoulderLeft = 5,
    ElbowLeft = 6,
    WristLeft = 7,
    HandLeft = 8,
    HandTipLeft = 9,
    ThumbLeft = 10,
    ClavicleRight = 11,
    ShoulderRight = 12,
    ElbowRight = 13,
    WristRight = 14,
    HandRight = 15,
    HandTipRight = 16,
    ThumbRight = 17,
    HipLeft = 18,
    KneeLeft = 19,
    AnkleLeft = 20,
    FootLeft = 21,
    HipRight = 22,
    KneeRight = 23,
    AnkleRight = 24,
    FootRight = 25,
    Head = 26,
    Nose = 27,
    EyeLeft = 28,
    EarLeft = 29,
    EyeRight = 30,
    EarRight = 31,
}

impl Joint {
    pub const ALL: [Joint; JOINT_COUNT] = [
        Joint::Pelvis,
        Joint::SpineNavel,
        Joint::SpineChest,
        Joint::Neck,
        Joint::ClavicleLeft,
        Joint::ShoulderLeft,
        Joint::ElbowLeft,
        Joint::WristLeft,
        Joint::HandLeft,
        Joint::HandTipLeft,
        Joint::ThumbLeft,
        Joint::ClavicleRight,
        Joint::ShoulderRight,
        Joint::ElbowRight,
        Joint::WristRight,
        Joint::HandRight,
        Joint::HandTipRight,
        Joint::ThumbRight,
        Joint::HipLeft,
        Joint::KneeLeft,
        Joint::AnkleLeft,
        Joint::FootLeft,
        Joint::HipRight,
        Joint::KneeRight,
        Joint::AnkleRight,
        Joint::FootRight,
        Joint::Head,
        Joint::Nose,
        Joint::EyeLeft,
        Joint::EarLeft,
        Joint::EyeRight,
        Joint::EarRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Joint> {
        Joint::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        JOINT_NAMES[self.index()]
    }

    /// Parent in the kinematic tree; the pelvis is the root.
    pub fn parent(self) -> Option<Joint> {
        use Joint::*;
        Some(match self {
            Pelvis => return None,
            SpineNavel => Pelvis,
            SpineChest => SpineNavel,
            Neck => SpineChest,
            ClavicleLeft | ClavicleRight => SpineChest,
            ShoulderLeft => ClavicleLeft,
            ElbowLeft => ShoulderLeft,
            WristLeft => ElbowLeft,
            HandLeft | ThumbLeft => WristLeft,
            HandTipLeft => HandLeft,
            ShoulderRight => ClavicleRight,
            ElbowRight => ShoulderRight,
            WristRight => ElbowRight,
            HandRight | ThumbRight => WristRight,
            HandTipRight => HandRight,
            HipLeft | HipRight => Pelvis,
            KneeLeft => HipLeft,
            AnkleLeft => KneeLeft,
            FootLeft => AnkleLeft,
            KneeRight => HipRight,
            AnkleRight => KneeRight,
            FootRight => AnkleRight,
            Head => Neck,
            Nose | EyeLeft | EarLeft | EyeRight | EarRight => Head,
        })
    }
}

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis",
    "spine_navel",
    "spine_chest",
    "neck",
    "clavicle_left",
    "shoulder_left",
    "elbow_left",
    "wrist_left",
    "hand_left",
    "handtip_left",
    "thumb_left",
    "clavicle_right",
    "shoulder_right",
    "elbow_right",
    "wrist_right",
    "hand_right",
    "handtip_right",
    "thumb_right",
    "hip_left",
    "knee_left",
    "ankle_left",
    "foot_left",
    "hip_right",
    "knee_right",
    "ankle_right",
    "foot_right",
    "head",
    "nose",
    "eye_left",
    "ear_left",
    "eye_right",
    "ear_right",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSample {
    pub position: Vector3<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum SkeletonError {
    #[error("skeleton needs exactly 32 joints, got {0}")]
    JointCount(usize),
    #[error("joint {0} has confidence outside [0, 1] or a non-finite position")]
    InvalidJoint(usize),
}

/// 32 tracked joints, each with a confidence in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    joints: Vec<JointSample>,
}

impl Skeleton {
    pub fn new(joints: Vec<JointSample>) -> Result<Self, SkeletonError> {
        if joints.len() != JOINT_COUNT {
            return Err(SkeletonError::JointCount(joints.len()));
        }
        for (i, j) in joints.iter().enumerate() {
            let finite = j.position.iter().all(|c| c.is_finite());
            if !finite || !(0.0..=1.0).contains(&j.confidence) {
                return Err(SkeletonError::InvalidJoint(i));
            }
        }
        Ok(Skeleton { joints })
    }

    pub fn from_positions(positions: &[Vector3<f64>; JOINT_COUNT], confidence: f64) -> Self {
        Skeleton::new(
            positions
                .iter()
                .map(|&position| JointSample {
                    position,
                    confidence,
                })
                .collect(),
        )
        .expect("valid joints")
    }

    pub fn joints(&self) -> &[JointSample] {
        &self.joints
    }

    pub fn joint(&self, j: Joint) -> &JointSample {
        &self.joints[j.index()]
    }

    pub fn position(&self, j: Joint) -> Vector3<f64> {
        self.joints[j.index()].position
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.joints.iter().map(|j| j.position).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.confidence).collect()
    }

    pub fn set_confidence(&mut self, j: usize, confidence: f64) {
        self.joints[j].confidence = confidence.clamp(0.0, 1.0);
    }

    pub fn transformed(&self, t: &RigidTransform) -> Skeleton {
        Skeleton {
            joints: self
                .joints
                .iter()
                .map(|j| JointSample {
                    position: t.apply(&j.position),
                    confidence: j.confidence,
                })
                .collect(),
        }
    }

    /// Per-joint confidence-weighted average of several skeletons expressed
    /// in one frame. Returns `None` for an empty input.
    pub fn fuse<'a>(skeletons: impl IntoIterator<Item = &'a Skeleton>) -> Option<Skeleton> {
        let all: Vec<&Skeleton> = skeletons.into_iter().collect();
        let first = all.first()?;
        let joints = (0..JOINT_COUNT)
            .map(|i| {
                let wsum: f64 = all.iter().map(|s| s.joints[i].confidence).sum();
                if wsum <= 0.0 {
                    return JointSample {
                        position: first.joints[i].position,
                        confidence: 0.0,
                    };
                }
                let pos = all
                    .iter()
                    .fold(Vector3::zeros(), |acc, s| {
                        acc + s.joints[i].position * s.joints[i].confidence
                    })
                    / wsum;
                let conf = all.iter().map(|s| s.joints[i].confidence).fold(0.0, f64::max);
                JointSample {
                    position: pos,
                    confidence: conf,
                }
            })
            .collect();
        Some(Skeleton { joints })
    }
}
