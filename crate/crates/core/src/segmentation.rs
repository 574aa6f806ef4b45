//! Skeleton-driven body/scene split and per-part decimation.
//!
//! Fifteen capped cylinders, one per body part, are placed along bones of
//! the tracked skeleton. A point inside several cylinders goes to the one
//! whose bone segment is closest (ties to the lower part index); points in
//! none of them form the static scene.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::skeleton::{Joint, Skeleton};
use crate::geometry::{Point, PointCloud, ReferenceFrame};

/// Bytes one point occupies on the wire (3 × f32 + 3 × u8).
pub const WIRE_BYTES_PER_POINT: u64 = 15;
pub const BITS_PER_POINT: u64 = WIRE_BYTES_PER_POINT * 8;

pub const PART_COUNT: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum BodyPart {
    Head = 0,
    Neck = 1,
    Chest = 2,
    Abdomen = 3,
    Pelvis = 4,
    LeftUpperArm = 5,
    LeftLowerArm = 6,
    LeftHand = 7,
    RightUpperArm = 8,
    RightLowerArm = 9,
    RightHand = 10,
    LeftUpperLeg = 11,
    LeftLowerLeg = 12,
    RightUpperLeg = 13,
    RightLowerLeg = 14,
}

/// Coarse grouping used for the kept-ratio presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyGroup {
    Head,
    Chest,
    Arm,
    Leg,
}

impl BodyGroup {
    pub const ALL: [BodyGroup; 4] = [BodyGroup::Head, BodyGroup::Chest, BodyGroup::Arm, BodyGroup::Leg];

    pub fn name(self) -> &'static str {
        match self {
            BodyGroup::Head => "head",
            BodyGroup::Chest => "chest",
            BodyGroup::Arm => "arm",
            BodyGroup::Leg => "leg",
        }
    }

    pub fn parts(self) -> impl Iterator<Item = BodyPart> {
        BodyPart::ALL.into_iter().filter(move |p| p.group() == self)
    }
}

impl BodyPart {
    pub const ALL: [BodyPart; PART_COUNT] = [
        BodyPart::Head,
        BodyPart::Neck,
        BodyPart::Chest,
        BodyPart::Abdomen,
        BodyPart::Pelvis,
        BodyPart::LeftUpperArm,
        BodyPart::LeftLowerArm,
        BodyPart::LeftHand,
        BodyPart::RightUpperArm,
        BodyPart::RightLowerArm,
        BodyPart::RightHand,
        BodyPart::LeftUpperLeg,
        BodyPart::LeftLowerLeg,
        BodyPart::RightUpperLeg,
        BodyPart::RightLowerLeg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<BodyPart> {
        BodyPart::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyPart::Head => "head",
            BodyPart::Neck => "neck",
            BodyPart::Chest => "chest",
            BodyPart::Abdomen => "abdomen",
            BodyPart::Pelvis => "pelvis",
            BodyPart::LeftUpperArm => "left_upper_arm",
            BodyPart::LeftLowerArm => "left_lower_arm",
            BodyPart::LeftHand => "left_hand",
            BodyPart::RightUpperArm => "right_upper_arm",
            BodyPart::RightLowerArm => "right_lower_arm",
            BodyPart::RightHand => "right_hand",
            BodyPart::LeftUpperLeg => "left_upper_leg",
            BodyPart::LeftLowerLeg => "left_lower_leg",
            BodyPart::RightUpperLeg => "right_upper_leg",
            BodyPart::RightLowerLeg => "right_lower_leg",
        }
    }

    pub fn group(self) -> BodyGroup {
        use BodyPart::*;
        match self {
            Head | Neck => BodyGroup::Head,
            Chest | Abdomen | Pelvis => BodyGroup::Chest,
            LeftUpperArm | LeftLowerArm | LeftHand | RightUpperArm | RightLowerArm | RightHand => {
                BodyGroup::Arm
            }
            LeftUpperLeg | LeftLowerLeg | RightUpperLeg | RightLowerLeg => BodyGroup::Leg,
        }
    }

    /// The two adjacent joints whose bone is this part's cylinder axis.
    pub fn axis(self) -> (Joint, Joint) {
        use BodyPart::*;
        match self {
            Head => (Joint::Neck, Joint::Head),
            Neck => (Joint::SpineChest, Joint::Neck),
            Chest => (Joint::SpineNavel, Joint::SpineChest),
            Abdomen => (Joint::Pelvis, Joint::SpineNavel),
            Pelvis => (Joint::HipLeft, Joint::HipRight),
            LeftUpperArm => (Joint::ShoulderLeft, Joint::ElbowLeft),
            LeftLowerArm => (Joint::ElbowLeft, Joint::WristLeft),
            LeftHand => (Joint::WristLeft, Joint::HandTipLeft),
            RightUpperArm => (Joint::ShoulderRight, Joint::ElbowRight),
            RightLowerArm => (Joint::ElbowRight, Joint::WristRight),
            RightHand => (Joint::WristRight, Joint::HandTipRight),
            LeftUpperLeg => (Joint::HipLeft, Joint::KneeLeft),
            LeftLowerLeg => (Joint::KneeLeft, Joint::AnkleLeft),
            RightUpperLeg => (Joint::HipRight, Joint::KneeRight),
            RightLowerLeg => (Joint::KneeRight, Joint::AnkleRight),
        }
    }
}

impl fmt::Display for BodyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylinderSpec {
    pub part: BodyPart,
    pub axis: (Joint, Joint),
    pub radius: f64,
    pub end_padding: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum SegmentationError {
    #[error("need one cylinder per body part; {0} is missing or duplicated")]
    Coverage(BodyPart),
    #[error("cylinder for {0} has a non-positive radius or a degenerate axis")]
    InvalidCylinder(BodyPart),
    #[error("kept ratio {ratio} for {part} is outside (0, 1]")]
    Ratio { part: BodyPart, ratio: f64 },
    #[error("unknown decimation preset {0:?}")]
    UnknownPreset(String),
    #[error("preset file: {0}")]
    PresetFile(String),
}

pub const DEFAULT_END_PADDING: f64 = 0.05;

/// Default radius per part: head 0.15 m, torso 0.22 m, arm segments
/// 0.10 m, leg segments 0.12 m, hands 0.08 m.
pub fn default_radius(part: BodyPart) -> f64 {
    use BodyPart::*;
    match part {
        Head => 0.15,
        Neck | Chest | Abdomen | Pelvis => 0.22,
        LeftUpperArm | LeftLowerArm | RightUpperArm | RightLowerArm => 0.10,
        LeftHand | RightHand => 0.08,
        LeftUpperLeg | LeftLowerLeg | RightUpperLeg | RightLowerLeg => 0.12,
    }
}

pub fn default_cylinders() -> Vec<CylinderSpec> {
    BodyPart::ALL
        .iter()
        .map(|&part| CylinderSpec {
            part,
            axis: part.axis(),
            radius: default_radius(part),
            end_padding: DEFAULT_END_PADDING,
        })
        .collect()
}

fn validate_specs(specs: &[CylinderSpec]) -> Result<[CylinderSpec; PART_COUNT], SegmentationError> {
    let mut slots: [Option<CylinderSpec>; PART_COUNT] = [None; PART_COUNT];
    for spec in specs {
        let slot = &mut slots[spec.part.index()];
        if slot.is_some() {
            return Err(SegmentationError::Coverage(spec.part));
        }
        if !(spec.radius > 0.0) || spec.axis.0 == spec.axis.1 || !(spec.end_padding >= 0.0) {
            return Err(SegmentationError::InvalidCylinder(spec.part));
        }
        *slot = Some(*spec);
    }
    let mut out = [default_cylinders()[0]; PART_COUNT];
    for (i, slot) in slots.iter().enumerate() {
        out[i] = slot.ok_or(SegmentationError::Coverage(BodyPart::ALL[i]))?;
    }
    Ok(out)
}

/// A cylinder resolved against a concrete skeleton.
#[derive(Debug, Clone, Copy)]
struct PlacedCylinder {
    start: Vector3<f64>,
    dir: Vector3<f64>,
    length: f64,
    radius_sq: f64,
    padding: f64,
}

impl PlacedCylinder {
    fn place(spec: &CylinderSpec, skel: &Skeleton) -> Self {
        let start = skel.position(spec.axis.0);
        let end = skel.position(spec.axis.1);
        let v = end - start;
        let length = v.norm();
        let dir = if length > 1e-12 { v / length } else { Vector3::z() };
        PlacedCylinder {
            start,
            dir,
            length,
            radius_sq: spec.radius * spec.radius,
            padding: spec.end_padding,
        }
    }

    /// Squared distance to the bone segment if the point lies inside the
    /// padded cylinder.
    #[inline]
    fn contains(&self, p: &Vector3<f64>) -> Option<f64> {
        let v = p - self.start;
        let t = v.dot(&self.dir);
        if t < -self.padding || t > self.length + self.padding {
            return None;
        }
        let radial_sq = (v.norm_squared() - t * t).max(0.0);
        if radial_sq > self.radius_sq {
            return None;
        }
        let beyond = if t < 0.0 {
            -t
        } else if t > self.length {
            t - self.length
        } else {
            0.0
        };
        Some(radial_sq + beyond * beyond)
    }

    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let r = self.radius_sq.sqrt();
        let a = self.start - self.dir * self.padding;
        let b = self.start + self.dir * (self.length + self.padding);
        let pad = Vector3::repeat(r);
        (a.inf(&b) - pad, a.sup(&b) + pad)
    }
}

/// Per-point part assignment against placed cylinders.
pub struct BodyFilter {
    cylinders: [PlacedCylinder; PART_COUNT],
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

impl BodyFilter {
    pub fn new(skel: &Skeleton, specs: &[CylinderSpec]) -> Result<Self, SegmentationError> {
        let specs = validate_specs(specs)?;
        let cylinders = specs.map(|s| PlacedCylinder::place(&s, skel));
        let (mut lo, mut hi) = cylinders[0].bounds();
        for c in &cylinders[1..] {
            let (a, b) = c.bounds();
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
        Ok(BodyFilter { cylinders, lo, hi })
    }

    pub fn classify(&self, p: &Point) -> Option<BodyPart> {
        let v = p.position();
        if v.iter().zip(self.lo.iter()).any(|(a, b)| a < b)
            || v.iter().zip(self.hi.iter()).any(|(a, b)| a > b)
        {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.cylinders.iter().enumerate() {
            if let Some(d) = c.contains(&v) {
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
        }
        best.map(|(i, _)| BodyPart::ALL[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedFrame {
    pub slot_index: u64,
    /// Indexed by [`BodyPart::index`].
    pub body_parts: Vec<PointCloud>,
    pub static_scene: PointCloud,
}

impl SegmentedFrame {
    pub fn empty(slot_index: u64) -> Self {
        SegmentedFrame {
            slot_index,
            body_parts: vec![PointCloud::new(ReferenceFrame::World); PART_COUNT],
            static_scene: PointCloud::new(ReferenceFrame::World),
        }
    }

    pub fn part(&self, part: BodyPart) -> &PointCloud {
        &self.body_parts[part.index()]
    }

    pub fn body_point_count(&self) -> usize {
        self.body_parts.iter().map(PointCloud::len).sum()
    }

    pub fn total_point_count(&self) -> usize {
        self.body_point_count() + self.static_scene.len()
    }

    pub fn group_counts(&self) -> BTreeMap<BodyGroup, usize> {
        let mut out: BTreeMap<BodyGroup, usize> = BodyGroup::ALL.iter().map(|&g| (g, 0)).collect();
        for part in BodyPart::ALL {
            *out.get_mut(&part.group()).unwrap() += self.part(part).len();
        }
        out
    }

    /// All body points merged into one cloud.
    pub fn body(&self) -> PointCloud {
        let mut out = PointCloud::new(ReferenceFrame::World);
        for p in &self.body_parts {
            out.extend_from(p);
        }
        out
    }
}

const PARALLEL_THRESHOLD: usize = 16_384;

/// Labels every point of `cloud` with a body part or the static scene.
pub fn segment(
    cloud: &PointCloud,
    skel: &Skeleton,
    specs: &[CylinderSpec],
    slot_index: u64,
) -> Result<SegmentedFrame, SegmentationError> {
    let filter = BodyFilter::new(skel, specs)?;
    let labels: Vec<Option<BodyPart>> = if cloud.len() >= PARALLEL_THRESHOLD {
        cloud.points.par_iter().map(|p| filter.classify(p)).collect()
    } else {
        cloud.points.iter().map(|p| filter.classify(p)).collect()
    };
    let mut out = SegmentedFrame::empty(slot_index);
    out.static_scene.points.reserve(cloud.len());
    for (p, label) in cloud.points.iter().zip(labels) {
        match label {
            Some(part) => out.body_parts[part.index()].points.push(*p),
            None => out.static_scene.points.push(*p),
        }
    }
    Ok(out)
}

/// Seed for decimating one part of one slot.
pub fn part_seed(seed: u64, slot: u64, part: BodyPart) -> u64 {
    // splitmix-style mixing keeps nearby (slot, part) pairs uncorrelated
    let mut z = seed
        ^ slot.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (part.index() as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform random priority order of `n` points. Any prefix is a uniform
/// random subset, and shorter prefixes are nested in longer ones.
pub fn decimation_order(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

pub fn kept_count(n: usize, kept_ratio: f64) -> usize {
    ((n as f64 * kept_ratio).round() as usize).min(n)
}

/// Keeps `round(n · kept_ratio)` uniformly chosen points, in input order.
pub fn decimate_part(cloud: &PointCloud, kept_ratio: f64, seed: u64) -> PointCloud {
    assert!(
        kept_ratio > 0.0 && kept_ratio <= 1.0,
        "kept ratio {kept_ratio} outside (0, 1]"
    );
    if kept_ratio >= 1.0 {
        return cloud.clone();
    }
    let k = kept_count(cloud.len(), kept_ratio);
    let mut keep = decimation_order(cloud.len(), seed);
    keep.truncate(k);
    keep.sort_unstable();
    PointCloud::from_points(keep.into_iter().map(|i| cloud.points[i]).collect(), cloud.frame)
}

/// Keeps the first point that falls in each occupied voxel of side `voxel`.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    assert!(voxel > 0.0);
    let mut seen = std::collections::HashSet::new();
    let points = cloud
        .points
        .iter()
        .filter(|p| {
            let key = (
                (p.x / voxel).floor() as i64,
                (p.y / voxel).floor() as i64,
                (p.z / voxel).floor() as i64,
            );
            seen.insert(key)
        })
        .copied()
        .collect();
    PointCloud::from_points(points, cloud.frame)
}

/// Kept ratio per body part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecimationProfile {
    pub name: String,
    ratios: [f64; PART_COUNT],
}

impl DecimationProfile {
    /// One ratio per group, applied uniformly to the group's parts.
    pub fn from_groups(name: &str, head: f64, chest: f64, arm: f64, leg: f64) -> Result<Self, SegmentationError> {
        let mut ratios = [1.0; PART_COUNT];
        for part in BodyPart::ALL {
            ratios[part.index()] = match part.group() {
                BodyGroup::Head => head,
                BodyGroup::Chest => chest,
                BodyGroup::Arm => arm,
                BodyGroup::Leg => leg,
            };
        }
        Self::from_parts(name, ratios)
    }

    pub fn from_parts(name: &str, ratios: [f64; PART_COUNT]) -> Result<Self, SegmentationError> {
        for part in BodyPart::ALL {
            let ratio = ratios[part.index()];
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(SegmentationError::Ratio { part, ratio });
            }
        }
        Ok(DecimationProfile {
            name: name.to_string(),
            ratios,
        })
    }

    pub fn full() -> Self {
        Self::preset("base").unwrap()
    }

    pub fn ratio(&self, part: BodyPart) -> f64 {
        self.ratios[part.index()]
    }

    pub fn ratios(&self) -> &[f64; PART_COUNT] {
        &self.ratios
    }

    /// The kept-ratio combinations benchmarked for body-part decimation:
    /// `base`, `1`, `2`, `3`, `4a`, `4b`, `5` (circled digits accepted).
    pub fn preset(name: &str) -> Result<Self, SegmentationError> {
        let key = match name.trim() {
            "①" | "p1" => "1",
            "②" | "p2" => "2",
            "③" | "p3" => "3",
            "④" | "④a" | "④(a)" | "p4" | "p4a" | "4" | "4(a)" => "4a",
            "④b" | "④(b)" | "p4b" | "4(b)" => "4b",
            "⑤" | "p5" => "5",
            other => other,
        };
        let (h, c, a, l) = match key {
            "base" => (100, 100, 100, 100),
            "1" => (100, 60, 25, 80),
            "2" => (80, 55, 5, 60),
            "3" => (80, 40, 5, 40),
            "4a" => (70, 20, 70, 25),
            "4b" => (44, 44, 44, 44),
            "5" => (50, 25, 15, 25),
            _ => return Err(SegmentationError::UnknownPreset(name.to_string())),
        };
        let pct = |v: i32| v as f64 / 100.0;
        Self::from_groups(key, pct(h), pct(c), pct(a), pct(l))
    }

    pub const PRESET_NAMES: [&'static str; 7] = ["base", "1", "2", "3", "4a", "4b", "5"];

    /// Fraction of points kept on a body whose per-part counts are given.
    pub fn weighted_kept_ratio(&self, part_counts: &[usize; PART_COUNT]) -> f64 {
        let total: usize = part_counts.iter().sum();
        if total == 0 {
            return 1.0;
        }
        let kept: f64 = BodyPart::ALL
            .iter()
            .map(|p| part_counts[p.index()] as f64 * self.ratio(*p))
            .sum();
        kept / total as f64
    }
}

impl FromStr for DecimationProfile {
    type Err = SegmentationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DecimationProfile::preset(s)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetEntry {
    head: Option<f64>,
    chest: Option<f64>,
    arm: Option<f64>,
    leg: Option<f64>,
    #[serde(default)]
    parts: BTreeMap<BodyPart, f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetFile {
    presets: BTreeMap<String, PresetEntry>,
}

/// Parses a preset table:
///
/// ```toml
/// [presets.mine]
/// head = 0.9
/// chest = 0.5
/// arm = 0.2
/// leg = 0.5
/// [presets.mine.parts]
/// left_hand = 0.1   # optional per-part override
/// ```
pub fn parse_presets(text: &str) -> Result<BTreeMap<String, DecimationProfile>, SegmentationError> {
    let file: PresetFile =
        toml::from_str(text).map_err(|e| SegmentationError::PresetFile(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, entry) in file.presets {
        let mut profile = DecimationProfile::from_groups(
            &name,
            entry.head.unwrap_or(1.0),
            entry.chest.unwrap_or(1.0),
            entry.arm.unwrap_or(1.0),
            entry.leg.unwrap_or(1.0),
        )?;
        for (part, ratio) in entry.parts {
            profile.ratios[part.index()] = ratio;
        }
        let profile = DecimationProfile::from_parts(&name, profile.ratios)?;
        out.insert(name, profile);
    }
    Ok(out)
}

pub fn load_presets(path: &Path) -> Result<BTreeMap<String, DecimationProfile>, SegmentationError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SegmentationError::PresetFile(format!("{}: {e}", path.display())))?;
    parse_presets(&text)
}

/// Applies a profile to every part of a frame; the static scene is untouched.
pub fn decimate_frame(frame: &SegmentedFrame, profile: &DecimationProfile, seed: u64) -> SegmentedFrame {
    let body_parts = BodyPart::ALL
        .iter()
        .map(|&part| {
            decimate_part(
                frame.part(part),
                profile.ratio(part),
                part_seed(seed, frame.slot_index, part),
            )
        })
        .collect();
    SegmentedFrame {
        slot_index: frame.slot_index,
        body_parts,
        static_scene: frame.static_scene.clone(),
    }
}

/// Dynamic-chunk bitrate in bits: every kept body point of every frame at
/// the wire cost of one point.
pub fn dynamic_bitrate<'a>(frames: impl IntoIterator<Item = &'a SegmentedFrame>) -> u64 {
    frames
        .into_iter()
        .map(|f| f.body_point_count() as u64 * BITS_PER_POINT)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::skeleton::{JointSample, JOINT_COUNT};
    use proptest::prelude::*;

    fn line_skeleton() -> Skeleton {
        // joints spread along z so every axis is non-degenerate
        let joints = (0..JOINT_COUNT)
            .map(|i| JointSample {
                position: Vector3::new(0.0, (i % 3) as f64 * 0.01, i as f64 * 0.1),
                confidence: 1.0,
            })
            .collect();
        Skeleton::new(joints).unwrap()
    }

    fn cloud(n: usize) -> PointCloud {
        (0..n)
            .map(|i| Point::new(i as f64, 0.0, 0.0, [(i % 256) as u8, 0, 0]))
            .collect()
    }

    #[test]
    fn group_mapping_covers_every_part_once() {
        let counts: Vec<usize> = BodyGroup::ALL.iter().map(|g| g.parts().count()).collect();
        assert_eq!(counts, vec![2, 3, 6, 4]);
        assert_eq!(default_cylinders().len(), PART_COUNT);
    }

    #[test]
    fn empty_cloud_segments_to_empty_frame() {
        let frame = segment(&PointCloud::default(), &line_skeleton(), &default_cylinders(), 3).unwrap();
        assert_eq!(frame, SegmentedFrame::empty(3));
    }

    #[test]
    fn point_on_axis_midpoint_belongs_to_part() {
        let skel = line_skeleton();
        for part in BodyPart::ALL {
            let (a, b) = part.axis();
            let mid = (skel.position(a) + skel.position(b)) / 2.0;
            let filter = BodyFilter::new(&skel, &default_cylinders()).unwrap();
            // parts sharing an axis direction can overlap; the midpoint is at
            // distance zero from its own bone, so only an exactly coincident
            // bone could win the tie
            let got = filter.classify(&Point::from_vector(&mid, [0; 3])).unwrap();
            let (ga, gb) = got.axis();
            let on_bone = {
                let s = skel.position(ga);
                let e = skel.position(gb);
                let t = ((mid - s).dot(&(e - s)) / (e - s).norm_squared()).clamp(0.0, 1.0);
                (s + (e - s) * t - mid).norm()
            };
            assert!(got == part || on_bone < 1e-12, "{part} went to {got}");
        }
    }

    #[test]
    fn missing_or_bad_specs_are_rejected() {
        let mut specs = default_cylinders();
        specs.pop();
        assert!(matches!(
            segment(&cloud(3), &line_skeleton(), &specs, 0),
            Err(SegmentationError::Coverage(BodyPart::RightLowerLeg))
        ));
        let mut specs = default_cylinders();
        specs[2].radius = 0.0;
        assert!(BodyFilter::new(&line_skeleton(), &specs).is_err());
    }

    #[test]
    fn decimation_counts_and_membership() {
        let c = cloud(1000);
        assert_eq!(decimate_part(&c, 1.0, 7), c);
        let half = decimate_part(&c, 0.5, 7);
        assert_eq!(half.len(), 500);
        assert!(half.points.iter().all(|p| c.points.contains(p)));
        assert_eq!(decimate_part(&c, 0.5, 7), half);
        assert_ne!(decimate_part(&c, 0.5, 8), half);
    }

    #[test]
    fn preset_five_keeps_weighted_sum() {
        let mut frame = SegmentedFrame::empty(0);
        let mut counts = [0usize; PART_COUNT];
        for part in BodyPart::ALL {
            let n = 100 + 37 * part.index();
            counts[part.index()] = n;
            frame.body_parts[part.index()] = cloud(n);
        }
        let p5 = DecimationProfile::preset("⑤").unwrap();
        let out = decimate_frame(&frame, &p5, 1);
        let expected: f64 = BodyPart::ALL
            .iter()
            .map(|p| counts[p.index()] as f64 * p5.ratio(*p))
            .sum();
        let got = out.body_point_count() as f64;
        // each part rounds independently
        assert!((got - expected).abs() <= PART_COUNT as f64 * 0.5, "{got} vs {expected}");
        assert_eq!(p5.ratio(BodyPart::LeftHand), 0.15);
        assert_eq!(p5.ratio(BodyPart::Neck), 0.5);
    }

    #[test]
    fn bitrate_is_points_times_wire_cost() {
        let mut frame = SegmentedFrame::empty(0);
        frame.body_parts[BodyPart::Chest.index()] = cloud(100);
        assert_eq!(dynamic_bitrate([&frame]), 12_000);
        let frames = vec![frame; 24];
        assert_eq!(dynamic_bitrate(&frames), 24 * 12_000);
    }

    #[test]
    fn preset_table_parses() {
        let text = "[presets.mine]\nhead = 0.9\narm = 0.2\n[presets.mine.parts]\nleft_hand = 0.1\n";
        let presets = parse_presets(text).unwrap();
        let mine = &presets["mine"];
        assert_eq!(mine.ratio(BodyPart::Head), 0.9);
        assert_eq!(mine.ratio(BodyPart::Chest), 1.0);
        assert_eq!(mine.ratio(BodyPart::RightHand), 0.2);
        assert_eq!(mine.ratio(BodyPart::LeftHand), 0.1);
        assert!(parse_presets("[presets.x]\nhead = 0.0\n").is_err());
        assert!(parse_presets("[presets.x]\nelbow = 0.5\n").is_err());
        assert!(DecimationProfile::preset("7").is_err());
    }

    #[test]
    fn voxel_downsample_keeps_one_per_voxel() {
        let c: PointCloud = (0..100)
            .map(|i| Point::new(i as f64 * 0.01, 0.0, 0.0, [0; 3]))
            .collect();
        assert_eq!(voxel_downsample(&c, 0.1).len(), 10);
    }

    proptest! {
        #[test]
        fn decimation_is_monotone_and_nested(n in 0usize..400, r1 in 0.01f64..1.0, r2 in 0.01f64..1.0, seed: u64) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let c = cloud(n);
            let a = decimate_part(&c, lo, seed);
            let b = decimate_part(&c, hi, seed);
            prop_assert!(a.len() <= b.len());
            prop_assert_eq!(a.len(), kept_count(n, lo));
            prop_assert!(a.points.iter().all(|p| b.points.contains(p)));
        }

        #[test]
        fn segmentation_partitions_input(
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.0f64..3.5), 0..300)
        ) {
            let c: PointCloud = pts.iter().map(|&(x, y, z)| Point::new(x * 0.3, y * 0.3, z, [1, 2, 3])).collect();
            let skel = line_skeleton();
            let f = segment(&c, &skel, &default_cylinders(), 0).unwrap();
            prop_assert_eq!(f.total_point_count(), c.len());
            let mut all = f.static_scene.clone();
            for p in &f.body_parts { all.extend_from(p); }
            prop_assert!(all.same_points(&c));
            prop_assert_eq!(segment(&c, &skel, &default_cylinders(), 0).unwrap(), f);
        }
    }
}
