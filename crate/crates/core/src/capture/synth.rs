//! Scripted synthetic scenes: a static background, an articulated humanoid
//! and a ring of virtual depth cameras.
//!
//! Scene script schema (TOML):
//!
//! ```toml
//! seed = 7
//! fps = 24
//! duration_s = 10.0
//!
//! [noise]
//! sensor_m = 0.0            # Gaussian position noise per camera and frame
//!
//! [[background]]
//! kind = "box"              # surface of an axis-aligned box; "ply" loads a file
//! min = [-2.5, -2.5, 0.0]
//! max = [2.5, 2.5, 2.6]
//! points = 60000
//! color = [150, 140, 120]
//! color_jitter = 20
//! motion = [{ t = 4.0, offset = [0, 0, 0] }, { t = 5.0, offset = [0.5, 0, 0] }]
//!
//! [[cameras]]
//! id = 0
//! position = [2.0, 0.0, 1.5]
//! look_at = [0.0, 0.0, 1.0]
//! fov_deg = 90.0
//! range_m = 8.0
//! drop_rate = 0.0
//!
//! [body]
//! enabled = true
//! points = 20000
//! swing_deg = 20.0
//! swing_hz = 0.8
//! keyframes = [{ t = 0.0, position = [0, 0, 0], heading_deg = 0.0 }]
//! skeleton_noise_m = 0.0
//! joint_confidence = 1.0
//! ```

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::skeleton::{Joint, Skeleton, JOINT_COUNT};
use super::{CameraId, CaptureError, TaggedFrame};
use crate::geometry::ply::read_ply_file;
use crate::geometry::{Point, PointCloud, ReferenceFrame, RigidTransform};
use crate::segmentation::{BodyGroup, BodyPart, PART_COUNT};

/// Share of body points per report group (head, chest, arm, leg).
pub const DEFAULT_GROUP_SHARES: [f64; 4] = [0.2703, 0.2775, 0.1896, 0.2635];

fn default_fps() -> u32 {
    24
}
fn default_duration() -> f64 {
    10.0
}
fn default_true() -> bool {
    true
}
fn default_fov() -> f64 {
    90.0
}
fn default_range() -> f64 {
    10.0
}
fn default_grey() -> [u8; 3] {
    [160, 160, 160]
}
fn default_body_points() -> usize {
    20_000
}
fn default_shares() -> [f64; 4] {
    DEFAULT_GROUP_SHARES
}
fn default_swing() -> f64 {
    20.0
}
fn default_swing_hz() -> f64 {
    0.8
}
fn default_confidence() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneScript {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fps")]
    pub fps: u32,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub background: Vec<BackgroundSpec>,
    pub cameras: Vec<CameraSpec>,
    #[serde(default)]
    pub body: BodySpec,
    /// Directory relative `ply` backgrounds are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub sensor_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Box,
    Ply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub kind: BackgroundKind,
    #[serde(default)]
    pub min: Option<[f64; 3]>,
    #[serde(default)]
    pub max: Option<[f64; 3]>,
    #[serde(default)]
    pub points: usize,
    #[serde(default = "default_grey")]
    pub color: [u8; 3],
    #[serde(default)]
    pub color_jitter: u8,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Piecewise-linear offset keyframes; the object is static without them.
    #[serde(default)]
    pub motion: Vec<OffsetKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetKey {
    pub t: f64,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub id: CameraId,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    #[serde(default = "default_range")]
    pub range_m: f64,
    /// Probability of losing a frame; consumed by capture simulations.
    #[serde(default)]
    pub drop_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_body_points")]
    pub points: usize,
    #[serde(default = "default_shares")]
    pub group_shares: [f64; 4],
    #[serde(default = "default_swing")]
    pub swing_deg: f64,
    #[serde(default = "default_swing_hz")]
    pub swing_hz: f64,
    #[serde(default)]
    pub keyframes: Vec<BodyKey>,
    #[serde(default)]
    pub skeleton_noise_m: f64,
    #[serde(default = "default_confidence")]
    pub joint_confidence: f64,
}

impl Default for BodySpec {
    fn default() -> Self {
        BodySpec {
            enabled: true,
            points: default_body_points(),
            group_shares: DEFAULT_GROUP_SHARES,
            swing_deg: default_swing(),
            swing_hz: default_swing_hz(),
            keyframes: Vec::new(),
            skeleton_noise_m: 0.0,
            joint_confidence: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyKey {
    pub t: f64,
    pub position: [f64; 3],
    #[serde(default)]
    pub heading_deg: f64,
}

fn script_error(field: impl Into<String>, message: impl Into<String>) -> CaptureError {
    CaptureError::Script {
        field: field.into(),
        line: None,
        message: message.into(),
    }
}

/// Best-effort name of the key or table on a given line.
fn field_on_line(text: &str, line: usize) -> String {
    let raw = text.lines().nth(line.saturating_sub(1)).unwrap_or("").trim();
    if let Some(header) = raw.strip_prefix('[') {
        return header.trim_matches(|c| c == '[' || c == ']').trim().to_string();
    }
    raw.split('=').next().unwrap_or("").trim().to_string()
}

impl SceneScript {
    pub fn parse(text: &str) -> Result<Self, CaptureError> {
        let script: SceneScript = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let message = e.message().to_string();
            let field = extract_backticked(&message)
                .or_else(|| line.map(|l| field_on_line(text, l)))
                .unwrap_or_default();
            CaptureError::Script {
                field,
                line,
                message,
            }
        })?;
        script.validate()?;
        Ok(script)
    }

    pub fn from_file(path: &Path) -> Result<Self, CaptureError> {
        let text = std::fs::read_to_string(path).map_err(|source| CaptureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut script = Self::parse(&text)?;
        script.base_dir = path.parent().map(Path::to_path_buf);
        Ok(script)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scene script serializes")
    }

    pub fn validate(&self) -> Result<(), CaptureError> {
        if self.fps == 0 {
            return Err(script_error("fps", "must be positive"));
        }
        if !(self.duration_s >= 0.0) || !self.duration_s.is_finite() {
            return Err(script_error("duration_s", "must be a finite non-negative number"));
        }
        if !(self.noise.sensor_m >= 0.0) {
            return Err(script_error("noise.sensor_m", "must be non-negative"));
        }
        if self.cameras.is_empty() {
            return Err(script_error("cameras", "at least one camera is required"));
        }
        let mut ids: Vec<CameraId> = self.cameras.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(script_error("cameras.id", "camera ids must be unique"));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            let f = |name: &str| format!("cameras[{i}].{name}");
            let forward = Vector3::from(c.look_at) - Vector3::from(c.position);
            if !(forward.norm() > 1e-9) {
                return Err(script_error(f("look_at"), "must differ from position"));
            }
            if !(c.fov_deg > 0.0 && c.fov_deg < 360.0) {
                return Err(script_error(f("fov_deg"), "must lie in (0, 360)"));
            }
            if !(c.range_m > 0.0) {
                return Err(script_error(f("range_m"), "must be positive"));
            }
            if !(0.0..=1.0).contains(&c.drop_rate) {
                return Err(script_error(f("drop_rate"), "must lie in [0, 1]"));
            }
        }
        for (i, b) in self.background.iter().enumerate() {
            let f = |name: &str| format!("background[{i}].{name}");
            match b.kind {
                BackgroundKind::Box => {
                    let (Some(lo), Some(hi)) = (b.min, b.max) else {
                        return Err(script_error(f("min"), "box needs min and max"));
                    };
                    if lo.iter().zip(hi.iter()).any(|(a, b)| a > b || !a.is_finite() || !b.is_finite()) {
                        return Err(script_error(f("max"), "must be >= min on every axis"));
                    }
                }
                BackgroundKind::Ply => {
                    if b.path.is_none() {
                        return Err(script_error(f("path"), "ply background needs a path"));
                    }
                }
            }
            if b.motion.windows(2).any(|w| !(w[1].t > w[0].t)) {
                return Err(script_error(f("motion"), "keyframe times must increase"));
            }
        }
        let body = &self.body;
        if body.enabled {
            if body.group_shares.iter().any(|s| !(*s > 0.0)) {
                return Err(script_error("body.group_shares", "shares must be positive"));
            }
            if !(0.0..=1.0).contains(&body.joint_confidence) {
                return Err(script_error("body.joint_confidence", "must lie in [0, 1]"));
            }
            if !(body.skeleton_noise_m >= 0.0) {
                return Err(script_error("body.skeleton_noise_m", "must be non-negative"));
            }
            if body.keyframes.windows(2).any(|w| !(w[1].t > w[0].t)) {
                return Err(script_error("body.keyframes", "keyframe times must increase"));
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> u64 {
        (self.duration_s * self.fps as f64).round() as u64
    }

    /// Capture timestamp of frame `seq` in microseconds.
    pub fn timestamp_of(&self, seq: u64) -> i64 {
        let fps = self.fps as i128;
        ((seq as i128 * 1_000_000 + fps - 1) / fps) as i64
    }
}

fn extract_backticked(message: &str) -> Option<String> {
    let start = message.find('`')?;
    let rest = &message[start + 1..];
    let end = rest.find('`')?;
    Some(rest[..end].to_string())
}

fn lerp_keys<T: Copy>(keys: &[(f64, T)], t: f64, mix: impl Fn(T, T, f64) -> T, default: T) -> T {
    match keys {
        [] => default,
        [(_, v)] => *v,
        _ => {
            if t <= keys[0].0 {
                return keys[0].1;
            }
            for w in keys.windows(2) {
                let (t0, a) = w[0];
                let (t1, b) = w[1];
                if t <= t1 {
                    return mix(a, b, (t - t0) / (t1 - t0));
                }
            }
            keys[keys.len() - 1].1
        }
    }
}

fn mix3(a: Vector3<f64>, b: Vector3<f64>, s: f64) -> Vector3<f64> {
    a + (b - a) * s
}

/// Camera pose looking from `position` at `look_at`; camera axes are
/// x right, y down, z forward.
pub fn camera_pose(position: [f64; 3], look_at: [f64; 3]) -> RigidTransform {
    let c = Vector3::from(position);
    let f = (Vector3::from(look_at) - c).normalize();
    let up = if f.z.abs() > 0.999 { Vector3::y() } else { Vector3::z() };
    let r = f.cross(&up).normalize();
    let d = f.cross(&r);
    RigidTransform::new(Matrix3::from_columns(&[r, d, f]), c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Limb {
    Trunk,
    ArmLeft,
    ArmRight,
    LegLeft,
    LegRight,
}

fn joint_limb(j: Joint) -> Limb {
    match j.index() {
        5..=10 => Limb::ArmLeft,
        12..=17 => Limb::ArmRight,
        18..=21 => Limb::LegLeft,
        22..=25 => Limb::LegRight,
        _ => Limb::Trunk,
    }
}

fn part_limb(p: BodyPart) -> Limb {
    use BodyPart::*;
    match p {
        LeftUpperArm | LeftLowerArm | LeftHand => Limb::ArmLeft,
        RightUpperArm | RightLowerArm | RightHand => Limb::ArmRight,
        LeftUpperLeg | LeftLowerLeg => Limb::LegLeft,
        RightUpperLeg | RightLowerLeg => Limb::LegRight,
        _ => Limb::Trunk,
    }
}

/// Rest pose in body coordinates: facing +x, left is +y, z up, feet on z = 0.
fn rest_joints() -> [Vector3<f64>; JOINT_COUNT] {
    let v = Vector3::new;
    let mut j = [Vector3::zeros(); JOINT_COUNT];
    let a = 25f64.to_radians();
    for (side, sign) in [(0usize, 1.0), (1, -1.0)] {
        let dir = v(0.0, sign * a.sin(), -a.cos());
        let (clav, sh, el, wr, ha, tip, th) = if side == 0 {
            (4, 5, 6, 7, 8, 9, 10)
        } else {
            (11, 12, 13, 14, 15, 16, 17)
        };
        j[clav] = v(0.0, sign * 0.06, 1.47);
        j[sh] = v(0.0, sign * 0.24, 1.44);
        j[el] = j[sh] + dir * 0.28;
        j[wr] = j[el] + dir * 0.25;
        j[ha] = j[wr] + dir * 0.06;
        j[tip] = j[wr] + dir * 0.17;
        j[th] = j[wr] + dir * 0.05 + v(0.04, 0.0, 0.0);
        let (hip, knee, ankle, foot) = if side == 0 { (18, 19, 20, 21) } else { (22, 23, 24, 25) };
        j[hip] = v(0.0, sign * 0.10, 0.90);
        j[knee] = v(0.0, sign * 0.11, 0.50);
        j[ankle] = v(0.0, sign * 0.12, 0.09);
        j[foot] = v(0.14, sign * 0.12, 0.03);
        let (eye, ear) = if side == 0 { (28, 29) } else { (30, 31) };
        j[eye] = v(0.08, sign * 0.03, 1.71);
        j[ear] = v(0.0, sign * 0.085, 1.69);
    }
    j[0] = v(0.0, 0.0, 0.98);
    j[1] = v(0.0, 0.0, 1.16);
    j[2] = v(0.0, 0.0, 1.40);
    j[3] = v(0.0, 0.0, 1.55);
    j[26] = v(0.0, 0.0, 1.72);
    j[27] = v(0.10, 0.0, 1.68);
    j
}

#[derive(Debug, Clone, Copy)]
enum Shell {
    /// Open cylinder around `anchor + u·t`, t in [t0, t1].
    Tube {
        anchor: Vector3<f64>,
        u: Vector3<f64>,
        t0: f64,
        t1: f64,
        r: f64,
    },
    /// Annulus centred on `anchor + u·t` with normal u.
    Disk {
        anchor: Vector3<f64>,
        u: Vector3<f64>,
        t: f64,
        r0: f64,
        r1: f64,
    },
}

fn perpendiculars(u: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if u.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let e1 = u.cross(&helper).normalize();
    let e2 = u.cross(&e1);
    (e1, e2)
}

impl Shell {
    fn area(&self) -> f64 {
        match *self {
            Shell::Tube { t0, t1, r, .. } => 2.0 * PI * r * (t1 - t0),
            Shell::Disk { r0, r1, .. } => PI * (r1 * r1 - r0 * r0),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        let theta = rng.random::<f64>() * 2.0 * PI;
        match *self {
            Shell::Tube { anchor, u, t0, t1, r } => {
                let (e1, e2) = perpendiculars(&u);
                let t = t0 + (t1 - t0) * rng.random::<f64>();
                anchor + u * t + (e1 * theta.cos() + e2 * theta.sin()) * r
            }
            Shell::Disk { anchor, u, t, r0, r1 } => {
                let (e1, e2) = perpendiculars(&u);
                let rr = (r0 * r0 + (r1 * r1 - r0 * r0) * rng.random::<f64>()).sqrt();
                anchor + u * t + (e1 * theta.cos() + e2 * theta.sin()) * rr
            }
        }
    }

    fn solid_contains(&self, p: &Vector3<f64>) -> bool {
        match *self {
            Shell::Tube { anchor, u, t0, t1, r } => {
                let v = p - anchor;
                let t = v.dot(&u);
                let radial_sq = v.norm_squared() - t * t;
                t > t0 && t < t1 && radial_sq < r * r * (1.0 - 1e-9)
            }
            Shell::Disk { .. } => false,
        }
    }
}

fn part_shells(part: BodyPart, j: &[Vector3<f64>; JOINT_COUNT]) -> Vec<Shell> {
    use BodyPart::*;
    let (ja, jb) = part.axis();
    let a = j[ja.index()];
    let b = j[jb.index()];
    let len = (b - a).norm();
    let u = (b - a) / len;
    let tube = |t0: f64, t1: f64, r: f64| Shell::Tube { anchor: a, u, t0, t1, r };
    let disk = |t: f64, r0: f64, r1: f64| Shell::Disk { anchor: a, u, t, r0, r1 };
    match part {
        Head => vec![tube(0.02, len + 0.04, 0.09), disk(len + 0.04, 0.0, 0.09), disk(0.02, 0.055, 0.09)],
        Neck => vec![tube(0.005, len - 0.005, 0.055)],
        Chest => vec![tube(0.0, len, 0.13), disk(len - 0.01, 0.055, 0.13)],
        Abdomen => vec![tube(0.0, len, 0.13)],
        Pelvis => {
            // a horizontal bar through both hips
            let bar = Shell::Tube { anchor: a, u, t0: -0.04, t1: len + 0.04, r: 0.07 };
            vec![bar]
        }
        LeftUpperArm | RightUpperArm => vec![tube(-0.02, len, 0.045)],
        LeftLowerArm | RightLowerArm => vec![tube(0.0, len, 0.04)],
        LeftHand | RightHand => vec![tube(0.0, len, 0.035), disk(len, 0.0, 0.035)],
        LeftUpperLeg | RightUpperLeg => vec![tube(0.0, len, 0.075)],
        LeftLowerLeg | RightLowerLeg => vec![tube(0.0, len, 0.06), disk(len, 0.0, 0.06)],
    }
}

/// Share of a group's points assigned to each of its parts.
fn intra_group_weight(part: BodyPart) -> f64 {
    use BodyPart::*;
    match part {
        Head => 0.78,
        Neck => 0.22,
        Chest => 0.42,
        Abdomen => 0.33,
        Pelvis => 0.25,
        LeftUpperArm | RightUpperArm => 0.21,
        LeftLowerArm | RightLowerArm => 0.18,
        LeftHand | RightHand => 0.11,
        LeftUpperLeg | RightUpperLeg => 0.275,
        LeftLowerLeg | RightLowerLeg => 0.225,
    }
}

fn part_color(part: BodyPart) -> [u8; 3] {
    match part.group() {
        BodyGroup::Head => [224, 180, 150],
        BodyGroup::Chest => [40, 90, 170],
        BodyGroup::Arm => [210, 170, 140],
        BodyGroup::Leg => [50, 50, 60],
    }
}

/// Per-part point target for a body of `total` points.
pub fn part_targets(total: usize, shares: &[f64; 4]) -> [usize; PART_COUNT] {
    let sum: f64 = shares.iter().sum();
    let mut out = [0usize; PART_COUNT];
    for part in BodyPart::ALL {
        let g = BodyGroup::ALL.iter().position(|g| *g == part.group()).unwrap();
        out[part.index()] = (total as f64 * shares[g] / sum * intra_group_weight(part)).round() as usize;
    }
    out
}

#[derive(Debug, Clone)]
struct BodyModel {
    rest: [Vector3<f64>; JOINT_COUNT],
    /// Rest-pose points with their part and colour.
    points: Vec<(Vector3<f64>, BodyPart, [u8; 3])>,
}

impl BodyModel {
    fn build(spec: &BodySpec, seed: u64) -> Self {
        let rest = rest_joints();
        let shells: Vec<Vec<Shell>> = BodyPart::ALL.iter().map(|&p| part_shells(p, &rest)).collect();
        let targets = part_targets(spec.points, &spec.group_shares);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0D7_5EED);
        let mut points = Vec::with_capacity(spec.points);
        for part in BodyPart::ALL {
            let own = &shells[part.index()];
            let areas: Vec<f64> = own.iter().map(Shell::area).collect();
            let total_area: f64 = areas.iter().sum();
            let color = part_color(part);
            let mut kept = 0;
            let mut attempts = 0usize;
            while kept < targets[part.index()] && attempts < 1000 * (targets[part.index()] + 1) {
                attempts += 1;
                let mut pick = rng.random::<f64>() * total_area;
                let mut shell = &own[own.len() - 1];
                for (s, a) in own.iter().zip(&areas) {
                    if pick < *a {
                        shell = s;
                        break;
                    }
                    pick -= a;
                }
                let p = shell.sample(&mut rng);
                let hidden = BodyPart::ALL
                    .iter()
                    .filter(|&&o| o != part)
                    .any(|o| shells[o.index()].iter().any(|s| s.solid_contains(&p)));
                if !hidden {
                    let shade = rng.random_range(0..24u8);
                    points.push((p, part, [color[0].saturating_sub(shade), color[1].saturating_sub(shade), color[2].saturating_sub(shade)]));
                    kept += 1;
                }
            }
        }
        BodyModel { rest, points }
    }
}

/// Body root pose and limb swing at one instant.
#[derive(Debug, Clone, Copy)]
struct BodyPose {
    root: RigidTransform,
    swing: [Rotation3<f64>; 5],
}

impl BodyPose {
    fn limb_local(&self, rest: &[Vector3<f64>; JOINT_COUNT], limb: Limb, p: &Vector3<f64>) -> Vector3<f64> {
        let pivot = match limb {
            Limb::Trunk => return *p,
            Limb::ArmLeft => rest[Joint::ShoulderLeft.index()],
            Limb::ArmRight => rest[Joint::ShoulderRight.index()],
            Limb::LegLeft => rest[Joint::HipLeft.index()],
            Limb::LegRight => rest[Joint::HipRight.index()],
        };
        pivot + self.swing[limb as usize] * (p - pivot)
    }

    fn world(&self, rest: &[Vector3<f64>; JOINT_COUNT], limb: Limb, p: &Vector3<f64>) -> Vector3<f64> {
        self.root.apply(&self.limb_local(rest, limb, p))
    }
}

#[derive(Debug, Clone)]
struct BackgroundObject {
    points: Vec<Point>,
    motion: Vec<(f64, Vector3<f64>)>,
}

/// Ground truth retained alongside each synthetic frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub timestamp_us: i64,
    /// Pose of each camera in the world, ordered like the script.
    pub world_from_camera: Vec<(CameraId, RigidTransform)>,
    /// World-frame skeleton without tracking noise.
    pub skeleton: Option<Skeleton>,
    /// Every scene point in world coordinates: background first, then body.
    pub world_points: PointCloud,
    /// Body part of each world point, `None` for background.
    pub labels: Vec<Option<BodyPart>>,
    /// Indices into `world_points` seen by each camera, in cloud order.
    pub visible: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn camera_transform(&self, id: CameraId) -> Option<&RigidTransform> {
        self.world_from_camera.iter().find(|(c, _)| *c == id).map(|(_, t)| t)
    }

    /// Transform taking camera `from` coordinates into camera `to` coordinates.
    pub fn relative(&self, from: CameraId, to: CameraId) -> Option<RigidTransform> {
        let a = self.camera_transform(from)?;
        let b = self.camera_transform(to)?;
        Some(b.inverse().compose(a))
    }

    pub fn background_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }
}

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub frames: Vec<TaggedFrame>,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone)]
struct Camera {
    id: CameraId,
    world_from_camera: RigidTransform,
    camera_from_world: RigidTransform,
    cos_half_fov: f64,
    range: f64,
}

/// Pre-sampled scene that renders deterministic frames at any timestamp.
#[derive(Debug, Clone)]
pub struct SceneSynthesizer {
    script: SceneScript,
    background: Vec<BackgroundObject>,
    body: Option<BodyModel>,
    cameras: Vec<Camera>,
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_box_surface(lo: Vector3<f64>, hi: Vector3<f64>, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let e = hi - lo;
    let faces = [e.y * e.z, e.y * e.z, e.x * e.z, e.x * e.z, e.x * e.y, e.x * e.y];
    let total: f64 = faces.iter().sum();
    let mut p = Vector3::new(
        lo.x + e.x * rng.random::<f64>(),
        lo.y + e.y * rng.random::<f64>(),
        lo.z + e.z * rng.random::<f64>(),
    );
    if total <= 0.0 {
        return p;
    }
    let mut pick = rng.random::<f64>() * total;
    let mut face = 5;
    for (i, a) in faces.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let axis = face / 2;
    p[axis] = if face % 2 == 0 { lo[axis] } else { hi[axis] };
    p
}

impl SceneSynthesizer {
    pub fn new(script: SceneScript) -> Result<Self, CaptureError> {
        script.validate()?;
        let mut background = Vec::new();
        for (i, spec) in script.background.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(script.seed, 0xBAC6, i as u64));
            let points = match spec.kind {
                BackgroundKind::Box => {
                    let lo = Vector3::from(spec.min.unwrap());
                    let hi = Vector3::from(spec.max.unwrap());
                    (0..spec.points)
                        .map(|_| {
                            let p = sample_box_surface(lo, hi, &mut rng);
                            let j = spec.color_jitter;
                            let c = spec.color.map(|c| {
                                if j == 0 {
                                    c
                                } else {
                                    let d = rng.random_range(0..=2 * j as i16) - j as i16;
                                    (c as i16 + d).clamp(0, 255) as u8
                                }
                            });
                            Point::from_vector(&p, c)
                        })
                        .collect()
                }
                BackgroundKind::Ply => {
                    let rel = spec.path.as_ref().unwrap();
                    let path = match &script.base_dir {
                        Some(dir) if rel.is_relative() => dir.join(rel),
                        _ => rel.clone(),
                    };
                    read_ply_file(&path)
                        .map_err(|e| script_error(format!("background[{i}].path"), e.to_string()))?
                        .points
                }
            };
            background.push(BackgroundObject {
                points,
                motion: spec.motion.iter().map(|k| (k.t, Vector3::from(k.offset))).collect(),
            });
        }
        let body = script
            .body
            .enabled
            .then(|| BodyModel::build(&script.body, script.seed));
        let cameras = script
            .cameras
            .iter()
            .map(|c| {
                let pose = camera_pose(c.position, c.look_at);
                Camera {
                    id: c.id,
                    camera_from_world: pose.inverse(),
                    world_from_camera: pose,
                    cos_half_fov: (c.fov_deg.to_radians() / 2.0).cos(),
                    range: c.range_m,
                }
            })
            .collect();
        Ok(SceneSynthesizer {
            script,
            background,
            body,
            cameras,
        })
    }

    pub fn script(&self) -> &SceneScript {
        &self.script
    }

    pub fn camera_ids(&self) -> Vec<CameraId> {
        self.cameras.iter().map(|c| c.id).collect()
    }

    fn body_pose(&self, t: f64) -> BodyPose {
        let spec = &self.script.body;
        let keys: Vec<(f64, (Vector3<f64>, f64))> = spec
            .keyframes
            .iter()
            .map(|k| (k.t, (Vector3::from(k.position), k.heading_deg.to_radians())))
            .collect();
        let (pos, heading) = lerp_keys(
            &keys,
            t,
            |a, b, s| (mix3(a.0, b.0, s), a.1 + (b.1 - a.1) * s),
            (Vector3::zeros(), 0.0),
        );
        let root = RigidTransform::new(*Rotation3::from_axis_angle(&Vector3::z_axis(), heading).matrix(), pos);
        let phase = (2.0 * PI * spec.swing_hz * t).sin();
        let arm = spec.swing_deg.to_radians() * phase;
        let leg = -0.7 * arm;
        let ry = |a: f64| Rotation3::from_axis_angle(&Vector3::y_axis(), a);
        BodyPose {
            root,
            swing: [ry(0.0), ry(arm), ry(-arm), ry(leg), ry(-leg)],
        }
    }

    /// Ground-truth world skeleton at time `t` seconds.
    pub fn skeleton_at(&self, t: f64) -> Option<Skeleton> {
        let body = self.body.as_ref()?;
        let pose = self.body_pose(t);
        let mut joints = [Vector3::zeros(); JOINT_COUNT];
        for j in Joint::ALL {
            joints[j.index()] = pose.world(&body.rest, joint_limb(j), &body.rest[j.index()]);
        }
        Some(Skeleton::from_positions(&joints, self.script.body.joint_confidence))
    }

    /// Renders every camera's frame at `t_us` and tags them with `seq`.
    pub fn frame_at(&self, t_us: i64, seq: u64) -> SynthFrame {
        let t = t_us as f64 / 1e6;
        let mut world = Vec::new();
        let mut labels = Vec::new();
        for obj in &self.background {
            let offset = lerp_keys(&obj.motion, t, mix3, Vector3::zeros());
            world.extend(obj.points.iter().map(|p| Point::from_vector(&(p.position() + offset), p.rgb())));
            labels.extend(std::iter::repeat_n(None, obj.points.len()));
        }
        let skeleton = self.skeleton_at(t);
        if let Some(body) = &self.body {
            let pose = self.body_pose(t);
            for (p, part, rgb) in &body.points {
                world.push(Point::from_vector(&pose.world(&body.rest, part_limb(*part), p), *rgb));
                labels.push(Some(*part));
            }
        }

        let sensor = self.script.noise.sensor_m;
        let skel_noise = self.script.body.skeleton_noise_m;
        let mut frames = Vec::with_capacity(self.cameras.len());
        let mut visible = Vec::with_capacity(self.cameras.len());
        for cam in &self.cameras {
            let idx: Vec<usize> = world
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    let local = cam.camera_from_world.apply(&p.position());
                    let dist = local.norm();
                    dist <= cam.range && dist > 0.0 && local.z >= cam.cos_half_fov * dist
                })
                .map(|(i, _)| i)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.script.seed, cam.id as u64 + 1, seq));
            let noise = Normal::new(0.0, sensor.max(0.0)).unwrap();
            let points = idx
                .iter()
                .map(|&i| {
                    let mut local = cam.camera_from_world.apply(&world[i].position());
                    if sensor > 0.0 {
                        local += Vector3::from_fn(|_, _| noise.sample(&mut rng));
                    }
                    Point::from_vector(&local, world[i].rgb())
                })
                .collect();
            let cloud = PointCloud::from_points(points, ReferenceFrame::CameraLocal);
            let skel = skeleton.as_ref().map(|s| {
                let local = s.transformed(&cam.camera_from_world);
                if skel_noise > 0.0 {
                    let n = Normal::new(0.0, skel_noise).unwrap();
                    let mut positions = [Vector3::zeros(); JOINT_COUNT];
                    for (k, j) in local.joints().iter().enumerate() {
                        positions[k] = j.position + Vector3::from_fn(|_, _| n.sample(&mut rng));
                    }
                    Skeleton::from_positions(&positions, self.script.body.joint_confidence)
                } else {
                    local
                }
            });
            frames.push(TaggedFrame::new(cam.id, t_us, seq, cloud, skel));
            visible.push(idx);
        }
        SynthFrame {
            frames,
            truth: GroundTruth {
                timestamp_us: t_us,
                world_from_camera: self.cameras.iter().map(|c| (c.id, c.world_from_camera)).collect(),
                skeleton,
                world_points: PointCloud::from_points(world, ReferenceFrame::World),
                labels,
                visible,
            },
        }
    }

    /// Frame `seq` at the script's frame rate.
    pub fn frame(&self, seq: u64) -> SynthFrame {
        self.frame_at(self.script.timestamp_of(seq), seq)
    }

    /// Whether camera `id` loses frame `seq` under its scripted drop rate.
    pub fn is_dropped(&self, id: CameraId, seq: u64) -> bool {
        let Some(spec) = self.script.cameras.iter().find(|c| c.id == id) else {
            return false;
        };
        if spec.drop_rate <= 0.0 {
            return false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.script.seed ^ 0xD409, id as u64 + 1, seq));
        rng.random::<f64>() < spec.drop_rate
    }

    /// Frame `seq` as delivered by the cameras: dropped frames are removed.
    pub fn captured(&self, seq: u64) -> Vec<TaggedFrame> {
        let mut frames = self.frame(seq).frames;
        frames.retain(|f| !self.is_dropped(f.camera_id(), seq));
        frames
    }
}

/// Renders one instant of `script`.
pub fn synth_scene(script: &SceneScript, t_us: i64) -> Result<SynthFrame, CaptureError> {
    let synth = SceneSynthesizer::new(script.clone())?;
    let seq = (t_us as i128 * synth.script.fps as i128 / 1_000_000) as u64;
    Ok(synth.frame_at(t_us, seq))
}

/// A camera ring around the origin looking at the body, for quick scripts.
pub fn ring_cameras(n: usize, radius: f64, height: f64) -> Vec<CameraSpec> {
    (0..n)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            CameraSpec {
                id: i as CameraId,
                position: [radius * a.cos(), radius * a.sin(), height],
                look_at: [0.0, 0.0, 1.0],
                fov_deg: 100.0,
                range_m: 10.0,
                drop_rate: 0.0,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{default_cylinders, segment};

    const SCRIPT: &str = r#"
seed = 3
fps = 24
duration_s = 2.0

[[background]]
kind = "box"
min = [-3.0, -3.0, 0.0]
max = [3.0, 3.0, 2.8]
points = 4000
color = [120, 110, 100]
color_jitter = 10

[[cameras]]
id = 0
position = [2.5, 0.0, 1.4]
look_at = [0.0, 0.0, 1.0]
fov_deg = 100.0

[[cameras]]
id = 1
position = [0.0, 2.5, 1.4]
look_at = [0.0, 0.0, 1.0]
fov_deg = 100.0

[body]
points = 6000
keyframes = [{ t = 0.0, position = [0.0, 0.0, 0.0] }, { t = 1.0, position = [1.0, 0.0, 0.0] }]
"#;

    #[test]
    fn camera_pose_axes() {
        let pose = camera_pose([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        let r = pose.rotation;
        assert!((r.column(2) - Vector3::x()).norm() < 1e-12);
        assert!((r.column(1) + Vector3::z()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let down = camera_pose([0.0, 0.0, 3.0], [0.0, 0.0, 0.0]);
        assert!((down.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn static_scene_is_time_invariant() {
        let mut script = SceneScript::parse(SCRIPT).unwrap();
        script.body.enabled = false;
        let a = synth_scene(&script, 0).unwrap();
        let b = synth_scene(&script, 1_500_000).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.cloud, fb.cloud);
        }
    }

    #[test]
    fn body_translation_follows_keyframes() {
        let script = SceneScript::parse(SCRIPT).unwrap();
        let body_centroid = |f: &SynthFrame| {
            let pts: PointCloud = f
                .truth
                .world_points
                .iter()
                .zip(&f.truth.labels)
                .filter(|(_, l)| l.is_some())
                .map(|(p, _)| *p)
                .collect();
            pts.centroid().unwrap()
        };
        let mut script_still = script.clone();
        script_still.body.swing_deg = 0.0;
        let a = synth_scene(&script_still, 0).unwrap();
        let b = synth_scene(&script_still, 1_000_000).unwrap();
        let d = body_centroid(&b) - body_centroid(&a);
        assert!((d - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-9, "{d}");
    }

    #[test]
    fn cameras_agree_on_shared_points() {
        let script = SceneScript::parse(SCRIPT).unwrap();
        let f = synth_scene(&script, 250_000).unwrap();
        let t = f.truth.relative(0, 1).unwrap();
        let (v0, v1) = (&f.truth.visible[0], &f.truth.visible[1]);
        let mut shared = 0;
        for (i0, w) in v0.iter().enumerate() {
            if let Ok(i1) = v1.binary_search(w) {
                let p0 = f.frames[0].cloud.points[i0].position();
                let p1 = f.frames[1].cloud.points[i1].position();
                assert!((t.apply(&p0) - p1).norm() < 1e-6);
                shared += 1;
            }
        }
        assert!(shared > 100);
    }

    #[test]
    fn rendering_is_reproducible() {
        let script = SceneScript::parse(SCRIPT).unwrap();
        let mut noisy = script.clone();
        noisy.noise.sensor_m = 0.002;
        let a = synth_scene(&noisy, 500_000).unwrap();
        let b = synth_scene(&noisy, 500_000).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.frames[0].descriptor.sequence_number, 12);
    }

    #[test]
    fn body_shares_match_targets() {
        let script = SceneScript::parse(SCRIPT).unwrap();
        let f = synth_scene(&script, 0).unwrap();
        let n_body = f.truth.labels.iter().filter(|l| l.is_some()).count();
        assert_eq!(n_body, part_targets(6000, &DEFAULT_GROUP_SHARES).iter().sum::<usize>());
    }

    #[test]
    fn segmentation_recovers_generator_labels() {
        let script = SceneScript::parse(SCRIPT).unwrap();
        let synth = SceneSynthesizer::new(script).unwrap();
        for seq in [0u64, 5, 11, 17] {
            let f = synth.frame(seq);
            let skel = f.truth.skeleton.clone().unwrap();
            let body: PointCloud = f
                .truth
                .world_points
                .iter()
                .zip(&f.truth.labels)
                .filter(|(_, l)| l.is_some())
                .map(|(p, _)| *p)
                .collect();
            let truth: Vec<BodyPart> = f.truth.labels.iter().flatten().copied().collect();
            let filter = crate::segmentation::BodyFilter::new(&skel, &default_cylinders()).unwrap();
            let mut confusion = vec![[0usize; PART_COUNT]; PART_COUNT];
            for (p, t) in body.iter().zip(&truth) {
                if let Some(got) = filter.classify(p) {
                    confusion[t.index()][got.index()] += 1;
                }
            }
            let correct: usize = (0..PART_COUNT).map(|i| confusion[i][i]).sum();
            let acc = correct as f64 / body.len() as f64;
            assert!(acc >= 0.95, "slot {seq}: accuracy {acc:.4}, confusion {confusion:?}");
            let seg = segment(&body, &skel, &default_cylinders(), seq).unwrap();
            assert_eq!(seg.total_point_count(), body.len());
        }
    }

    #[test]
    fn malformed_script_names_field() {
        let err = SceneScript::parse("fps = \"fast\"\ncameras = []\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("fps") && text.contains("line 1"), "{text}");
        let err = SceneScript::parse("[[cameras]]\nid = 0\nposition = [0,0,0]\nlook_at = [1,0,0]\nzoom = 3\n")
            .unwrap_err();
        assert!(err.to_string().contains("zoom"), "{err}");
        let err = SceneScript::parse("[[cameras]]\nid = 0\nposition = [0,0,0]\nlook_at = [0,0,0]\n").unwrap_err();
        assert!(err.to_string().contains("cameras[0].look_at"), "{err}");
    }
}
