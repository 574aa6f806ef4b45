//! Coordinate math shared by every stage: pinhole back-projection, Euler
//! rotations, weighted rigid alignment and the point-cloud container.
//!
//! Conventions: matrices are row-major in all text formats, points are
//! column vectors and a transform acts as `p' = R p + t`. World space is
//! right-handed with `+z` up; the viewing direction of an identity
//! orientation is `+x`.

pub mod ply;

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("depth image is {width}x{height} but carries {depth_len} depth values and {color_len:?} color values")]
    Dimension {
        width: usize,
        height: usize,
        depth_len: usize,
        color_len: Option<usize>,
    },
    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(&'static str),
    #[error("degenerate calibration: {0}")]
    CalibrationDegenerate(String),
    #[error("non-finite coordinate in point {index}")]
    NonFinite { index: usize },
}

/// A colored point. Coordinates are meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Point {
    pub const WHITE: [u8; 3] = [255, 255, 255];

    pub fn new(x: f64, y: f64, z: f64, rgb: [u8; 3]) -> Self {
        Point {
            x,
            y,
            z,
            r: rgb[0],
            g: rgb[1],
            b: rgb[2],
        }
    }

    pub fn from_vector(v: &Vector3<f64>, rgb: [u8; 3]) -> Self {
        Point::new(v.x, v.y, v.z, rgb)
    }

    #[inline]
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    #[inline]
    pub fn rgb(&self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Rounds the coordinates to the nearest `f32`, the precision used on the
    /// wire and in PLY files.
    pub fn quantized(&self) -> Self {
        Point {
            x: self.x as f32 as f64,
            y: self.y as f32 as f64,
            z: self.z as f32 as f64,
            ..*self
        }
    }

    /// Total order on (x, y, z, r, g, b) by bit pattern; used to compare
    /// clouds as multisets.
    pub fn sort_key(&self) -> (u64, u64, u64, [u8; 3]) {
        fn key(v: f64) -> u64 {
            let bits = v.to_bits();
            if bits >> 63 == 1 {
                !bits
            } else {
                bits | (1 << 63)
            }
        }
        (key(self.x), key(self.y), key(self.z), self.rgb())
    }

    #[inline]
    pub fn distance(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Which coordinate system a cloud is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ReferenceFrame {
    #[default]
    World,
    CameraLocal,
}

/// Unordered collection of colored points. Order carries no meaning; use
/// [`PointCloud::same_points`] for set comparison.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame: ReferenceFrame,
}

impl PointCloud {
    pub fn new(frame: ReferenceFrame) -> Self {
        PointCloud {
            points: Vec::new(),
            frame,
        }
    }

    pub fn from_points(points: Vec<Point>, frame: ReferenceFrame) -> Self {
        PointCloud { points, frame }
    }

    /// Builds a cloud, rejecting NaN or infinite coordinates.
    pub fn try_from_points(
        points: Vec<Point>,
        frame: ReferenceFrame,
    ) -> Result<Self, GeometryError> {
        if let Some(index) = points.iter().position(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite { index });
        }
        Ok(PointCloud { points, frame })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn extend_from(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.position());
        Some(sum / self.points.len() as f64)
    }

    /// Axis-aligned bounds as (min, max), or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.points.first()?.position();
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            let v = p.position();
            (lo.inf(&v), hi.sup(&v))
        }))
    }

    pub fn quantized(&self) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(Point::quantized).collect(),
            frame: self.frame,
        }
    }

    /// Points sorted by [`Point::sort_key`], the canonical multiset form.
    pub fn sorted_points(&self) -> Vec<Point> {
        let mut pts = self.points.clone();
        pts.sort_by_key(Point::sort_key);
        pts
    }

    /// Multiset equality (positions and colors, bit-exact), ignoring order.
    pub fn same_points(&self, other: &PointCloud) -> bool {
        self.len() == other.len() && self.sorted_points() == other.sorted_points()
    }
}

impl FromIterator<Point> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        PointCloud {
            points: iter.into_iter().collect(),
            frame: ReferenceFrame::World,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
    /// Meters per raw depth unit.
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, px: f64, py: f64, depth_scale: f64) -> Result<Self, GeometryError> {
        let intr = CameraIntrinsics {
            fx,
            fy,
            px,
            py,
            depth_scale,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::Intrinsics("focal lengths must be positive"));
        }
        if !(self.depth_scale > 0.0) {
            return Err(GeometryError::Intrinsics("depth scale must be positive"));
        }
        if !(self.px.is_finite() && self.py.is_finite()) {
            return Err(GeometryError::Intrinsics("principal point must be finite"));
        }
        Ok(())
    }

    /// Inverse of the back-projection: camera-space point to (column, row, raw depth).
    pub fn project(&self, p: &Point) -> (f64, f64, f64) {
        let j = p.x * self.fx / p.z + self.px;
        let i = p.y * self.fy / p.z + self.py;
        (j, i, p.z / self.depth_scale)
    }
}

/// Raw depth frame with an optional pixel-aligned color image. Row-major,
/// `depth[i * width + j]` is row `i`, column `j`. Depth 0 means no sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<u16>,
    pub color: Option<Vec<[u8; 3]>>,
}

/// Back-projects every pixel with a nonzero depth sample through the pinhole
/// model; pixels without color come out white.
pub fn rgbd_to_pointcloud(
    depth: &DepthImage,
    intr: &CameraIntrinsics,
) -> Result<PointCloud, GeometryError> {
    let expected = depth.width * depth.height;
    let color_len = depth.color.as_ref().map(Vec::len);
    if depth.depth.len() != expected || color_len.is_some_and(|n| n != expected) {
        return Err(GeometryError::Dimension {
            width: depth.width,
            height: depth.height,
            depth_len: depth.depth.len(),
            color_len,
        });
    }
    intr.validate()?;

    let mut points = Vec::with_capacity(expected);
    for i in 0..depth.height {
        for j in 0..depth.width {
            let idx = i * depth.width + j;
            let s = depth.depth[idx];
            if s == 0 {
                continue;
            }
            let z = intr.depth_scale * s as f64;
            let x = (j as f64 - intr.px) * z / intr.fx;
            let y = (i as f64 - intr.py) * z / intr.fy;
            let rgb = depth
                .color
                .as_ref()
                .map_or(Point::WHITE, |c| c[idx]);
            points.push(Point::new(x, y, z, rgb));
        }
    }
    Ok(PointCloud::from_points(points, ReferenceFrame::CameraLocal))
}

/// Yaw (about z), pitch (about y) and roll (about x), radians, each wrapped
/// into (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

impl EulerAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        EulerAngles {
            yaw: wrap_angle(yaw),
            pitch: wrap_angle(pitch),
            roll: wrap_angle(roll),
        }
    }
}

/// Proper rigid motion, `p' = rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform::new(Matrix3::identity(), t)
    }

    #[inline]
    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v + self.translation
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        Point::from_vector(&self.apply(&p.position()), p.rgb())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Max deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    /// Row-major rotation entries followed by the translation.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Self {
        RigidTransform::new(
            Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]),
            Vector3::new(v[9], v[10], v[11]),
        )
    }
}

/// `R = Rx(roll) · Ry(pitch) · Rz(yaw)`, with the standard right-handed
/// sign pattern in every factor.
pub fn rotation_from_euler(angles: &EulerAngles) -> RigidTransform {
    let (sa, ca) = angles.yaw.sin_cos();
    let (sb, cb) = angles.pitch.sin_cos();
    let (sg, cg) = angles.roll.sin_cos();
    let roll = Matrix3::new(1.0, 0.0, 0.0, 0.0, cg, -sg, 0.0, sg, cg);
    let pitch = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let yaw = Matrix3::new(ca, -sa, 0.0, sa, ca, 0.0, 0.0, 0.0, 1.0);
    RigidTransform::new(roll * pitch * yaw, Vector3::zeros())
}

/// Weighted least-squares rigid alignment (Kabsch with a reflection guard).
///
/// Returns the transform `T` minimising `Σ wᵢ ‖T(sourceᵢ) − targetᵢ‖²`.
/// Correspondences with a non-positive weight are ignored; fewer than three
/// remaining, or remaining points that are (nearly) collinear, is an error.
pub fn estimate_rigid_transform(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    weights: &[f64],
) -> Result<RigidTransform, GeometryError> {
    if source.len() != target.len() || source.len() != weights.len() {
        return Err(GeometryError::CalibrationDegenerate(format!(
            "mismatched correspondence lists: {} source, {} target, {} weights",
            source.len(),
            target.len(),
            weights.len()
        )));
    }
    let used: Vec<usize> = (0..source.len())
        .filter(|&i| weights[i] > 0.0 && weights[i].is_finite())
        .collect();
    if used.len() < 3 {
        return Err(GeometryError::CalibrationDegenerate(format!(
            "{} usable correspondences, need at least 3",
            used.len()
        )));
    }
    if used
        .iter()
        .any(|&i| !source[i].iter().chain(target[i].iter()).all(|c| c.is_finite()))
    {
        return Err(GeometryError::CalibrationDegenerate(
            "non-finite joint position".into(),
        ));
    }

    let total: f64 = used.iter().map(|&i| weights[i]).sum();
    let src_c = used
        .iter()
        .fold(Vector3::zeros(), |acc, &i| acc + source[i] * weights[i])
        / total;
    let dst_c = used
        .iter()
        .fold(Vector3::zeros(), |acc, &i| acc + target[i] * weights[i])
        / total;

    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for &i in &used {
        let s = source[i] - src_c;
        let d = target[i] - dst_c;
        cross += weights[i] * s * d.transpose();
        scatter += weights[i] * s * s.transpose();
    }

    // Collinear or coincident sources leave rotation about the line free.
    let mut spread = scatter.symmetric_eigenvalues().as_slice().to_vec();
    spread.sort_by(|a, b| b.total_cmp(a));
    if spread[0] <= f64::EPSILON || spread[1] <= 1e-10 * spread[0] {
        return Err(GeometryError::CalibrationDegenerate(
            "correspondences are collinear or coincident".into(),
        ));
    }

    let svd = SVD::new(cross, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => {
            return Err(GeometryError::CalibrationDegenerate(
                "SVD did not converge".into(),
            ))
        }
    };
    let v = v_t.transpose();
    let ut = u.transpose();
    let d = (v * ut).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * ut;
    let translation = dst_c - rotation * src_c;
    Ok(RigidTransform::new(rotation, translation))
}

/// Weighted RMS distance between transformed source and target.
pub fn alignment_rms(
    transform: &RigidTransform,
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    weights: &[f64],
) -> f64 {
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for ((s, t), &w) in source.iter().zip(target).zip(weights) {
        if w > 0.0 {
            acc += w * (transform.apply(s) - t).norm_squared();
            wsum += w;
        }
    }
    if wsum == 0.0 {
        0.0
    } else {
        (acc / wsum).sqrt()
    }
}

pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
        frame: cloud.frame,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let r = rotation_from_euler(&EulerAngles::new(
            rng.random_range(-PI..PI),
            rng.random_range(-PI..PI),
            rng.random_range(-PI..PI),
        ));
        RigidTransform::new(
            r.rotation,
            Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ),
        )
    }

    fn random_joints(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(0.0..1.8),
                )
            })
            .collect()
    }

    #[test]
    fn principal_point_pixel_lands_on_optical_axis() {
        let img = DepthImage {
            width: 1,
            height: 1,
            depth: vec![2],
            color: None,
        };
        let intr = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        let cloud = rgbd_to_pointcloud(&img, &intr).unwrap();
        assert_eq!(cloud.points, vec![Point::new(0.0, 0.0, 2.0, Point::WHITE)]);
        assert_eq!(cloud.frame, ReferenceFrame::CameraLocal);
    }

    #[test]
    fn direct_pinhole_evaluation() {
        // pixel (j=2, i=1) with S=4, every other pixel empty
        let mut depth = vec![0u16; 3 * 2];
        depth[3 + 2] = 4;
        let mut color = vec![[0u8; 3]; 6];
        color[5] = [10, 20, 30];
        let img = DepthImage {
            width: 3,
            height: 2,
            depth,
            color: Some(color),
        };
        let intr = CameraIntrinsics::new(2.0, 2.0, 1.0, 1.0, 1.0).unwrap();
        let cloud = rgbd_to_pointcloud(&img, &intr).unwrap();
        assert_eq!(cloud.points, vec![Point::new(2.0, 0.0, 4.0, [10, 20, 30])]);
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let img = DepthImage {
            width: 4,
            height: 4,
            depth: vec![1; 15],
            color: None,
        };
        let intr = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        assert!(matches!(
            rgbd_to_pointcloud(&img, &intr),
            Err(GeometryError::Dimension { .. })
        ));
        let img = DepthImage {
            width: 2,
            height: 2,
            depth: vec![1; 4],
            color: Some(vec![[0; 3]; 3]),
        };
        assert!(rgbd_to_pointcloud(&img, &intr).is_err());
    }

    #[test]
    fn invalid_intrinsics_are_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn reprojection_recovers_source_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, h) = (8usize, 8usize);
        let depth: Vec<u16> = (0..w * h)
            .map(|_| if rng.random_bool(0.2) { 0 } else { rng.random_range(1..5000) })
            .collect();
        let intr = CameraIntrinsics::new(
            rng.random_range(200.0..600.0),
            rng.random_range(200.0..600.0),
            rng.random_range(0.0..8.0),
            rng.random_range(0.0..8.0),
            0.001,
        )
        .unwrap();
        let img = DepthImage {
            width: w,
            height: h,
            depth: depth.clone(),
            color: None,
        };
        let cloud = rgbd_to_pointcloud(&img, &intr).unwrap();
        let nonzero: Vec<(usize, usize, u16)> = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .filter_map(|(i, j)| {
                let s = depth[i * w + j];
                (s != 0).then_some((i, j, s))
            })
            .collect();
        assert_eq!(cloud.len(), nonzero.len());
        for (p, &(i, j, s)) in cloud.points.iter().zip(&nonzero) {
            let (pj, pi, ps) = intr.project(p);
            assert!((pj - j as f64).abs() < 1e-6);
            assert!((pi - i as f64).abs() < 1e-6);
            assert!((ps - s as f64).abs() < 1e-6);
            assert_eq!((pj.round() as usize, pi.round() as usize, ps.round() as u16), (j, i, s));
        }
    }

    #[test]
    fn zero_angles_give_identity() {
        let r = rotation_from_euler(&EulerAngles::new(0.0, 0.0, 0.0));
        assert_eq!(r.rotation, Matrix3::identity());
        assert_eq!(r.translation, Vector3::zeros());
    }

    #[test]
    fn quarter_yaw_maps_x_to_y() {
        let r = rotation_from_euler(&EulerAngles::new(PI / 2.0, 0.0, 0.0));
        let v = r.apply(&Vector3::x());
        assert_abs_diff_eq!(v, Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn random_rotations_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            assert!(t.orthonormality_error() < 1e-9);
        }
    }

    #[test]
    fn euler_angles_wrap_into_half_open_range() {
        let e = EulerAngles::new(3.0 * PI, -PI, 7.0);
        assert!((e.yaw - PI).abs() < 1e-12);
        assert!((e.pitch - PI).abs() < 1e-12);
        assert!(e.roll > -PI && e.roll <= PI);
        assert!((e.roll - (7.0 - 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn alignment_of_identical_sets_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let joints = random_joints(&mut rng, 32);
        let w = vec![1.0; 32];
        let t = estimate_rigid_transform(&joints, &joints, &w).unwrap();
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
        assert!(alignment_rms(&t, &joints, &joints, &w) < 1e-12);
    }

    #[test]
    fn noiseless_alignment_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let truth = random_transform(&mut rng);
            let src = random_joints(&mut rng, 32);
            let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
            let w: Vec<f64> = (0..32).map(|_| rng.random_range(0.1..1.0)).collect();
            let t = estimate_rigid_transform(&src, &dst, &w).unwrap();
            assert!(alignment_rms(&t, &src, &dst, &w) < 1e-9);
            assert!((t.rotation - truth.rotation).abs().max() < 1e-9);
            assert!((t.translation - truth.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn noisy_alignment_stays_within_bounds() {
        // 1000-trial Monte Carlo with 1 mm noise on 32 joints: the worst RMS
        // seen is ~1.2 mm (3 mm bound) and the worst translation error is
        // ~1.5 mm (5 mm bound).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sigma = 0.001;
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut worst_rms: f64 = 0.0;
        let mut worst_t: f64 = 0.0;
        for _ in 0..1000 {
            let truth = random_transform(&mut rng);
            let src = random_joints(&mut rng, 32);
            let dst: Vec<_> = src
                .iter()
                .map(|p| {
                    truth.apply(p)
                        + Vector3::new(
                            noise.sample(&mut rng),
                            noise.sample(&mut rng),
                            noise.sample(&mut rng),
                        )
                })
                .collect();
            let w = vec![1.0; 32];
            let t = estimate_rigid_transform(&src, &dst, &w).unwrap();
            worst_rms = worst_rms.max(alignment_rms(&t, &src, &dst, &w));
            worst_t = worst_t.max((t.translation - truth.translation).norm());
        }
        assert!(worst_rms <= 3.0 * sigma, "rms {worst_rms}");
        assert!(worst_t <= 0.005, "translation error {worst_t}");
    }

    #[test]
    fn degenerate_correspondences_are_rejected() {
        let line: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.5)).collect();
        let w = vec![1.0; 10];
        assert!(matches!(
            estimate_rigid_transform(&line, &line, &w),
            Err(GeometryError::CalibrationDegenerate(_))
        ));
        let tri = vec![Vector3::x(), Vector3::y(), Vector3::z()];
        assert!(estimate_rigid_transform(&tri[..2], &tri[..2], &[1.0, 1.0]).is_err());
        assert!(estimate_rigid_transform(&tri, &tri, &[1.0, 1.0, 0.0]).is_err());
        assert!(estimate_rigid_transform(&tri, &tri, &[1.0, 1.0]).is_err());
        assert!(estimate_rigid_transform(&tri, &tri, &[1.0, 1.0, 1.0]).is_ok());
    }

    #[test]
    fn alignment_residual_is_invariant_to_common_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.01).unwrap();
        for _ in 0..50 {
            let src = random_joints(&mut rng, 32);
            let dst: Vec<_> = src
                .iter()
                .map(|p| p + Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
                .collect();
            let w = vec![1.0; 32];
            let base = estimate_rigid_transform(&src, &dst, &w).unwrap();
            let g = random_transform(&mut rng);
            let src2: Vec<_> = src.iter().map(|p| g.apply(p)).collect();
            let dst2: Vec<_> = dst.iter().map(|p| g.apply(p)).collect();
            let moved = estimate_rigid_transform(&src2, &dst2, &w).unwrap();
            let r1 = alignment_rms(&base, &src, &dst, &w);
            let r2 = alignment_rms(&moved, &src2, &dst2, &w);
            assert!((r1 - r2).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_transform_leaves_cloud_unchanged() {
        let cloud: PointCloud = vec![Point::new(1.0, 2.0, 3.0, [1, 2, 3]), Point::new(-1.0, 0.5, 0.0, [9, 9, 9])]
            .into_iter()
            .collect();
        assert_eq!(apply_transform(&cloud, &RigidTransform::identity()), cloud);
    }

    #[test]
    fn yaw_quarter_turn_on_unit_x() {
        let cloud: PointCloud = vec![Point::new(1.0, 0.0, 0.0, [5, 6, 7])].into_iter().collect();
        let t = rotation_from_euler(&EulerAngles::new(PI / 2.0, 0.0, 0.0));
        let out = apply_transform(&cloud, &t);
        let p = out.points[0];
        assert!(p.x.abs() < 1e-9 && (p.y - 1.0).abs() < 1e-9 && p.z.abs() < 1e-9);
        assert_eq!(p.rgb(), [5, 6, 7]);
    }

    #[test]
    fn transform_round_trip_and_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud: PointCloud = (0..200)
            .map(|_| {
                Point::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    [rng.random(), rng.random(), rng.random()],
                )
            })
            .collect();
        let t = random_transform(&mut rng);
        let moved = apply_transform(&cloud, &t);
        let back = apply_transform(&moved, &t.inverse());
        for (a, b) in cloud.iter().zip(back.iter()) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9 && (a.z - b.z).abs() < 1e-9);
            assert_eq!(a.rgb(), b.rgb());
        }
        for _ in 0..200 {
            let i = rng.random_range(0..cloud.len());
            let j = rng.random_range(0..cloud.len());
            let d0 = cloud.points[i].distance(&cloud.points[j]);
            let d1 = moved.points[i].distance(&moved.points[j]);
            assert!((d0 - d1).abs() < 1e-9);
        }
    }

    #[test]
    fn homogeneous_view_matches_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = random_transform(&mut rng);
        let m = t.to_homogeneous();
        let p = Vector3::new(0.3, -1.2, 2.0);
        let h = m * p.push(1.0);
        assert_abs_diff_eq!(h.xyz(), t.apply(&p), epsilon = 1e-12);
        assert_eq!(RigidTransform::from_row_major(&t.to_row_major()), t);
        let c = t.compose(&t.inverse());
        assert!((c.rotation - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn multiset_comparison_ignores_order() {
        let a: PointCloud = vec![Point::new(1.0, 0.0, 0.0, [1, 1, 1]), Point::new(0.0, -0.0, 2.0, [2, 2, 2])]
            .into_iter()
            .collect();
        let mut b = a.clone();
        b.points.reverse();
        assert!(a.same_points(&b));
        b.points[0].r = 7;
        assert!(!a.same_points(&b));
        assert!(PointCloud::try_from_points(vec![Point::new(f64::NAN, 0.0, 0.0, [0; 3])], ReferenceFrame::World).is_err());
    }
}
