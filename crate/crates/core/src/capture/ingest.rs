//! Recorded PLY sequences described by a manifest.
//!
//! ```toml
//! [[cameras]]
//! id = 0
//! frames = [
//!   { t = 0, ply = "cam0/000000.ply", skeleton = "cam0/000000.json" },
//!   { t = 41666, ply = "cam0/000001.ply" },
//! ]
//! ```
//!
//! Timestamps are microseconds; paths are relative to the manifest's
//! directory. Skeleton sidecars hold `{"joints": [{"position": [x, y, z],
//! "confidence": c}, ...]}` with 32 entries.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::skeleton::Skeleton;
use super::{CameraId, CaptureError, TaggedFrame};
use crate::geometry::ply::read_ply_file;
use crate::geometry::ReferenceFrame;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub cameras: Vec<ManifestCamera>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCamera {
    pub id: CameraId,
    #[serde(default)]
    pub frames: Vec<ManifestFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub t: i64,
    pub ply: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skeleton: Option<PathBuf>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, CaptureError> {
        let m: Manifest = toml::from_str(text).map_err(|e| CaptureError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn from_file(path: &Path) -> Result<Self, CaptureError> {
        let text = std::fs::read_to_string(path).map_err(|source| CaptureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<(), CaptureError> {
        let mut ids: Vec<CameraId> = self.cameras.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(CaptureError::Manifest("duplicate camera id".into()));
        }
        for cam in &self.cameras {
            if cam.frames.windows(2).any(|w| w[1].t < w[0].t) {
                return Err(CaptureError::Manifest(format!(
                    "camera {}: timestamps must not decrease",
                    cam.id
                )));
            }
        }
        Ok(())
    }

    pub fn camera_ids(&self) -> Vec<CameraId> {
        self.cameras.iter().map(|c| c.id).collect()
    }
}

fn read_skeleton(path: &Path) -> Result<Skeleton, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let parsed: Skeleton = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Skeleton::new(parsed.joints().to_vec()).map_err(|e| e.to_string())
}

pub fn write_skeleton(path: &Path, skeleton: &Skeleton) -> std::io::Result<()> {
    std::fs::write(path, serde_json::to_vec(skeleton).expect("skeleton serializes"))
}

/// Lazily loads manifest frames in global timestamp order (ties broken by
/// camera id). After the first error the stream ends.
pub struct PlySequence {
    dir: PathBuf,
    queue: VecDeque<(CameraId, u64, ManifestFrame)>,
    failed: bool,
}

impl Iterator for PlySequence {
    type Item = Result<TaggedFrame, CaptureError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let (camera, sequence, entry) = self.queue.pop_front()?;
        let result = self.load(camera, sequence, &entry);
        self.failed = result.is_err();
        Some(result)
    }
}

impl PlySequence {
    fn load(&self, camera: CameraId, sequence: u64, entry: &ManifestFrame) -> Result<TaggedFrame, CaptureError> {
        let path = self.dir.join(&entry.ply);
        if !path.is_file() {
            return Err(CaptureError::MissingFile { camera, sequence, path });
        }
        let mut cloud = read_ply_file(&path).map_err(|source| CaptureError::Ply { camera, sequence, source })?;
        cloud.frame = ReferenceFrame::CameraLocal;
        let skeleton = match &entry.skeleton {
            None => None,
            Some(rel) => {
                let p = self.dir.join(rel);
                if !p.is_file() {
                    return Err(CaptureError::MissingFile { camera, sequence, path: p });
                }
                Some(read_skeleton(&p).map_err(|message| CaptureError::Skeleton { camera, sequence, message })?)
            }
        };
        Ok(TaggedFrame::new(camera, entry.t, sequence, cloud, skeleton))
    }
}

pub fn ingest_ply_sequence(directory: &Path, manifest: &Manifest) -> PlySequence {
    let mut all: Vec<(CameraId, u64, ManifestFrame)> = manifest
        .cameras
        .iter()
        .flat_map(|c| {
            c.frames
                .iter()
                .enumerate()
                .map(move |(i, f)| (c.id, i as u64, f.clone()))
        })
        .collect();
    all.sort_by_key(|(c, s, f)| (f.t, *c, *s));
    PlySequence {
        dir: directory.to_path_buf(),
        queue: all.into(),
        failed: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::skeleton::JOINT_COUNT;
    use crate::geometry::ply::{write_ply_file, PlyEncoding};
    use crate::geometry::{Point, PointCloud};
    use nalgebra::Vector3;

    fn write_frames(dir: &Path, n: usize) -> Manifest {
        let mut frames = Vec::new();
        for i in 0..n {
            let name = format!("f{i}.ply");
            let cloud: PointCloud = (0..=i).map(|k| Point::new(k as f64, 0.5, 0.25, [1, 2, 3])).collect();
            write_ply_file(dir.join(&name), &cloud, PlyEncoding::BinaryLittleEndian).unwrap();
            frames.push(ManifestFrame {
                t: i as i64 * 41_667,
                ply: name.into(),
                skeleton: None,
            });
        }
        Manifest {
            cameras: vec![ManifestCamera { id: 4, frames }],
        }
    }

    #[test]
    fn one_camera_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_frames(dir.path(), 3);
        let frames: Vec<_> = ingest_ply_sequence(dir.path(), &m).collect::<Result<_, _>>().unwrap();
        let seqs: Vec<u64> = frames.iter().map(|f| f.descriptor.sequence_number).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
        assert_eq!(frames[2].descriptor.point_count, 3);
        assert_eq!(frames[2].cloud.len(), 3);
    }

    #[test]
    fn empty_manifest_is_empty_stream() {
        let m = Manifest::parse("").unwrap();
        assert_eq!(ingest_ply_sequence(Path::new("."), &m).count(), 0);
    }

    #[test]
    fn missing_middle_file_reports_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_frames(dir.path(), 3);
        std::fs::remove_file(dir.path().join("f1.ply")).unwrap();
        let out: Vec<_> = ingest_ply_sequence(dir.path(), &m).collect();
        assert_eq!(out.len(), 2);
        assert!(out[0].is_ok());
        match &out[1] {
            Err(CaptureError::MissingFile { camera: 4, sequence: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_ply_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_frames(dir.path(), 1);
        std::fs::write(dir.path().join("f0.ply"), b"ply\nformat nonsense\n").unwrap();
        let out: Vec<_> = ingest_ply_sequence(dir.path(), &m).collect();
        assert!(matches!(out[0], Err(CaptureError::Ply { camera: 4, sequence: 0, .. })));
    }

    #[test]
    fn skeleton_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_frames(dir.path(), 1);
        let positions: [Vector3<f64>; JOINT_COUNT] = std::array::from_fn(|i| Vector3::new(i as f64, 0.0, 1.0));
        let skel = Skeleton::from_positions(&positions, 0.75);
        write_skeleton(&dir.path().join("s0.json"), &skel).unwrap();
        m.cameras[0].frames[0].skeleton = Some("s0.json".into());
        let text = m.to_toml();
        let m2 = Manifest::parse(&text).unwrap();
        assert_eq!(m, m2);
        let frame = ingest_ply_sequence(dir.path(), &m2).next().unwrap().unwrap();
        assert_eq!(frame.skeleton, Some(skel));
    }

    #[test]
    fn frames_interleave_by_timestamp() {
        let m = Manifest::parse(
            "[[cameras]]\nid = 1\nframes = [{t = 0, ply = \"a\"}, {t = 10, ply = \"b\"}]\n\
             [[cameras]]\nid = 0\nframes = [{t = 5, ply = \"c\"}]\n",
        )
        .unwrap();
        let seq = ingest_ply_sequence(Path::new("/nonexistent"), &m);
        let order: Vec<_> = seq.queue.iter().map(|(c, s, _)| (*c, *s)).collect();
        assert_eq!(order, vec![(1, 0), (0, 0), (1, 1)]);
        assert!(Manifest::parse("[[cameras]]\nid = 1\nframes = [{t = 9, ply = \"a\"}, {t = 1, ply = \"b\"}]\n").is_err());
    }
}
