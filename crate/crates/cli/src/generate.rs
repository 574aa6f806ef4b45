use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use volstream::capture::ingest::{write_skeleton, Manifest, ManifestCamera, ManifestFrame};
use volstream::capture::synth::SceneScript;
use volstream::capture::SceneSynthesizer;
use volstream::geometry::ply::{write_ply_file, PlyEncoding};
use volstream::geometry::RigidTransform;

use crate::config::{self, create_dir, data, pipeline, usage, write_file, write_resolved, Outcome};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TRUTH_FILE: &str = "ground_truth.jsonl";
pub const SCRIPT_FILE: &str = "scene.toml";

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Scene script (TOML).
    #[arg(long)]
    script: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the script's duration.
    #[arg(long)]
    duration_s: Option<f64>,
    /// Write ASCII instead of binary PLY.
    #[arg(long)]
    ascii: bool,
    /// Overrides the script's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with defaults for these options.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub script: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub duration_s: Option<f64>,
    pub ascii: bool,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct TruthRecord<'a> {
    seq: u64,
    timestamp_us: i64,
    world_from_camera: Vec<(u32, &'a RigidTransform)>,
    dropped: Vec<u32>,
}

pub fn run(args: GenerateArgs) -> Outcome {
    let mut cfg: GenerateConfig = config::load(args.config.as_deref())?;
    cfg.script = args.script.or(cfg.script);
    cfg.out = args.out.or(cfg.out);
    cfg.duration_s = args.duration_s.or(cfg.duration_s);
    cfg.ascii |= args.ascii;
    cfg.seed = args.seed.or(cfg.seed);
    let script_path = cfg.script.clone().ok_or_else(|| usage(anyhow::anyhow!("--script is required")))?;
    let out = cfg.out.clone().ok_or_else(|| usage(anyhow::anyhow!("--out is required")))?;

    let mut script = SceneScript::from_file(&script_path).map_err(data)?;
    if let Some(s) = cfg.seed {
        script.seed = s;
    }
    if let Some(d) = cfg.duration_s {
        script.duration_s = d;
    }
    let synth = SceneSynthesizer::new(script).map_err(data)?;
    generate(&synth, &out, if cfg.ascii { PlyEncoding::Ascii } else { PlyEncoding::BinaryLittleEndian })?;
    write_file(&out.join(SCRIPT_FILE), synth.script().to_toml())?;
    write_resolved(&out, &cfg)?;
    println!(
        "wrote {} frames for {} cameras to {}",
        synth.script().frame_count(),
        synth.camera_ids().len(),
        out.display()
    );
    Ok(())
}

fn generate(synth: &SceneSynthesizer, out: &Path, encoding: PlyEncoding) -> Outcome {
    create_dir(out)?;
    let ids = synth.camera_ids();
    let mut cameras: Vec<ManifestCamera> = ids
        .iter()
        .map(|id| ManifestCamera {
            id: *id,
            frames: Vec::new(),
        })
        .collect();
    for id in &ids {
        create_dir(&out.join(format!("cam{id}")))?;
    }
    let mut truth = String::new();
    for seq in 0..synth.script().frame_count() {
        let frame = synth.frame(seq);
        let mut dropped = Vec::new();
        for (f, cam) in frame.frames.iter().zip(cameras.iter_mut()) {
            let id = f.camera_id();
            if synth.is_dropped(id, seq) {
                dropped.push(id);
                continue;
            }
            let ply = PathBuf::from(format!("cam{id}/{seq:06}.ply"));
            write_ply_file(out.join(&ply), &f.cloud, encoding)
                .with_context(|| format!("writing {}", ply.display()))
                .map_err(data)?;
            let skeleton = match &f.skeleton {
                Some(s) => {
                    let rel = PathBuf::from(format!("cam{id}/{seq:06}.json"));
                    write_skeleton(&out.join(&rel), s)
                        .with_context(|| format!("writing {}", rel.display()))
                        .map_err(data)?;
                    Some(rel)
                }
                None => None,
            };
            cam.frames.push(ManifestFrame {
                t: f.timestamp(),
                ply,
                skeleton,
            });
        }
        let rec = TruthRecord {
            seq,
            timestamp_us: frame.truth.timestamp_us,
            world_from_camera: frame.truth.world_from_camera.iter().map(|(c, t)| (*c, t)).collect(),
            dropped,
        };
        truth += &serde_json::to_string(&rec).map_err(pipeline)?;
        truth.push('\n');
    }
    let manifest = Manifest { cameras };
    write_file(&out.join(MANIFEST_FILE), manifest.to_toml())?;
    write_file(&out.join(TRUTH_FILE), truth)
}
