use std::cell::RefCell;
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use volstream::capture::ingest::{ingest_ply_sequence, Manifest, PlySequence};
use volstream::capture::synth::SceneScript;
use volstream::capture::{CaptureError, SceneSynthesizer, SlotDuration, SyncConfig, SyncedGroup, Synchronizer};
use volstream::geometry::ply::{write_ply_file, PlyEncoding};
use volstream::report::{baseline_saving, SessionReport};
use volstream::scene_reuse::{parse_viewport_trace, ViewportSample};
use volstream::segmentation::{load_presets, DecimationProfile};
use volstream::transport::session::{run_session, SessionConfig, SessionError, SessionOutput, StaticMode, SynthGroups};
use volstream::vabr::BandwidthTrace;

use crate::config::{self, create_dir, data, pipeline, usage, write_file, write_resolved, Failure, Outcome};

pub const LOG_FILE: &str = "session.jsonl";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const BASELINE_DIR: &str = "baseline";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    CubeReuse,
    FullRetransmit,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// Scene script rendered on the fly.
    #[arg(long, conflicts_with = "manifest")]
    script: Option<PathBuf>,
    /// Manifest of a recorded or generated PLY sequence.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Bandwidth trace (CSV `time_s,mbps`); unlimited when omitted.
    #[arg(long, conflicts_with = "bandwidth_mbps")]
    trace: Option<PathBuf>,
    /// Constant bandwidth instead of a trace file.
    #[arg(long)]
    bandwidth_mbps: Option<f64>,
    /// Viewport trace (`timestamp_us,px,py,pz,yaw,pitch,roll`).
    #[arg(long)]
    viewport: Option<PathBuf>,
    /// Decimation preset: base, 1, 2, 3, 4a, 4b, 5 or a name from --presets.
    #[arg(long)]
    preset: Option<String>,
    /// TOML file of extra presets.
    #[arg(long)]
    presets: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Also run the full-retransmission baseline on the same input.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    chunk_frames: Option<usize>,
    /// Chamfer threshold for cube changes, in metres.
    #[arg(long)]
    change_threshold: Option<f64>,
    /// Snapshot every this many chunks (0 disables).
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// Mirror the stream over a loopback TCP socket.
    #[arg(long)]
    socket: bool,
    #[arg(long)]
    propagation_ms: Option<f64>,
    #[arg(long)]
    loss_rate: Option<f64>,
    /// Frame rate of a manifest input.
    #[arg(long)]
    fps: Option<u32>,
    /// Overrides a script's duration.
    #[arg(long)]
    duration_s: Option<f64>,
    /// Record measured wall time of server stages.
    #[arg(long)]
    wall: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with defaults for these options.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub script: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub bandwidth_mbps: Option<f64>,
    pub viewport: Option<PathBuf>,
    pub preset: String,
    pub presets: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: StaticMode,
    pub baseline: bool,
    pub chunk_frames: usize,
    pub change_threshold: Option<f64>,
    pub snapshot_every: usize,
    pub socket: bool,
    pub propagation_ms: f64,
    pub loss_rate: f64,
    pub initial_estimate_mbps: f64,
    pub fps: u32,
    pub duration_s: Option<f64>,
    pub wall: bool,
    pub seed: u64,
    /// Resolved kept ratios, written for reproducibility.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<DecimationProfile>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        let s = SessionConfig::default();
        StreamConfig {
            script: None,
            manifest: None,
            trace: None,
            bandwidth_mbps: None,
            viewport: None,
            preset: "base".into(),
            presets: None,
            out: None,
            mode: StaticMode::CubeReuse,
            baseline: false,
            chunk_frames: s.chunk_frames,
            change_threshold: None,
            snapshot_every: 5,
            socket: false,
            propagation_ms: s.propagation_s * 1000.0,
            loss_rate: 0.0,
            initial_estimate_mbps: s.initial_estimate_mbps,
            fps: 24,
            duration_s: None,
            wall: false,
            seed: 0,
            profile: None,
        }
    }
}

fn resolve(args: StreamArgs) -> Result<StreamConfig, Failure> {
    let mut c: StreamConfig = config::load(args.config.as_deref())?;
    if args.script.is_some() || args.manifest.is_some() {
        c.script = args.script;
        c.manifest = args.manifest;
    }
    if args.trace.is_some() || args.bandwidth_mbps.is_some() {
        c.trace = args.trace;
        c.bandwidth_mbps = args.bandwidth_mbps;
    }
    c.viewport = args.viewport.or(c.viewport);
    c.preset = args.preset.unwrap_or(c.preset);
    c.presets = args.presets.or(c.presets);
    c.out = args.out.or(c.out);
    if let Some(m) = args.mode {
        c.mode = match m {
            ModeArg::CubeReuse => StaticMode::CubeReuse,
            ModeArg::FullRetransmit => StaticMode::FullRetransmit,
        };
    }
    c.baseline |= args.baseline;
    c.chunk_frames = args.chunk_frames.unwrap_or(c.chunk_frames);
    c.change_threshold = args.change_threshold.or(c.change_threshold);
    c.snapshot_every = args.snapshot_every.unwrap_or(c.snapshot_every);
    c.socket |= args.socket;
    c.propagation_ms = args.propagation_ms.unwrap_or(c.propagation_ms);
    c.loss_rate = args.loss_rate.unwrap_or(c.loss_rate);
    c.fps = args.fps.unwrap_or(c.fps);
    c.duration_s = args.duration_s.or(c.duration_s);
    c.wall |= args.wall;
    c.seed = args.seed.unwrap_or(c.seed);
    if c.script.is_some() == c.manifest.is_some() {
        return Err(usage(anyhow!("exactly one of --script or --manifest is required")));
    }
    if c.out.is_none() {
        return Err(usage(anyhow!("--out is required")));
    }
    if c.chunk_frames == 0 || c.fps == 0 {
        return Err(usage(anyhow!("--chunk-frames and --fps must be positive")));
    }
    if !(0.0..1.0).contains(&c.loss_rate) {
        return Err(usage(anyhow!("--loss-rate must be in [0, 1)")));
    }
    Ok(c)
}

fn profile(c: &StreamConfig) -> Result<DecimationProfile, Failure> {
    if let Some(path) = &c.presets {
        let extra = load_presets(path).map_err(data)?;
        if let Some(p) = extra.get(&c.preset) {
            return Ok(p.clone());
        }
    }
    DecimationProfile::preset(&c.preset).map_err(usage)
}

fn trace(c: &StreamConfig) -> Result<BandwidthTrace, Failure> {
    match (&c.trace, c.bandwidth_mbps) {
        (Some(p), _) => BandwidthTrace::from_file(p).map_err(data),
        (None, Some(m)) if m.is_finite() && m > 0.0 => Ok(BandwidthTrace::constant(m)),
        (None, Some(m)) => Err(usage(anyhow!("bandwidth must be positive, got {m}"))),
        (None, None) => Ok(BandwidthTrace::Unlimited),
    }
}

fn viewport(c: &StreamConfig) -> Result<Vec<ViewportSample>, Failure> {
    let Some(p) = &c.viewport else { return Ok(Vec::new()) };
    let text = std::fs::read_to_string(p)
        .with_context(|| format!("reading {}", p.display()))
        .map_err(data)?;
    parse_viewport_trace(&text)
        .with_context(|| format!("viewport trace {}", p.display()))
        .map_err(data)
}

/// Synchronized groups from a manifest; the first load error stops the stream.
struct ManifestGroups {
    frames: PlySequence,
    sync: Synchronizer,
    out: VecDeque<SyncedGroup>,
    done: bool,
    error: Rc<RefCell<Option<CaptureError>>>,
}

impl Iterator for ManifestGroups {
    type Item = SyncedGroup;

    fn next(&mut self) -> Option<SyncedGroup> {
        loop {
            if let Some(g) = self.out.pop_front() {
                return Some(g);
            }
            if self.done {
                return None;
            }
            match self.frames.next() {
                Some(Ok(f)) => self.out.extend(self.sync.push(f)),
                Some(Err(e)) => {
                    *self.error.borrow_mut() = Some(e);
                    self.done = true;
                }
                None => {
                    self.done = true;
                    self.out.extend(self.sync.finish());
                }
            }
        }
    }
}

fn session_failure(e: SessionError) -> Failure {
    let stage = e.stage();
    pipeline(anyhow::Error::new(e).context(format!("stage {stage}")))
}

fn run_one(c: &StreamConfig, cfg: &SessionConfig, trace: &BandwidthTrace, vp: &[ViewportSample]) -> Result<SessionOutput, Failure> {
    if let Some(path) = &c.script {
        let mut script = SceneScript::from_file(path).map_err(data)?;
        if let Some(d) = c.duration_s {
            script.duration_s = d;
        }
        let synth = SceneSynthesizer::new(script).map_err(data)?;
        let mut cfg = cfg.clone();
        cfg.slot = SlotDuration::from_fps(synth.script().fps);
        let ids = synth.camera_ids();
        run_session(SynthGroups::new(&synth), &ids, vp, trace, &cfg).map_err(session_failure)
    } else {
        let path = c.manifest.as_ref().unwrap();
        let manifest = Manifest::from_file(path).map_err(data)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let ids = manifest.camera_ids();
        let mut sc = SyncConfig::new(ids.clone());
        sc.slot = cfg.slot;
        let error = Rc::new(RefCell::new(None));
        let groups = ManifestGroups {
            frames: ingest_ply_sequence(dir, &manifest),
            sync: Synchronizer::new(sc),
            out: VecDeque::new(),
            done: false,
            error: error.clone(),
        };
        let out = run_session(groups, &ids, vp, trace, cfg).map_err(session_failure)?;
        if let Some(e) = error.borrow_mut().take() {
            return Err(data(anyhow::Error::new(e).context("stage capture")));
        }
        Ok(out)
    }
}

fn write_outputs(dir: &Path, out: &SessionOutput) -> Result<SessionReport, Failure> {
    create_dir(dir)?;
    write_file(&dir.join(LOG_FILE), out.log_text())?;
    write_file(&dir.join(DECISIONS_FILE), out.decision_text())?;
    let summary = serde_json::to_string_pretty(&out.summary).map_err(pipeline)?;
    write_file(&dir.join(SUMMARY_FILE), summary + "\n")?;
    if !out.snapshots.is_empty() {
        let snaps = dir.join(SNAPSHOT_DIR);
        create_dir(&snaps)?;
        for s in &out.snapshots {
            for (who, cloud) in [("client", &s.client), ("server", &s.server)] {
                let p = snaps.join(format!("chunk{:04}_slot{:06}_{who}.ply", s.chunk, s.slot));
                write_ply_file(&p, cloud, PlyEncoding::BinaryLittleEndian)
                    .with_context(|| format!("writing {}", p.display()))
                    .map_err(data)?;
            }
        }
    }
    Ok(SessionReport::from_records(&out.log))
}

fn print_run(label: &str, r: &SessionReport) {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    println!(
        "{label}: {} frames in {} chunks, dynamic {} Mbps, static {} Mbps, static share {}, startup {} s",
        r.frames,
        r.chunks,
        f(r.dynamic_mbps()),
        f(r.static_mbps()),
        f(r.static_share()),
        f(r.startup_s)
    );
}

pub fn run(args: StreamArgs) -> Outcome {
    let mut c = resolve(args)?;
    let prof = profile(&c)?;
    c.profile = Some(prof.clone());
    let tr = trace(&c)?;
    let vp = viewport(&c)?;
    let out_dir = c.out.clone().unwrap();

    let mut cfg = SessionConfig {
        seed: c.seed,
        profile: prof,
        chunk_frames: c.chunk_frames,
        slot: SlotDuration::from_fps(c.fps),
        mode: c.mode,
        propagation_s: c.propagation_ms / 1000.0,
        loss_rate: c.loss_rate,
        initial_estimate_mbps: c.initial_estimate_mbps,
        verify: true,
        measure_wall: c.wall,
        snapshot_every: c.snapshot_every,
        socket: c.socket,
        ..Default::default()
    };
    if let Some(t) = c.change_threshold {
        cfg.reuse.change_threshold = t;
    }

    let out = run_one(&c, &cfg, &tr, &vp)?;
    let report = write_outputs(&out_dir, &out)?;
    print_run("stream", &report);
    if let Some(s) = report.saving_factor() {
        println!("cube-update saving against full-scene accounting: {s:.1}x");
    }
    if out.summary.socket_match == Some(false) {
        return Err(pipeline(anyhow!("stage transport: socket client state differs from in-memory client")));
    }
    if c.baseline && c.mode == StaticMode::CubeReuse {
        let base_cfg = SessionConfig {
            mode: StaticMode::FullRetransmit,
            snapshot_every: 0,
            socket: false,
            ..cfg.clone()
        };
        let base = run_one(&c, &base_cfg, &tr, &vp)?;
        let base_report = write_outputs(&out_dir.join(BASELINE_DIR), &base)?;
        print_run("baseline", &base_report);
        if let Some(s) = baseline_saving(&report, &base_report) {
            println!("cube-update saving against full-retransmit baseline: {s:.1}x");
        }
    }
    write_resolved(&out_dir, &c)
}
