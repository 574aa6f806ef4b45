//! End-to-end streaming session over a simulated channel.
//!
//! A session is a discrete-event simulation on one thread. Each
//! synchronized group is calibrated, merged, segmented, decimated and fed
//! to scene reuse; every `chunk_frames` groups the scheduler picks levels
//! and the chunk's messages are framed, pushed through the channel and
//! decoded by the client. Stage latencies come from a deterministic cost
//! model so logs are reproducible; measured wall time is kept in its own
//! `wall_us` field.

use std::collections::{BTreeMap, VecDeque};
use std::io::BufWriter;
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::channel::{Channel, ChannelModel, DEFAULT_PROPAGATION_S};
use super::wire::{self, read_message, Message, MessageType, ProtocolError, ThroughputReport, ViewportReport};
use crate::calibration::{merge_available, CalibrationState, DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_REFRESH_INTERVAL};
use crate::capture::{CameraId, SceneSynthesizer, SlotDuration, SyncConfig, SyncedGroup, Synchronizer};
use crate::geometry::{Point, PointCloud, ReferenceFrame};
use crate::scene_reuse::{
    apply_update, assign_cubes, CubeGrid, CubeUpdate, ReuseConfig, SceneReuse, UpdateAction, ViewportSample,
};
use crate::segmentation::{
    decimate_frame, default_cylinders, segment, BodyPart, CylinderSpec, DecimationProfile, SegmentedFrame,
};
use crate::vabr::chunks::{payload_parts, static_message, update_bytes};
use crate::vabr::{
    build_dynamic_chunk, build_static_chunk, qoe, BandwidthTrace, DecisionRecord, LevelLadder, QoEConfig, Scheduler,
    VabrError, DEFAULT_CHUNK_FRAMES,
};
use crate::transport::wire::STATIC_MESSAGE_OVERHEAD;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] ProtocolError),
    #[error(transparent)]
    Vabr(#[from] VabrError),
    #[error("socket: {0}")]
    Socket(#[from] std::io::Error),
}

impl SessionError {
    /// Pipeline stage the error came from.
    pub fn stage(&self) -> &'static str {
        match self {
            SessionError::Stage { stage, .. } => stage,
            SessionError::Protocol(_) | SessionError::Wire(_) => "transport",
            SessionError::Vabr(_) => "vabr",
            SessionError::Socket(_) => "socket",
        }
    }
}

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> SessionError {
    SessionError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// How the static scene is transmitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StaticMode {
    /// Changed cubes only, scheduled from the residual budget.
    #[default]
    CubeReuse,
    /// Every frame's full static scene, sent as soon as it is processed.
    FullRetransmit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Capture,
    PcConstruction,
    Skeleton,
    Transmit,
    Calibration,
    Segmentation,
    Delivery,
    EndToEnd,
}

impl Stage {
    /// Per-camera stages followed by the server stages.
    pub const PIPELINE: [Stage; 6] = [
        Stage::Capture,
        Stage::PcConstruction,
        Stage::Skeleton,
        Stage::Transmit,
        Stage::Calibration,
        Stage::Segmentation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Capture => "capture",
            Stage::PcConstruction => "pc_construction",
            Stage::Skeleton => "skeleton",
            Stage::Transmit => "transmit",
            Stage::Calibration => "calibration",
            Stage::Segmentation => "segmentation",
            Stage::Delivery => "delivery",
            Stage::EndToEnd => "end_to_end",
        }
    }

    pub fn is_per_camera(self) -> bool {
        matches!(self, Stage::Capture | Stage::PcConstruction | Stage::Skeleton | Stage::Transmit)
    }
}

/// Latency of one stage: a fixed part plus a per-point part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub fixed_us: f64,
    pub per_point_ns: f64,
}

impl StageCost {
    pub const fn new(fixed_us: f64, per_point_ns: f64) -> Self {
        StageCost { fixed_us, per_point_ns }
    }

    pub fn at(&self, points: usize) -> i64 {
        (self.fixed_us + self.per_point_ns * points as f64 / 1000.0).round() as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub capture: StageCost,
    pub pc_construction: StageCost,
    pub skeleton: StageCost,
    /// Camera to server over the capture LAN.
    pub transmit: StageCost,
    pub calibration: StageCost,
    pub calibration_refresh: StageCost,
    /// Segmentation and decimation of the merged cloud.
    pub segmentation: StageCost,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            capture: StageCost::new(12_000.0, 40.0),
            pc_construction: StageCost::new(4_000.0, 20.0),
            skeleton: StageCost::new(30_000.0, 0.0),
            // 15 bytes per point over 1 Gbps
            transmit: StageCost::new(1_000.0, 120.0),
            calibration: StageCost::new(200.0, 0.0),
            calibration_refresh: StageCost::new(2_000.0, 0.0),
            segmentation: StageCost::new(3_000.0, 80.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub seed: u64,
    pub profile: DecimationProfile,
    pub ladder: LevelLadder,
    pub qoe: QoEConfig,
    pub chunk_frames: usize,
    pub slot: SlotDuration,
    pub reuse: ReuseConfig,
    pub mode: StaticMode,
    pub propagation_s: f64,
    pub loss_rate: f64,
    /// Throughput assumed before the first report arrives.
    pub initial_estimate_mbps: f64,
    pub cost: CostModel,
    pub calibration_interval: i64,
    pub confidence_threshold: f64,
    /// Compare client and server state at every chunk boundary.
    pub verify: bool,
    /// Record measured wall time of the server stages.
    pub measure_wall: bool,
    /// Keep a reconstruction snapshot every this many chunks (0: never).
    pub snapshot_every: usize,
    /// Mirror every framed byte over a loopback TCP socket.
    pub socket: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            seed: 0,
            profile: DecimationProfile::full(),
            ladder: LevelLadder::default(),
            qoe: QoEConfig::default(),
            chunk_frames: DEFAULT_CHUNK_FRAMES,
            slot: SlotDuration::default(),
            reuse: ReuseConfig::default(),
            mode: StaticMode::CubeReuse,
            propagation_s: DEFAULT_PROPAGATION_S,
            loss_rate: 0.0,
            initial_estimate_mbps: 20.0,
            cost: CostModel::default(),
            calibration_interval: DEFAULT_REFRESH_INTERVAL,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            verify: false,
            measure_wall: false,
            snapshot_every: 0,
            socket: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Down,
    Up,
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Session {
        timestamp_us: i64,
        preset: String,
        mode: StaticMode,
        seed: u64,
        chunk_frames: usize,
        slot_us: f64,
        cameras: Vec<CameraId>,
    },
    Stage {
        timestamp_us: i64,
        stage: Stage,
        frame: i64,
        chunk: u32,
        camera: Option<CameraId>,
        latency_us: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wall_us: Option<u64>,
    },
    Message {
        timestamp_us: i64,
        direction: Direction,
        kind: MessageType,
        chunk: Option<u32>,
        bytes: u64,
        level: Option<u8>,
    },
    Chunk {
        timestamp_us: i64,
        chunk: u32,
        frames: usize,
        dynamic_level: usize,
        dynamic_bytes: u64,
        static_bytes: u64,
        /// Body at the top level.
        full_dynamic_bytes: u64,
        /// Every frame's whole static scene, as full retransmission sends it.
        full_static_bytes: u64,
        body_points: u64,
        static_points: u64,
        static_cubes: usize,
        late: bool,
        ready_us: i64,
        arrival_us: i64,
        body_match: Option<bool>,
        static_match: Option<bool>,
    },
    End {
        timestamp_us: i64,
        frames: u64,
        chunks: u64,
        startup_us: i64,
        qoe: f64,
        delivered_bits: u64,
    },
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

/// Client-side reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub grid: CubeGrid,
    /// Body parts per slot, for the most recent chunks.
    pub body: BTreeMap<u32, BTreeMap<u32, Vec<PointCloud>>>,
    pub levels: BTreeMap<u32, u8>,
    pub bytes: u64,
    pub messages: u64,
    pub ended: bool,
    keep_chunks: u32,
}

impl ClientState {
    pub fn new(grid: crate::scene_reuse::GridConfig) -> Self {
        ClientState {
            grid: CubeGrid::new(grid),
            body: BTreeMap::new(),
            levels: BTreeMap::new(),
            bytes: 0,
            messages: 0,
            ended: false,
            keep_chunks: 2,
        }
    }

    pub fn receive(&mut self, bytes: &[u8]) -> Result<Message, SessionError> {
        let msg = wire::decode_exact(bytes)?;
        self.bytes += bytes.len() as u64;
        self.apply(&msg)?;
        Ok(msg)
    }

    pub fn apply(&mut self, msg: &Message) -> Result<(), SessionError> {
        if self.ended {
            return Err(SessionError::Protocol("message after END".into()));
        }
        self.messages += 1;
        match msg {
            Message::Hello => {}
            Message::End => self.ended = true,
            Message::DynamicChunk(p) => {
                if p.level != 0 {
                    return Err(SessionError::Protocol(format!("chunk {} base at level {}", p.chunk, p.level)));
                }
                if self.levels.contains_key(&p.chunk) {
                    return Err(SessionError::Protocol(format!("chunk {} sent twice", p.chunk)));
                }
                self.levels.insert(p.chunk, 0);
                self.body.insert(p.chunk, payload_parts(p));
                let keep_from = p.chunk.saturating_sub(self.keep_chunks - 1);
                self.body.retain(|k, _| *k >= keep_from);
            }
            Message::LayerUpgrade(p) => {
                let Some(level) = self.levels.get_mut(&p.chunk) else {
                    return Err(SessionError::Protocol(format!("upgrade for unknown chunk {}", p.chunk)));
                };
                if p.level as usize != *level as usize + 1 {
                    return Err(SessionError::Protocol(format!(
                        "chunk {} upgrade to level {} from level {}",
                        p.chunk, p.level, level
                    )));
                }
                *level = p.level;
                if let Some(frames) = self.body.get_mut(&p.chunk) {
                    for f in &p.frames {
                        let parts = frames
                            .entry(f.slot)
                            .or_insert_with(|| vec![PointCloud::default(); BodyPart::ALL.len()]);
                        for part in &f.parts {
                            parts[part.label as usize].points.extend_from_slice(&part.points);
                        }
                    }
                }
            }
            Message::StaticUpdate(s) => {
                for u in &s.updates {
                    match u.action {
                        UpdateAction::Clear => {
                            self.grid.cells.remove(&u.cell);
                        }
                        UpdateAction::Replace if u.points.is_empty() => {
                            self.grid.cells.remove(&u.cell);
                        }
                        UpdateAction::Replace => {
                            self.grid
                                .cells
                                .insert(u.cell, PointCloud::from_points(u.points.clone(), ReferenceFrame::World));
                        }
                    }
                }
            }
            Message::ViewportReport(_) | Message::ThroughputReport(_) => {
                return Err(SessionError::Protocol(format!("{:?} sent downstream", msg.message_type())));
            }
        }
        Ok(())
    }

    /// Body parts of `slot`, if held.
    pub fn body_at(&self, slot: u32) -> Option<&Vec<PointCloud>> {
        self.body.values().find_map(|c| c.get(&slot))
    }

    /// Body of `slot` merged with the static grid.
    pub fn reconstruction(&self, slot: u32) -> PointCloud {
        let mut cloud = self.grid.to_cloud();
        if let Some(parts) = self.body_at(slot) {
            for p in parts {
                cloud.extend_from(p);
            }
        }
        cloud
    }
}

/// Per-group output of the server pipeline.
#[derive(Debug, Clone)]
pub struct ProcessedFrame {
    pub slot: i64,
    /// Decimated body and the merged static scene, at wire precision.
    pub frame: SegmentedFrame,
    pub camera_points: Vec<(CameraId, usize)>,
    pub refreshed: bool,
    pub excluded: Vec<CameraId>,
    pub body_points_before: usize,
    /// Measured wall time of calibration, and of merge through reuse.
    pub wall_us: [u64; 2],
}

/// Server-side processing from synchronized group to decimated frame.
#[derive(Debug, Clone)]
pub struct FramePipeline {
    pub calibration: CalibrationState,
    pub cylinders: Vec<CylinderSpec>,
    pub profile: DecimationProfile,
    pub seed: u64,
    pub reuse: SceneReuse,
    pub mode: StaticMode,
}

impl FramePipeline {
    pub fn new(cameras: &[CameraId], cfg: &SessionConfig) -> Self {
        let mut calibration = CalibrationState::for_cameras(cameras).with_interval(cfg.calibration_interval);
        calibration.confidence_threshold = cfg.confidence_threshold;
        FramePipeline {
            calibration,
            cylinders: default_cylinders(),
            profile: cfg.profile.clone(),
            seed: cfg.seed,
            reuse: SceneReuse::new(cfg.reuse),
            mode: cfg.mode,
        }
    }

    pub fn process(&mut self, group: &SyncedGroup) -> Result<ProcessedFrame, SessionError> {
        let t0 = Instant::now();
        let refreshed = self.calibration.refresh(group);
        let t1 = Instant::now();
        let merged = merge_available(group, &self.calibration);
        let cloud = merged.cloud.quantized();
        let slot = group.slot_index.max(0) as u64;
        let seg = match self.calibration.fused_skeleton(group) {
            Some(skel) => segment(&cloud, &skel, &self.cylinders, slot).map_err(|e| stage_err("segmentation", e))?,
            None => {
                let mut f = SegmentedFrame::empty(slot);
                f.static_scene = cloud;
                f
            }
        };
        let body_points_before = seg.body_point_count();
        let frame = decimate_frame(&seg, &self.profile, self.seed);
        if self.mode == StaticMode::CubeReuse {
            self.reuse
                .observe(&frame.static_scene, group.slot_index)
                .map_err(|e| stage_err("scene_reuse", e))?;
        }
        let t2 = Instant::now();
        Ok(ProcessedFrame {
            slot: group.slot_index,
            camera_points: group.frames.iter().map(|f| (f.camera_id(), f.cloud.len())).collect(),
            refreshed,
            excluded: merged.excluded,
            body_points_before,
            frame,
            wall_us: [(t1 - t0).as_micros() as u64, (t2 - t1).as_micros() as u64],
        })
    }
}

/// Lazily renders a synthetic scene and synchronizes its frames.
pub struct SynthGroups<'a> {
    synth: &'a SceneSynthesizer,
    seq: u64,
    end: u64,
    sync: Synchronizer,
    out: VecDeque<SyncedGroup>,
    finished: bool,
}

impl<'a> SynthGroups<'a> {
    pub fn new(synth: &'a SceneSynthesizer) -> Self {
        Self::with_frames(synth, synth.script().frame_count())
    }

    pub fn with_frames(synth: &'a SceneSynthesizer, frames: u64) -> Self {
        let mut cfg = SyncConfig::new(synth.camera_ids());
        cfg.slot = SlotDuration::from_fps(synth.script().fps);
        SynthGroups {
            synth,
            seq: 0,
            end: frames,
            sync: Synchronizer::new(cfg),
            out: VecDeque::new(),
            finished: false,
        }
    }

    pub fn stats(&self) -> crate::capture::SyncStats {
        self.sync.stats()
    }
}

impl Iterator for SynthGroups<'_> {
    type Item = SyncedGroup;

    fn next(&mut self) -> Option<SyncedGroup> {
        loop {
            if let Some(g) = self.out.pop_front() {
                return Some(g);
            }
            if self.seq < self.end {
                for f in self.synth.captured(self.seq) {
                    self.out.extend(self.sync.push(f));
                }
                self.seq += 1;
            } else if !self.finished {
                self.finished = true;
                self.out.extend(self.sync.finish());
            } else {
                return None;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub chunk: u32,
    pub slot: u32,
    pub client: PointCloud,
    pub server: PointCloud,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub frames: u64,
    pub chunks: u64,
    pub dynamic_bytes: u64,
    pub static_bytes: u64,
    pub full_static_bytes: u64,
    pub full_dynamic_bytes: u64,
    pub delivered_bits: u64,
    /// First service start and last service end on the downlink.
    pub link_busy_s: (f64, f64),
    pub startup_s: f64,
    pub qoe: f64,
    pub late_chunks: u64,
    pub body_mismatches: u64,
    pub static_mismatches: u64,
    pub socket_match: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct SessionOutput {
    pub log: Vec<LogRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub summary: SessionSummary,
    pub snapshots: Vec<Snapshot>,
    pub client: ClientState,
}

impl SessionOutput {
    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| r.to_line() + "\n").collect()
    }

    pub fn decision_text(&self) -> String {
        self.decisions.iter().map(|r| r.to_line() + "\n").collect()
    }
}

struct FrameTiming {
    slot: i64,
    capture_us: i64,
    cameras: Vec<(CameraId, [i64; 4])>,
    calibration_us: i64,
    segmentation_us: i64,
    wall_us: [u64; 2],
    ready_us: i64,
}

struct Uplink {
    arrival_s: f64,
    bytes: Vec<u8>,
}

struct TcpMirror {
    writer: BufWriter<TcpStream>,
    client: thread::JoinHandle<Result<ClientState, SessionError>>,
}

impl TcpMirror {
    fn start(grid: crate::scene_reuse::GridConfig) -> Result<Self, SessionError> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let client = thread::spawn(move || -> Result<ClientState, SessionError> {
            let mut stream = std::io::BufReader::new(TcpStream::connect(addr)?);
            let mut state = ClientState::new(grid);
            loop {
                match read_message(&mut stream) {
                    Ok(Some(m)) => {
                        state.bytes += m.encoded_len() as u64;
                        state.apply(&m)?;
                        if m == Message::End {
                            return Ok(state);
                        }
                    }
                    Ok(None) => return Err(SessionError::Protocol("stream closed before END".into())),
                    Err(wire::StreamError::Io(e)) => return Err(e.into()),
                    Err(wire::StreamError::Protocol(e)) => return Err(e.into()),
                }
            }
        });
        let (stream, _) = listener.accept()?;
        Ok(TcpMirror {
            writer: BufWriter::new(stream),
            client,
        })
    }
}

fn us(s: f64) -> i64 {
    (s * 1e6).round() as i64
}

fn full_static_bytes(grid: &CubeGrid) -> u64 {
    STATIC_MESSAGE_OVERHEAD as u64 + grid.cells.values().map(|c| update_bytes(c.len())).sum::<u64>()
}

fn full_static_updates(grid: &CubeGrid, previous: &CubeGrid, slot: i64) -> Vec<CubeUpdate> {
    let mut out: Vec<CubeUpdate> = grid
        .cells
        .iter()
        .map(|(idx, cell)| CubeUpdate {
            index: *idx,
            action: UpdateAction::Replace,
            points: cell.clone(),
            fraction: 1.0,
            normalized_cd: 1.0,
            saliency: 0.0,
            level: crate::scene_reuse::DetectLevel::High,
            detected_slot: slot,
        })
        .collect();
    for idx in previous.cells.keys().filter(|k| !grid.cells.contains_key(*k)) {
        out.push(CubeUpdate {
            index: *idx,
            action: UpdateAction::Clear,
            points: PointCloud::default(),
            fraction: 1.0,
            normalized_cd: 1.0,
            saliency: 0.0,
            level: crate::scene_reuse::DetectLevel::High,
            detected_slot: slot,
        });
    }
    out
}

/// State shared by the send path.
struct Downlink<'a> {
    channel: Channel,
    client: ClientState,
    mirror: Option<TcpMirror>,
    log: &'a mut Vec<LogRecord>,
    delivered_bits: u64,
    first_start: f64,
    last_finish: f64,
}

impl Downlink<'_> {
    /// Frames, sends and delivers one message; returns (start, finish, arrival).
    fn send(&mut self, at_s: f64, msg: &Message) -> Result<(f64, f64, f64), SessionError> {
        let bytes = wire::encode(msg);
        let d = self.channel.send(at_s, bytes.len() as u64 * 8);
        if !d.arrival_s.is_finite() {
            return Err(stage_err("delivery", "channel never delivers: bandwidth stays at zero"));
        }
        self.delivered_bits += d.bits;
        self.first_start = self.first_start.min(d.start_s);
        self.last_finish = self.last_finish.max(d.finish_s);
        if let Some(m) = &mut self.mirror {
            std::io::Write::write_all(&mut m.writer, &bytes)?;
        }
        self.client.receive(&bytes)?;
        let (chunk, level) = match msg {
            Message::DynamicChunk(p) | Message::LayerUpgrade(p) => (Some(p.chunk), Some(p.level)),
            Message::StaticUpdate(s) => (Some(s.chunk), Some(s.level)),
            _ => (None, None),
        };
        self.log.push(LogRecord::Message {
            timestamp_us: us(d.arrival_s),
            direction: Direction::Down,
            kind: msg.message_type(),
            chunk,
            bytes: bytes.len() as u64,
            level,
        });
        Ok((d.start_s, d.finish_s, d.arrival_s))
    }
}

/// Runs a full session. `viewport` samples must be time ordered.
pub fn run_session(
    groups: impl IntoIterator<Item = SyncedGroup>,
    cameras: &[CameraId],
    viewport: &[ViewportSample],
    trace: &BandwidthTrace,
    cfg: &SessionConfig,
) -> Result<SessionOutput, SessionError> {
    if cameras.is_empty() {
        return Err(stage_err("capture", "no cameras"));
    }
    if cfg.chunk_frames == 0 {
        return Err(stage_err("vabr", "chunk must hold at least one frame"));
    }
    let chunk_s = cfg.slot.as_secs_f64() * cfg.chunk_frames as f64;
    let mut pipeline = FramePipeline::new(cameras, cfg);
    let initial_bps = if trace.is_unlimited() { f64::INFINITY } else { cfg.initial_estimate_mbps * 1e6 };
    let mut scheduler = Scheduler::new(cfg.qoe, initial_bps, chunk_s);
    let model = ChannelModel::new(trace.clone())
        .with_propagation(cfg.propagation_s)
        .with_loss(cfg.loss_rate, cfg.seed);
    let mut log = Vec::new();
    log.push(LogRecord::Session {
        timestamp_us: 0,
        preset: cfg.profile.name.clone(),
        mode: cfg.mode,
        seed: cfg.seed,
        chunk_frames: cfg.chunk_frames,
        slot_us: cfg.slot.as_secs_f64() * 1e6,
        cameras: cameras.to_vec(),
    });
    let mirror = if cfg.socket { Some(TcpMirror::start(cfg.reuse.grid)?) } else { None };
    let mut down = Downlink {
        channel: Channel::new(model),
        client: ClientState::new(cfg.reuse.grid),
        mirror,
        log: &mut log,
        delivered_bits: 0,
        first_start: f64::INFINITY,
        last_finish: 0.0,
    };
    down.send(0.0, &Message::Hello)?;

    let mut summary = SessionSummary::default();
    let mut snapshots = Vec::new();
    let mut uplink: VecDeque<Uplink> = VecDeque::new();
    let mut next_viewport = 0usize;
    let mut chunk_frames: Vec<SegmentedFrame> = Vec::new();
    let mut timings: Vec<FrameTiming> = Vec::new();
    let mut chunk_full_static = 0u64;
    let mut chunk_static_points = 0u64;
    let mut chunk_index: u32 = 0;
    let mut rates: Vec<f64> = Vec::new();
    let mut startup_s: Option<f64> = None;
    let mut last_sent_grid = CubeGrid::new(cfg.reuse.grid);
    let mut full_mode_static_bytes = 0u64;

    let mut groups = groups.into_iter().peekable();
    while let Some(group) = groups.next() {
        let slot_us = cfg.slot.slot_start(group.slot_index);
        // viewport reports that reached the server by this slot
        while next_viewport < viewport.len() && viewport[next_viewport].timestamp_us + us(cfg.propagation_s) <= slot_us {
            let s = &viewport[next_viewport];
            let o = s.orientation;
            let msg = Message::ViewportReport(ViewportReport {
                timestamp_us: s.timestamp_us,
                position: [s.position.x, s.position.y, s.position.z],
                yaw: o.yaw,
                pitch: o.pitch,
                roll: o.roll,
            });
            let bytes = wire::encode(&msg);
            let Message::ViewportReport(v) = wire::decode_exact(&bytes)? else {
                unreachable!()
            };
            pipeline.push_viewport(&v);
            log_up(down.log, s.timestamp_us + us(cfg.propagation_s), MessageType::ViewportReport, None, bytes.len());
            next_viewport += 1;
        }

        let p = pipeline.process(&group)?;
        let cam_costs: Vec<(CameraId, [i64; 4])> = p
            .camera_points
            .iter()
            .map(|&(id, n)| {
                (
                    id,
                    [
                        cfg.cost.capture.at(n),
                        cfg.cost.pc_construction.at(n),
                        cfg.cost.skeleton.at(n),
                        cfg.cost.transmit.at(n),
                    ],
                )
            })
            .collect();
        let cam_max = cam_costs.iter().map(|(_, c)| c.iter().sum::<i64>()).max().unwrap_or(0);
        let calib = if p.refreshed { cfg.cost.calibration_refresh } else { cfg.cost.calibration }.at(0);
        let merged_points = p.frame.total_point_count() + p.body_points_before - p.frame.body_point_count();
        let seg = cfg.cost.segmentation.at(merged_points);
        let ready_us = slot_us + cam_max + calib + seg;

        let grid = match cfg.mode {
            StaticMode::CubeReuse => pipeline.reuse.current().clone(),
            StaticMode::FullRetransmit => assign_cubes(&p.frame.static_scene, cfg.reuse.grid),
        };
        chunk_full_static += full_static_bytes(&grid);
        chunk_static_points += p.frame.static_scene.len() as u64;
        if cfg.mode == StaticMode::FullRetransmit {
            let updates = full_static_updates(&grid, &last_sent_grid, p.slot);
            let msg = static_message(chunk_index, 0, &updates);
            full_mode_static_bytes += msg.encoded_len() as u64;
            down.send(ready_us as f64 / 1e6, &msg)?;
            last_sent_grid = grid;
        }
        timings.push(FrameTiming {
            slot: p.slot,
            capture_us: slot_us,
            cameras: cam_costs,
            calibration_us: calib,
            segmentation_us: seg,
            wall_us: p.wall_us,
            ready_us,
        });
        let mut body_only = p.frame;
        body_only.static_scene = PointCloud::default();
        chunk_frames.push(body_only);

        let last = groups.peek().is_none();
        if chunk_frames.len() < cfg.chunk_frames && !last {
            continue;
        }

        // chunk boundary
        let ready_s = timings.iter().map(|t| t.ready_us).max().unwrap() as f64 / 1e6;
        while uplink.front().is_some_and(|u| u.arrival_s <= ready_s) {
            let u = uplink.pop_front().unwrap();
            if let Message::ThroughputReport(r) = wire::decode_exact(&u.bytes)? {
                let bps = if r.duration_us == 0 {
                    f64::INFINITY
                } else {
                    r.bytes as f64 * 8.0 / (r.duration_us as f64 / 1e6)
                };
                scheduler.observe(r.chunk, bps);
            }
        }
        let dynamic = build_dynamic_chunk(chunk_index, &chunk_frames, &cfg.ladder, cfg.seed);
        let pending = match cfg.mode {
            StaticMode::CubeReuse => pipeline.reuse.pending(),
            StaticMode::FullRetransmit => Vec::new(),
        };
        let stat = build_static_chunk(chunk_index, &pending, cfg.ladder.max_level(), cfg.seed);
        let decision = scheduler.decide(&dynamic, &stat, cfg.seed ^ chunk_index as u64)?;
        pipeline.reuse.commit(&decision.static_updates);

        let mut first_start = f64::INFINITY;
        let mut last_finish: f64 = 0.0;
        let mut arrival: f64 = 0.0;
        let mut chunk_bytes = 0u64;
        for (l, msg) in dynamic.messages(decision.dynamic_level).iter().enumerate() {
            let (s, f, a) = down.send(ready_s, msg)?;
            if l == 0 && startup_s.is_none() {
                startup_s = Some(a);
            }
            first_start = first_start.min(s);
            last_finish = last_finish.max(f);
            arrival = a;
            chunk_bytes += msg.encoded_len() as u64;
        }
        let mut static_bytes = 0;
        if !decision.static_updates.is_empty() {
            let level = decision.static_level.unwrap_or(0) as u8;
            let msg = static_message(chunk_index, level, &decision.static_updates);
            static_bytes = msg.encoded_len() as u64;
            let (s, f, a) = down.send(ready_s, &msg)?;
            first_start = first_start.min(s);
            last_finish = last_finish.max(f);
            arrival = a;
            chunk_bytes += static_bytes;
        }
        if cfg.mode == StaticMode::FullRetransmit {
            static_bytes = std::mem::take(&mut full_mode_static_bytes);
        }

        // client acknowledges the chunk
        let report = Message::ThroughputReport(ThroughputReport {
            chunk: chunk_index,
            bytes: chunk_bytes,
            duration_us: us((last_finish - first_start).max(0.0)) as u64,
        });
        let bytes = wire::encode(&report);
        log_up(down.log, us(arrival + cfg.propagation_s), MessageType::ThroughputReport, Some(chunk_index), bytes.len());
        uplink.push_back(Uplink {
            arrival_s: arrival + cfg.propagation_s,
            bytes,
        });

        let level_bytes = dynamic.level_bytes[decision.dynamic_level];
        rates.push(level_bytes as f64 * 8.0 / chunk_s);
        let delivery_us = us(arrival) - us(ready_s);
        for t in &timings {
            emit_frame(down.log, t, chunk_index, delivery_us, us(arrival), cfg.measure_wall);
        }

        let (body_match, static_match) = if cfg.verify {
            let sent = payload_parts(&dynamic.level_payload(decision.dynamic_level));
            let body_ok = chunk_frames.iter().all(|f| {
                let held = down.client.body_at(f.slot_index as u32);
                let expected = sent.get(&(f.slot_index as u32));
                BodyPart::ALL.iter().all(|bp| {
                    let want = expected.map(|p| &p[bp.index()]);
                    match (held, want) {
                        (Some(h), Some(w)) => h[bp.index()].same_points(w),
                        (Some(h), None) => h[bp.index()].is_empty(),
                        (None, Some(w)) => w.is_empty(),
                        (None, None) => true,
                    }
                })
            });
            // at the top level the sent body is the whole decimated frame
            let body_ok = body_ok
                && (decision.dynamic_level < cfg.ladder.max_level()
                    || chunk_frames.iter().all(|f| {
                        let held = down.client.body_at(f.slot_index as u32);
                        BodyPart::ALL.iter().all(|bp| match held {
                            Some(parts) => parts[bp.index()].same_points(f.part(*bp)),
                            None => f.part(*bp).is_empty(),
                        })
                    }));
            let static_ok = grids_equal(&down.client.grid, &server_grid(&pipeline, cfg, &last_sent_grid));
            summary.body_mismatches += !body_ok as u64;
            summary.static_mismatches += !static_ok as u64;
            (Some(body_ok), Some(static_ok))
        } else {
            (None, None)
        };

        if cfg.snapshot_every > 0 && (chunk_index as usize).is_multiple_of(cfg.snapshot_every) {
            let lastf = chunk_frames.last().unwrap();
            let slot = lastf.slot_index as u32;
            let mut server = server_grid(&pipeline, cfg, &last_sent_grid).to_cloud();
            server.extend_from(&lastf.body());
            snapshots.push(Snapshot {
                chunk: chunk_index,
                slot,
                client: down.client.reconstruction(slot),
                server,
            });
        }

        let body_points: u64 = dynamic.level_points[decision.dynamic_level];
        down.log.push(LogRecord::Chunk {
            timestamp_us: us(arrival),
            chunk: chunk_index,
            frames: chunk_frames.len(),
            dynamic_level: decision.dynamic_level,
            dynamic_bytes: level_bytes,
            static_bytes,
            full_dynamic_bytes: *dynamic.level_bytes.last().unwrap(),
            full_static_bytes: chunk_full_static,
            body_points,
            static_points: chunk_static_points,
            static_cubes: decision.static_updates.len(),
            late: decision.record.late,
            ready_us: us(ready_s),
            arrival_us: us(arrival),
            body_match,
            static_match,
        });
        summary.chunks += 1;
        summary.frames += chunk_frames.len() as u64;
        summary.dynamic_bytes += level_bytes;
        summary.static_bytes += static_bytes;
        summary.full_static_bytes += chunk_full_static;
        summary.full_dynamic_bytes += *dynamic.level_bytes.last().unwrap();
        summary.late_chunks += decision.record.late as u64;

        chunk_frames.clear();
        timings.clear();
        chunk_full_static = 0;
        chunk_static_points = 0;
        chunk_index += 1;
    }

    let end_at = down.channel.busy_until().max(0.0);
    down.send(end_at, &Message::End)?;
    let startup = startup_s.unwrap_or(0.0);
    let session_qoe = if rates.is_empty() { 0.0 } else { qoe(&rates, startup, &cfg.qoe) };
    summary.delivered_bits = down.delivered_bits;
    summary.link_busy_s = (down.first_start, down.last_finish);
    summary.startup_s = startup;
    summary.qoe = session_qoe;
    let mirror = down.mirror.take();
    let client = down.client.clone();
    let delivered = down.delivered_bits;
    log.push(LogRecord::End {
        timestamp_us: us(end_at),
        frames: summary.frames,
        chunks: summary.chunks,
        startup_us: us(startup),
        qoe: session_qoe,
        delivered_bits: delivered,
    });
    if let Some(mut m) = mirror {
        std::io::Write::flush(&mut m.writer)?;
        drop(m.writer);
        let remote = m
            .client
            .join()
            .map_err(|_| SessionError::Protocol("socket client panicked".into()))??;
        summary.socket_match = Some(remote == client);
    }
    Ok(SessionOutput {
        log,
        decisions: scheduler.log,
        summary,
        snapshots,
        client,
    })
}

impl FramePipeline {
    pub fn push_viewport(&mut self, v: &ViewportReport) {
        self.reuse.push_viewport(ViewportSample::new(
            v.timestamp_us,
            nalgebra::Vector3::new(v.position[0], v.position[1], v.position[2]),
            v.yaw,
            v.pitch,
            v.roll,
        ));
    }
}

fn server_grid(pipeline: &FramePipeline, cfg: &SessionConfig, last_sent: &CubeGrid) -> CubeGrid {
    match cfg.mode {
        StaticMode::CubeReuse => pipeline.reuse.reference.clone(),
        StaticMode::FullRetransmit => last_sent.clone(),
    }
}

/// Cell-wise multiset equality.
pub fn grids_equal(a: &CubeGrid, b: &CubeGrid) -> bool {
    a.cells.len() == b.cells.len()
        && a
            .cells
            .iter()
            .all(|(k, v)| b.cells.get(k).is_some_and(|w| v.same_points(w)))
}

/// Applies server-side updates to a grid the way the client will.
pub fn apply_updates(grid: &mut CubeGrid, updates: &[CubeUpdate]) {
    for u in updates {
        apply_update(grid, u);
    }
}

fn log_up(log: &mut Vec<LogRecord>, at_us: i64, kind: MessageType, chunk: Option<u32>, bytes: usize) {
    log.push(LogRecord::Message {
        timestamp_us: at_us,
        direction: Direction::Up,
        kind,
        chunk,
        bytes: bytes as u64,
        level: None,
    });
}

fn emit_frame(log: &mut Vec<LogRecord>, t: &FrameTiming, chunk: u32, delivery_us: i64, arrival_us: i64, wall: bool) {
    let mut cam_max = 0;
    for (id, c) in &t.cameras {
        let mut at = t.capture_us;
        for (stage, lat) in [Stage::Capture, Stage::PcConstruction, Stage::Skeleton, Stage::Transmit].iter().zip(c) {
            at += lat;
            log.push(LogRecord::Stage {
                timestamp_us: at,
                stage: *stage,
                frame: t.slot,
                chunk,
                camera: Some(*id),
                latency_us: *lat,
                wall_us: None,
            });
        }
        cam_max = cam_max.max(at - t.capture_us);
    }
    let mut at = t.capture_us + cam_max;
    for (stage, lat, w) in [
        (Stage::Calibration, t.calibration_us, t.wall_us[0]),
        (Stage::Segmentation, t.segmentation_us, t.wall_us[1]),
    ] {
        at += lat;
        log.push(LogRecord::Stage {
            timestamp_us: at,
            stage,
            frame: t.slot,
            chunk,
            camera: None,
            latency_us: lat,
            wall_us: wall.then_some(w),
        });
    }
    debug_assert_eq!(at, t.ready_us);
    log.push(LogRecord::Stage {
        timestamp_us: arrival_us,
        stage: Stage::Delivery,
        frame: t.slot,
        chunk,
        camera: None,
        latency_us: delivery_us,
        wall_us: None,
    });
    log.push(LogRecord::Stage {
        timestamp_us: arrival_us,
        stage: Stage::EndToEnd,
        frame: t.slot,
        chunk,
        camera: None,
        latency_us: cam_max + t.calibration_us + t.segmentation_us + delivery_us,
        wall_us: None,
    });
}

/// Cloud of one client body slot, merged.
pub fn body_cloud(parts: &[PointCloud]) -> PointCloud {
    let pts: Vec<Point> = parts.iter().flat_map(|p| p.points.iter().copied()).collect();
    PointCloud::from_points(pts, ReferenceFrame::World)
}
