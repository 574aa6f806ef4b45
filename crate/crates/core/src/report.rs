//! Aggregation of session logs into bandwidth and latency tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::transport::session::{LogRecord, Stage, StaticMode};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: {event} record is missing columns: {}", columns.join(", "))]
    MissingColumns {
        line: usize,
        event: String,
        columns: Vec<String>,
    },
    #[error("line {line}: unknown event `{event}`")]
    UnknownEvent { line: usize, event: String },
    #[error("log has no records")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn required(event: &str) -> Option<&'static [&'static str]> {
    Some(match event {
        "session" => &["timestamp_us", "preset", "mode", "seed", "chunk_frames", "slot_us", "cameras"],
        "stage" => &["timestamp_us", "stage", "frame", "chunk", "camera", "latency_us"],
        "message" => &["timestamp_us", "direction", "kind", "chunk", "bytes", "level"],
        "chunk" => &[
            "timestamp_us",
            "chunk",
            "frames",
            "dynamic_level",
            "dynamic_bytes",
            "static_bytes",
            "full_dynamic_bytes",
            "full_static_bytes",
            "body_points",
            "static_points",
            "static_cubes",
            "late",
            "ready_us",
            "arrival_us",
            "body_match",
            "static_match",
        ],
        "end" => &["timestamp_us", "frames", "chunks", "startup_us", "qoe", "delivered_bits"],
        _ => return None,
    })
}

/// Parses a JSON-lines session log. Blank lines are skipped.
pub fn parse_log(text: &str) -> Result<Vec<LogRecord>, ReportError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(raw).map_err(|e| ReportError::Json {
            line,
            message: e.to_string(),
        })?;
        let Some(obj) = v.as_object() else {
            return Err(ReportError::Json {
                line,
                message: "record is not an object".into(),
            });
        };
        let Some(event) = obj.get("event").and_then(Value::as_str) else {
            return Err(ReportError::MissingColumns {
                line,
                event: "?".into(),
                columns: vec!["event".into()],
            });
        };
        let Some(cols) = required(event) else {
            return Err(ReportError::UnknownEvent {
                line,
                event: event.into(),
            });
        };
        let missing: Vec<String> = cols.iter().filter(|c| !obj.contains_key(**c)).map(|c| c.to_string()).collect();
        if !missing.is_empty() {
            return Err(ReportError::MissingColumns {
                line,
                event: event.into(),
                columns: missing,
            });
        }
        out.push(serde_json::from_value(v).map_err(|e| ReportError::Json {
            line,
            message: e.to_string(),
        })?);
    }
    if out.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(out)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_log(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub stage: Stage,
    /// Mean over frames of the per-frame maximum across cameras.
    pub mean_ms: f64,
    pub max_ms: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionReport {
    pub preset: Option<String>,
    pub mode: Option<StaticMode>,
    pub frames: u64,
    pub chunks: u64,
    pub duration_s: Option<f64>,
    pub dynamic_bytes: u64,
    pub static_bytes: u64,
    pub full_dynamic_bytes: u64,
    pub full_static_bytes: u64,
    pub body_points: u64,
    pub static_points: u64,
    pub late_chunks: u64,
    pub level_histogram: BTreeMap<usize, u64>,
    pub latency: Vec<LatencyRow>,
    pub startup_s: Option<f64>,
    pub qoe: Option<f64>,
}

fn share(a: u64, b: u64) -> Option<f64> {
    (a + b > 0).then(|| a as f64 / (a + b) as f64)
}

impl SessionReport {
    pub fn from_records(records: &[LogRecord]) -> Self {
        let mut r = SessionReport {
            preset: None,
            mode: None,
            frames: 0,
            chunks: 0,
            duration_s: None,
            dynamic_bytes: 0,
            static_bytes: 0,
            full_dynamic_bytes: 0,
            full_static_bytes: 0,
            body_points: 0,
            static_points: 0,
            late_chunks: 0,
            level_histogram: BTreeMap::new(),
            latency: Vec::new(),
            startup_s: None,
            qoe: None,
        };
        let mut slot_us = None;
        // (stage, frame) -> max latency across cameras
        let mut per_frame: BTreeMap<(Stage, i64), i64> = BTreeMap::new();
        for rec in records {
            match rec {
                LogRecord::Session {
                    preset, mode, slot_us: s, ..
                } => {
                    r.preset = Some(preset.clone());
                    r.mode = Some(*mode);
                    slot_us = Some(*s);
                }
                LogRecord::Stage {
                    stage, frame, latency_us, ..
                } => {
                    let e = per_frame.entry((*stage, *frame)).or_insert(i64::MIN);
                    *e = (*e).max(*latency_us);
                }
                LogRecord::Message { .. } => {}
                LogRecord::Chunk {
                    frames,
                    dynamic_level,
                    dynamic_bytes,
                    static_bytes,
                    full_dynamic_bytes,
                    full_static_bytes,
                    body_points,
                    static_points,
                    late,
                    ..
                } => {
                    r.chunks += 1;
                    r.frames += *frames as u64;
                    r.dynamic_bytes += dynamic_bytes;
                    r.static_bytes += static_bytes;
                    r.full_dynamic_bytes += full_dynamic_bytes;
                    r.full_static_bytes += full_static_bytes;
                    r.body_points += body_points;
                    r.static_points += static_points;
                    r.late_chunks += *late as u64;
                    *r.level_histogram.entry(*dynamic_level).or_default() += 1;
                }
                LogRecord::End { startup_us, qoe, .. } => {
                    r.startup_s = Some(*startup_us as f64 / 1e6);
                    r.qoe = Some(*qoe);
                }
            }
        }
        if let Some(s) = slot_us {
            if r.frames > 0 {
                r.duration_s = Some(r.frames as f64 * s / 1e6);
            }
        }
        let mut by_stage: BTreeMap<Stage, Vec<i64>> = BTreeMap::new();
        for ((stage, _), v) in per_frame {
            by_stage.entry(stage).or_default().push(v);
        }
        r.latency = by_stage
            .into_iter()
            .map(|(stage, v)| LatencyRow {
                stage,
                mean_ms: v.iter().sum::<i64>() as f64 / v.len() as f64 / 1000.0,
                max_ms: *v.iter().max().unwrap() as f64 / 1000.0,
                frames: v.len(),
            })
            .collect();
        r
    }

    pub fn stage_ms(&self, stage: Stage) -> Option<f64> {
        self.latency.iter().find(|l| l.stage == stage).map(|l| l.mean_ms)
    }

    /// Sum of the capture-to-processed stage means, when all are present.
    pub fn pipeline_ms(&self) -> Option<f64> {
        Stage::PIPELINE.iter().map(|s| self.stage_ms(*s)).sum()
    }

    /// Static share of the bytes actually sent.
    pub fn static_share(&self) -> Option<f64> {
        share(self.static_bytes, self.dynamic_bytes)
    }

    pub fn dynamic_share(&self) -> Option<f64> {
        share(self.dynamic_bytes, self.static_bytes)
    }

    /// Static share if the whole scene and full body were sent every frame.
    pub fn raw_static_share(&self) -> Option<f64> {
        share(self.full_static_bytes, self.full_dynamic_bytes)
    }

    pub fn static_point_share(&self) -> Option<f64> {
        share(self.static_points, self.body_points)
    }

    /// Full-scene retransmission bytes over cube-update bytes.
    pub fn saving_factor(&self) -> Option<f64> {
        (self.static_bytes > 0).then(|| self.full_static_bytes as f64 / self.static_bytes as f64)
    }

    fn mbps(&self, bytes: u64) -> Option<f64> {
        self.duration_s.filter(|d| *d > 0.0).map(|d| bytes as f64 * 8.0 / d / 1e6)
    }

    pub fn dynamic_mbps(&self) -> Option<f64> {
        self.mbps(self.dynamic_bytes)
    }

    pub fn static_mbps(&self) -> Option<f64> {
        self.mbps(self.static_bytes)
    }

    pub fn full_static_mbps(&self) -> Option<f64> {
        self.mbps(self.full_static_bytes)
    }
}

/// Cube-update static bytes against a full-retransmission run on the same input.
pub fn baseline_saving(reuse: &SessionReport, full: &SessionReport) -> Option<f64> {
    (reuse.static_bytes > 0).then(|| full.static_bytes as f64 / reuse.static_bytes as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthRow {
    pub preset: String,
    pub dynamic_mbps: Option<f64>,
    pub static_mbps: Option<f64>,
    pub total_mbps: Option<f64>,
    /// Dynamic bytes over those of the `base` preset.
    pub ratio_to_base: Option<f64>,
}

pub fn bandwidth_table(reports: &[SessionReport]) -> Vec<BandwidthRow> {
    let base = reports
        .iter()
        .find(|r| r.preset.as_deref() == Some("base"))
        .map(|r| r.dynamic_bytes);
    reports
        .iter()
        .map(|r| BandwidthRow {
            preset: r.preset.clone().unwrap_or_default(),
            dynamic_mbps: r.dynamic_mbps(),
            static_mbps: r.static_mbps(),
            total_mbps: r.mbps(r.dynamic_bytes + r.static_bytes),
            ratio_to_base: base.filter(|b| *b > 0).map(|b| r.dynamic_bytes as f64 / b as f64),
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String, ReportError> {
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per stage and log; `overall` sums the capture-to-processed stages.
pub fn latency_csv(reports: &[(&str, &SessionReport)]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["log", "stage", "mean_ms", "max_ms", "frames"])?;
    for (label, report) in reports {
        for l in &report.latency {
            w.write_record([
                label.to_string(),
                l.stage.name().to_string(),
                format!("{:.3}", l.mean_ms),
                format!("{:.3}", l.max_ms),
                l.frames.to_string(),
            ])?;
        }
        if let Some(p) = report.pipeline_ms() {
            w.write_record([label.to_string(), "overall".into(), format!("{p:.3}"), String::new(), String::new()])?;
        }
    }
    finish(w)
}

pub fn bandwidth_csv(rows: &[BandwidthRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["preset", "dynamic_mbps", "static_mbps", "total_mbps", "ratio_to_base"])?;
    for r in rows {
        w.write_record([
            r.preset.clone(),
            opt(r.dynamic_mbps),
            opt(r.static_mbps),
            opt(r.total_mbps),
            opt(r.ratio_to_base),
        ])?;
    }
    finish(w)
}

pub fn summary_csv(reports: &[SessionReport]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "preset",
        "mode",
        "frames",
        "chunks",
        "dynamic_bytes",
        "static_bytes",
        "dynamic_share",
        "static_share",
        "raw_static_share",
        "full_static_bytes",
        "saving_factor",
        "startup_s",
        "qoe",
        "late_chunks",
    ])?;
    for r in reports {
        let mode = match r.mode {
            Some(StaticMode::CubeReuse) => "cube_reuse",
            Some(StaticMode::FullRetransmit) => "full_retransmit",
            None => "",
        };
        w.write_record([
            r.preset.clone().unwrap_or_default(),
            mode.into(),
            r.frames.to_string(),
            r.chunks.to_string(),
            r.dynamic_bytes.to_string(),
            r.static_bytes.to_string(),
            opt(r.dynamic_share()),
            opt(r.static_share()),
            opt(r.raw_static_share()),
            r.full_static_bytes.to_string(),
            opt(r.saving_factor()),
            opt(r.startup_s),
            opt(r.qoe),
            r.late_chunks.to_string(),
        ])?;
    }
    finish(w)
}
