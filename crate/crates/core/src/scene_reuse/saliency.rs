//! Viewport traces and per-cube visual saliency.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{CellIndex, CubeGrid, GridConfig, ReuseError};
use crate::geometry::{rotation_from_euler, EulerAngles};

pub const FRUSTUM_HALF_ANGLE_DEG: f64 = 30.0;
pub const MIN_DISTANCE: f64 = 1e-3;
pub const DEFAULT_WINDOW_US: i64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewportSample {
    pub timestamp_us: i64,
    pub position: Vector3<f64>,
    pub orientation: EulerAngles,
}

impl ViewportSample {
    pub fn new(timestamp_us: i64, position: Vector3<f64>, yaw: f64, pitch: f64, roll: f64) -> Self {
        ViewportSample {
            timestamp_us,
            position,
            orientation: EulerAngles::new(yaw, pitch, roll),
        }
    }

    /// Unit view direction: the orientation applied to +x.
    pub fn view_vector(&self) -> Vector3<f64> {
        rotation_from_euler(&self.orientation).rotation * Vector3::x()
    }

    /// Whether `target` lies within the attention cone. A target at the
    /// headset position counts as inside.
    pub fn sees(&self, target: &Vector3<f64>, half_angle_deg: f64) -> bool {
        let d = target - self.position;
        let n = d.norm();
        if n < 1e-12 {
            return true;
        }
        let cos = (d.dot(&self.view_vector()) / n).clamp(-1.0, 1.0);
        cos >= half_angle_deg.to_radians().cos() - 1e-12
    }
}

/// Parses `timestamp_us, px, py, pz, yaw, pitch, roll` lines (commas or
/// whitespace). Blank lines, `#` comments and a leading header are skipped.
pub fn parse_viewport_trace(text: &str) -> Result<Vec<ViewportSample>, ReuseError> {
    let mut out: Vec<ViewportSample> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        if out.is_empty() && fields.first().is_some_and(|f| f.starts_with(|c: char| c.is_ascii_alphabetic())) {
            continue;
        }
        let err = |message: String| ReuseError::Trace { line: n + 1, message };
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        }
        let ts: i64 = fields[0].parse().map_err(|_| err(format!("bad timestamp {:?}", fields[0])))?;
        let mut v = [0.0; 6];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|_| err(format!("bad number {f:?}")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite value {f:?}")));
            }
        }
        if out.last().is_some_and(|s| s.timestamp_us > ts) {
            return Err(err("timestamps must not decrease".into()));
        }
        out.push(ViewportSample::new(ts, Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5]));
    }
    Ok(out)
}

pub fn format_viewport_trace(samples: &[ViewportSample]) -> String {
    let mut out = String::from("timestamp_us,px,py,pz,yaw,pitch,roll\n");
    for s in samples {
        let o = s.orientation;
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            s.timestamp_us, s.position.x, s.position.y, s.position.z, o.yaw, o.pitch, o.roll
        );
    }
    out
}

/// Frustum hit counts per cell over a set of viewport samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SaliencyAccumulator {
    pub hits: BTreeMap<CellIndex, u64>,
    pub samples: u64,
    /// Distance from the most recent sample's headset to each cell centre.
    pub distance: BTreeMap<CellIndex, f64>,
}

impl SaliencyAccumulator {
    /// Fraction of samples whose cone contained the cell.
    pub fn frequency(&self, cell: &CellIndex) -> f64 {
        if self.samples == 0 {
            return 0.0;
        }
        *self.hits.get(cell).unwrap_or(&0) as f64 / self.samples as f64
    }

    pub fn distance_to(&self, cell: &CellIndex) -> Option<f64> {
        self.distance.get(cell).copied()
    }
}

/// Adds one sample's frustum test over the given cells.
pub fn accumulate_saliency<'a>(
    acc: &mut SaliencyAccumulator,
    sample: &ViewportSample,
    cells: impl IntoIterator<Item = &'a CellIndex>,
    grid: &GridConfig,
) {
    acc.samples += 1;
    for cell in cells {
        let center = grid.cell_center(cell);
        if sample.sees(&center, FRUSTUM_HALF_ANGLE_DEG) {
            *acc.hits.entry(*cell).or_insert(0) += 1;
        }
        acc.distance.insert(*cell, (center - sample.position).norm());
    }
}

/// Visual saliency: density × frustum frequency / distance.
pub fn saliency_score(density: f64, frequency: f64, distance: f64) -> f64 {
    if frequency == 0.0 {
        return 0.0;
    }
    density * frequency / distance.max(MIN_DISTANCE)
}

/// Sliding window of recent viewport samples.
#[derive(Debug, Clone)]
pub struct SaliencyWindow {
    window_us: i64,
    samples: VecDeque<ViewportSample>,
}

impl SaliencyWindow {
    pub fn new(window_us: i64) -> Self {
        SaliencyWindow {
            window_us,
            samples: VecDeque::new(),
        }
    }

    pub fn push(&mut self, sample: ViewportSample) {
        let cutoff = sample.timestamp_us - self.window_us;
        self.samples.push_back(sample);
        while self.samples.front().is_some_and(|s| s.timestamp_us <= cutoff) {
            self.samples.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn latest(&self) -> Option<&ViewportSample> {
        self.samples.back()
    }

    /// Accumulator over the window for every occupied cell of `grid`.
    pub fn snapshot(&self, grid: &CubeGrid) -> SaliencyAccumulator {
        let mut acc = SaliencyAccumulator::default();
        for s in &self.samples {
            accumulate_saliency(&mut acc, s, grid.cells.keys(), &grid.config);
        }
        acc
    }
}

/// Per-cell saliency table as CSV.
pub fn heatmap_csv(grid: &CubeGrid, acc: &SaliencyAccumulator, scale: f64) -> String {
    let mut out = String::from("i,j,k,density,frequency,distance,saliency,level\n");
    for (idx, cell) in &grid.cells {
        let d = acc.distance_to(idx).unwrap_or(f64::INFINITY);
        let s = saliency_score(cell.len() as f64, acc.frequency(idx), d);
        let level = super::detect_level_scaled(s, scale);
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            idx[0],
            idx[1],
            idx[2],
            cell.len(),
            acc.frequency(idx),
            d,
            s,
            level.name()
        );
    }
    out
}
