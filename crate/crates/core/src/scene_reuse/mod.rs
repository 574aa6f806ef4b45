//! Cube-grid reuse of the static scene.
//!
//! The static cloud is cut into cubes. Each cube is re-checked against the
//! client's copy at a cadence set by its visual saliency, and only cubes
//! whose content moved (by Chamfer distance) are queued for update.

pub mod octree;
pub mod saliency;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point, PointCloud, ReferenceFrame};
pub use octree::Octree;
pub use saliency::{
    accumulate_saliency, heatmap_csv, parse_viewport_trace, saliency_score, SaliencyAccumulator, SaliencyWindow,
    ViewportSample,
};

pub type CellIndex = [i32; 3];

pub const DEFAULT_SIDE: f64 = 0.15;
pub const DEFAULT_CHANGE_THRESHOLD: f64 = 0.01;
pub const CD_MAX_FLOOR: f64 = 1e-6;
pub const HIGH_THRESHOLD: f64 = 16.0;
pub const MID_THRESHOLD: f64 = 9.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReuseError {
    #[error("Chamfer distance needs two non-empty clouds")]
    EmptyCloud,
    #[error("grids differ in side length or origin")]
    GridMismatch,
    #[error("viewport trace line {line}: {message}")]
    Trace { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub side: f64,
    pub origin: Vector3<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            side: DEFAULT_SIDE,
            origin: Vector3::zeros(),
        }
    }
}

impl GridConfig {
    pub fn new(side: f64) -> Self {
        assert!(side > 0.0, "cube side must be positive");
        GridConfig {
            side,
            origin: Vector3::zeros(),
        }
    }

    pub fn index_of(&self, p: &Vector3<f64>) -> CellIndex {
        let r = (p - self.origin) / self.side;
        [r.x.floor() as i32, r.y.floor() as i32, r.z.floor() as i32]
    }

    pub fn cell_center(&self, idx: &CellIndex) -> Vector3<f64> {
        self.origin + Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * self.side
    }
}

/// Occupied cubes of one static cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeGrid {
    pub config: GridConfig,
    pub cells: BTreeMap<CellIndex, PointCloud>,
}

impl CubeGrid {
    pub fn new(config: GridConfig) -> Self {
        CubeGrid {
            config,
            cells: BTreeMap::new(),
        }
    }

    pub fn point_count(&self) -> usize {
        self.cells.values().map(PointCloud::len).sum()
    }

    pub fn to_cloud(&self) -> PointCloud {
        let mut out = PointCloud::new(ReferenceFrame::World);
        for c in self.cells.values() {
            out.extend_from(c);
        }
        out
    }

    pub fn get(&self, idx: &CellIndex) -> Option<&PointCloud> {
        self.cells.get(idx)
    }

    fn check_compatible(&self, other: &CubeGrid) -> Result<(), ReuseError> {
        if self.config == other.config {
            Ok(())
        } else {
            Err(ReuseError::GridMismatch)
        }
    }
}

pub fn assign_cubes(cloud: &PointCloud, config: GridConfig) -> CubeGrid {
    let mut grid = CubeGrid::new(config);
    for p in &cloud.points {
        grid.cells
            .entry(config.index_of(&p.position()))
            .or_insert_with(|| PointCloud::new(ReferenceFrame::World))
            .points
            .push(*p);
    }
    grid
}

/// Symmetric Chamfer distance: mean nearest-neighbour distance from P to Q
/// plus from Q to P.
pub fn chamfer_distance(p: &PointCloud, q: &PointCloud) -> Result<f64, ReuseError> {
    if p.is_empty() || q.is_empty() {
        return Err(ReuseError::EmptyCloud);
    }
    let tp = Octree::build(&p.points);
    let tq = Octree::build(&q.points);
    let one_way = |from: &PointCloud, tree: &Octree| -> f64 {
        let sum: f64 = from.points.iter().map(|x| tree.nearest(&x.position()).unwrap().distance).sum();
        sum / from.len() as f64
    };
    Ok(one_way(p, &tq) + one_way(q, &tp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DetectLevel {
    High,
    Mid,
    Low,
}

impl DetectLevel {
    pub fn frequency(self) -> f64 {
        match self {
            DetectLevel::High => 1.0,
            DetectLevel::Mid => 0.2,
            DetectLevel::Low => 0.1,
        }
    }

    /// Slots between detections.
    pub fn interval(self) -> i64 {
        match self {
            DetectLevel::High => 1,
            DetectLevel::Mid => 5,
            DetectLevel::Low => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DetectLevel::High => "high",
            DetectLevel::Mid => "mid",
            DetectLevel::Low => "low",
        }
    }
}

pub fn detect_level(s_v: f64) -> DetectLevel {
    detect_level_scaled(s_v, 1.0)
}

/// Level for a saliency score multiplied by `scale` before thresholding.
pub fn detect_level_scaled(s_v: f64, scale: f64) -> DetectLevel {
    let s = s_v * scale;
    if s >= HIGH_THRESHOLD {
        DetectLevel::High
    } else if s >= MID_THRESHOLD {
        DetectLevel::Mid
    } else {
        DetectLevel::Low
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateAction {
    Replace,
    Clear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeUpdate {
    pub index: CellIndex,
    pub action: UpdateAction,
    /// Full new content for `Replace`, empty for `Clear`.
    pub points: PointCloud,
    /// Fraction of `points` actually sent.
    pub fraction: f64,
    /// Chamfer distance against the reference over the running maximum.
    pub normalized_cd: f64,
    pub saliency: f64,
    pub level: DetectLevel,
    pub detected_slot: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReuseConfig {
    pub grid: GridConfig,
    pub change_threshold: f64,
    pub saliency_scale: f64,
    /// Pins every cube to one detection level.
    pub force_level: Option<DetectLevel>,
    pub window_us: i64,
}

impl Default for ReuseConfig {
    fn default() -> Self {
        ReuseConfig {
            grid: GridConfig::default(),
            change_threshold: DEFAULT_CHANGE_THRESHOLD,
            saliency_scale: 1.0,
            force_level: None,
            window_us: saliency::DEFAULT_WINDOW_US,
        }
    }
}

/// Result of one detection pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DisparityReport {
    pub updates: Vec<CubeUpdate>,
    /// Cells examined this pass.
    pub detected: Vec<CellIndex>,
    /// Normalized Chamfer distance of each examined cell.
    pub normalized: BTreeMap<CellIndex, f64>,
}

/// Per-cell detection cadence and the session's running Chamfer maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityDetector {
    pub config: ReuseConfig,
    levels: BTreeMap<CellIndex, DetectLevel>,
    saliency: BTreeMap<CellIndex, f64>,
    last_detect: BTreeMap<CellIndex, i64>,
    cd_max: f64,
    /// (slot, cell) of every detection, for cadence audits.
    pub detect_log: Vec<(i64, CellIndex)>,
    pub log_detections: bool,
}

impl DisparityDetector {
    pub fn new(config: ReuseConfig) -> Self {
        DisparityDetector {
            config,
            levels: BTreeMap::new(),
            saliency: BTreeMap::new(),
            last_detect: BTreeMap::new(),
            cd_max: CD_MAX_FLOOR,
            detect_log: Vec::new(),
            log_detections: false,
        }
    }

    pub fn cd_max(&self) -> f64 {
        self.cd_max
    }

    pub fn level(&self, idx: &CellIndex) -> DetectLevel {
        self.config
            .force_level
            .unwrap_or_else(|| *self.levels.get(idx).unwrap_or(&DetectLevel::Low))
    }

    pub fn saliency(&self, idx: &CellIndex) -> f64 {
        *self.saliency.get(idx).unwrap_or(&0.0)
    }

    /// Sets each cell's saliency and level from a window snapshot.
    pub fn update_saliency(&mut self, grid: &CubeGrid, acc: &SaliencyAccumulator) {
        for (idx, cell) in &grid.cells {
            let d = acc.distance_to(idx).unwrap_or(f64::INFINITY);
            let s = saliency_score(cell.len() as f64, acc.frequency(idx), d);
            self.saliency.insert(*idx, s);
            self.levels.insert(*idx, detect_level_scaled(s, self.config.saliency_scale));
        }
    }

    pub fn is_due(&self, idx: &CellIndex, slot: i64) -> bool {
        self.last_detect
            .get(idx)
            .is_none_or(|last| slot - last >= self.level(idx).interval())
    }

    /// Compares due cells of `current` against `reference`.
    pub fn detect(&mut self, current: &CubeGrid, reference: &CubeGrid, slot: i64) -> Result<DisparityReport, ReuseError> {
        current.check_compatible(reference)?;
        let mut candidates: Vec<CellIndex> = current.cells.keys().chain(reference.cells.keys()).copied().collect();
        candidates.sort_unstable();
        candidates.dedup();
        let due: Vec<CellIndex> = candidates.into_iter().filter(|i| self.is_due(i, slot)).collect();
        let threshold = self.config.change_threshold;

        enum Verdict {
            New,
            Gone,
            Same,
            Compared(f64, bool),
        }
        let verdicts: Vec<Verdict> = due
            .par_iter()
            .map(|idx| {
                let now = current.cells.get(idx).filter(|c| !c.is_empty());
                let before = reference.cells.get(idx).filter(|c| !c.is_empty());
                match (now, before) {
                    (Some(_), None) => Verdict::New,
                    (None, Some(_)) => Verdict::Gone,
                    (None, None) => Verdict::Same,
                    (Some(a), Some(b)) => {
                        let cd = chamfer_distance(a, b).expect("non-empty");
                        let changed = if threshold > 0.0 { cd > threshold } else { !a.same_points(b) };
                        Verdict::Compared(cd, changed)
                    }
                }
            })
            .collect();

        for v in &verdicts {
            if let Verdict::Compared(cd, _) = v {
                self.cd_max = self.cd_max.max(*cd);
            }
        }
        let mut report = DisparityReport::default();
        for (idx, v) in due.iter().zip(verdicts) {
            self.last_detect.insert(*idx, slot);
            if self.log_detections {
                self.detect_log.push((slot, *idx));
            }
            report.detected.push(*idx);
            let base = |action, points: PointCloud, normalized_cd| CubeUpdate {
                index: *idx,
                action,
                points,
                fraction: 1.0,
                normalized_cd,
                saliency: self.saliency(idx),
                level: self.level(idx),
                detected_slot: slot,
            };
            let (norm, update) = match v {
                Verdict::New => (1.0, Some(base(UpdateAction::Replace, current.cells[idx].clone(), 1.0))),
                Verdict::Gone => (1.0, Some(base(UpdateAction::Clear, PointCloud::new(ReferenceFrame::World), 1.0))),
                Verdict::Same => (0.0, None),
                Verdict::Compared(cd, changed) => {
                    let n = (cd / self.cd_max).min(1.0);
                    (n, changed.then(|| base(UpdateAction::Replace, current.cells[idx].clone(), n)))
                }
            };
            report.normalized.insert(*idx, norm);
            report.updates.extend(update);
        }
        Ok(report)
    }
}

/// Stateless comparison of every cell, used where no cadence applies.
pub fn detect_disparity(current: &CubeGrid, reference: &CubeGrid, threshold: f64) -> Result<DisparityReport, ReuseError> {
    let mut d = DisparityDetector::new(ReuseConfig {
        grid: current.config,
        change_threshold: threshold,
        force_level: Some(DetectLevel::High),
        ..ReuseConfig::default()
    });
    d.detect(current, reference, 0)
}

/// Server-side reuse state: the client's mirrored grid, the detector and
/// the queue of cube updates awaiting bandwidth.
#[derive(Debug, Clone)]
pub struct SceneReuse {
    pub detector: DisparityDetector,
    pub reference: CubeGrid,
    pending: BTreeMap<CellIndex, CubeUpdate>,
    pub window: SaliencyWindow,
    current: CubeGrid,
}

impl SceneReuse {
    pub fn new(config: ReuseConfig) -> Self {
        SceneReuse {
            detector: DisparityDetector::new(config),
            reference: CubeGrid::new(config.grid),
            pending: BTreeMap::new(),
            window: SaliencyWindow::new(config.window_us),
            current: CubeGrid::new(config.grid),
        }
    }

    pub fn config(&self) -> &ReuseConfig {
        &self.detector.config
    }

    pub fn push_viewport(&mut self, sample: ViewportSample) {
        self.window.push(sample);
    }

    /// Grid of the most recently observed static cloud.
    pub fn current(&self) -> &CubeGrid {
        &self.current
    }

    /// Ingests one slot's static cloud and refreshes the pending queue.
    pub fn observe(&mut self, static_scene: &PointCloud, slot: i64) -> Result<DisparityReport, ReuseError> {
        self.current = assign_cubes(static_scene, self.detector.config.grid);
        let acc = self.window.snapshot(&self.current);
        self.detector.update_saliency(&self.current, &acc);
        let report = self.detector.detect(&self.current, &self.reference, slot)?;
        for idx in &report.detected {
            self.pending.remove(idx);
        }
        for u in &report.updates {
            self.pending.insert(u.index, u.clone());
        }
        Ok(report)
    }

    /// Updates waiting to be scheduled, most salient first.
    pub fn pending(&self) -> Vec<CubeUpdate> {
        let mut out: Vec<CubeUpdate> = self.pending.values().cloned().collect();
        out.sort_by(|a, b| b.saliency.total_cmp(&a.saliency).then(a.index.cmp(&b.index)));
        out
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Records updates as delivered: the client mirror takes their content
    /// and they leave the queue (partial ones are re-detected later).
    pub fn commit(&mut self, sent: &[CubeUpdate]) {
        for u in sent {
            apply_update(&mut self.reference, u);
            self.pending.remove(&u.index);
        }
    }
}

/// Applies one update to a grid as the client would.
pub fn apply_update(grid: &mut CubeGrid, u: &CubeUpdate) {
    match u.action {
        UpdateAction::Clear => {
            grid.cells.remove(&u.index);
        }
        UpdateAction::Replace => {
            if u.points.is_empty() {
                grid.cells.remove(&u.index);
            } else {
                grid.cells.insert(u.index, u.points.clone());
            }
        }
    }
}

/// The point subset a `Replace` with `fraction` carries.
pub fn fraction_subset(points: &PointCloud, fraction: f64, seed: u64) -> Vec<Point> {
    if fraction >= 1.0 {
        return points.points.clone();
    }
    let k = crate::segmentation::kept_count(points.len(), fraction);
    let mut order = crate::segmentation::decimation_order(points.len(), seed);
    order.truncate(k);
    order.sort_unstable();
    order.into_iter().map(|i| points.points[i]).collect()
}
