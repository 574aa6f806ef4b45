//! Slot-based grouping of N camera streams.
//!
//! A frame with timestamp `ts` belongs to slot `floor(ts / Δ)`, slots being
//! half-open `[kΔ, (k+1)Δ)`. A slot closes once every camera has delivered
//! a frame from a later slot (or the stream is finished). Cameras missing
//! from a closed slot are filled with their latest earlier frame and
//! flagged. Nothing is emitted until every camera has reported once.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};

use super::{CameraId, TaggedFrame};

/// Slot length as the exact rational `num_us / den` microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDuration {
    num_us: u64,
    den: u64,
}

impl SlotDuration {
    pub fn new(num_us: u64, den: u64) -> Self {
        assert!(num_us > 0 && den > 0, "slot duration must be positive");
        SlotDuration { num_us, den }
    }

    pub fn from_fps(fps: u32) -> Self {
        SlotDuration::new(1_000_000, fps as u64)
    }

    pub fn from_micros(us: u64) -> Self {
        SlotDuration::new(us, 1)
    }

    pub fn as_secs_f64(&self) -> f64 {
        self.num_us as f64 / self.den as f64 / 1e6
    }

    pub fn slot_of(&self, ts_us: i64) -> i64 {
        (ts_us as i128 * self.den as i128).div_euclid(self.num_us as i128) as i64
    }

    /// First microsecond belonging to slot `k` (rounded up).
    pub fn slot_start(&self, k: i64) -> i64 {
        let n = k as i128 * self.num_us as i128;
        let d = self.den as i128;
        (n.div_euclid(d) + if n.rem_euclid(d) != 0 { 1 } else { 0 }) as i64
    }

    /// Output rate in groups per second.
    pub fn rate_hz(&self) -> f64 {
        1.0 / self.as_secs_f64()
    }
}

impl Default for SlotDuration {
    fn default() -> Self {
        SlotDuration::from_fps(24)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncConfig {
    pub slot: SlotDuration,
    pub camera_ids: Vec<CameraId>,
    pub reuse_on_loss: bool,
    /// Depth of each camera's input queue in the threaded runner.
    pub queue_depth: usize,
}

impl SyncConfig {
    pub fn new(camera_ids: Vec<CameraId>) -> Self {
        let mut ids = camera_ids;
        ids.sort_unstable();
        ids.dedup();
        assert!(!ids.is_empty(), "at least one camera");
        SyncConfig {
            slot: SlotDuration::default(),
            camera_ids: ids,
            reuse_on_loss: true,
            queue_depth: 8,
        }
    }

    pub fn camera_count(&self) -> usize {
        self.camera_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncedGroup {
    pub slot_index: i64,
    /// One frame per camera, ordered by camera id.
    pub frames: Vec<TaggedFrame>,
    pub reused: Vec<bool>,
}

impl SyncedGroup {
    pub fn reused_count(&self) -> usize {
        self.reused.iter().filter(|r| **r).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncStats {
    pub frames_in: u64,
    pub groups_out: u64,
    pub reused_frames: u64,
    /// Frames arriving for a slot that had already closed.
    pub late_frames: u64,
    /// Frames displaced by a later frame of the same camera in one slot.
    pub superseded_frames: u64,
    /// Slots closed before every camera had reported once.
    pub withheld_slots: u64,
    /// Slots skipped because reuse was off and a camera was missing.
    pub incomplete_slots: u64,
    pub queue_drops: u64,
    pub unknown_camera_frames: u64,
}

#[derive(Debug)]
pub struct Synchronizer {
    cfg: SyncConfig,
    pending: BTreeMap<i64, Vec<Option<TaggedFrame>>>,
    latest: Vec<Option<TaggedFrame>>,
    progress: Vec<Option<i64>>,
    next_slot: Option<i64>,
    started: bool,
    stats: SyncStats,
}

impl Synchronizer {
    pub fn new(cfg: SyncConfig) -> Self {
        let n = cfg.camera_count();
        Synchronizer {
            cfg,
            pending: BTreeMap::new(),
            latest: vec![None; n],
            progress: vec![None; n],
            next_slot: None,
            started: false,
            stats: SyncStats::default(),
        }
    }

    pub fn config(&self) -> &SyncConfig {
        &self.cfg
    }

    pub fn stats(&self) -> SyncStats {
        self.stats
    }

    pub fn add_queue_drops(&mut self, n: u64) {
        self.stats.queue_drops += n;
    }

    /// Feeds one frame and returns every group that became closable.
    pub fn push(&mut self, frame: TaggedFrame) -> Vec<SyncedGroup> {
        let Ok(cam) = self.cfg.camera_ids.binary_search(&frame.camera_id()) else {
            self.stats.unknown_camera_frames += 1;
            return Vec::new();
        };
        self.stats.frames_in += 1;
        let slot = self.cfg.slot.slot_of(frame.timestamp());
        if self.next_slot.is_some_and(|n| slot < n) {
            self.stats.late_frames += 1;
            return Vec::new();
        }
        if self.next_slot.is_none() {
            self.next_slot = Some(slot);
        }
        self.progress[cam] = Some(self.progress[cam].map_or(slot, |p| p.max(slot)));
        let n = self.cfg.camera_count();
        let entry = self.pending.entry(slot).or_insert_with(|| vec![None; n]);
        match &entry[cam] {
            Some(old) if old.timestamp() > frame.timestamp() => {
                self.stats.superseded_frames += 1;
            }
            Some(_) => {
                self.stats.superseded_frames += 1;
                entry[cam] = Some(frame);
            }
            None => entry[cam] = Some(frame),
        }
        let closable = self.progress.iter().map(|p| p.unwrap_or(i64::MIN)).min().unwrap();
        self.drain_until(closable)
    }

    /// Closes every slot up to the latest one seen.
    pub fn finish(&mut self) -> Vec<SyncedGroup> {
        let last = self.pending.keys().next_back().copied();
        match last {
            Some(last) => self.drain_until(last + 1),
            None => Vec::new(),
        }
    }

    /// Closes slots strictly below `bound`.
    fn drain_until(&mut self, bound: i64) -> Vec<SyncedGroup> {
        let mut out = Vec::new();
        let Some(mut s) = self.next_slot else { return out };
        while s < bound {
            let slot_frames = self.pending.remove(&s);
            if let Some(g) = self.close_slot(s, slot_frames) {
                out.push(g);
            }
            s += 1;
        }
        self.next_slot = Some(s);
        out
    }

    fn close_slot(&mut self, slot: i64, frames: Option<Vec<Option<TaggedFrame>>>) -> Option<SyncedGroup> {
        let n = self.cfg.camera_count();
        let frames = frames.unwrap_or_else(|| vec![None; n]);
        let fresh: Vec<bool> = frames.iter().map(Option::is_some).collect();
        for (cam, f) in frames.into_iter().enumerate() {
            if let Some(f) = f {
                self.latest[cam] = Some(f);
            }
        }
        if !self.started {
            if self.latest.iter().all(Option::is_some) {
                self.started = true;
            } else {
                self.stats.withheld_slots += 1;
                return None;
            }
        }
        if !self.cfg.reuse_on_loss && fresh.iter().any(|f| !f) {
            self.stats.incomplete_slots += 1;
            return None;
        }
        let reused: Vec<bool> = fresh.iter().map(|f| !f).collect();
        self.stats.reused_frames += reused.iter().filter(|r| **r).count() as u64;
        self.stats.groups_out += 1;
        Some(SyncedGroup {
            slot_index: slot,
            frames: self.latest.iter().map(|f| f.clone().unwrap()).collect(),
            reused,
        })
    }
}

/// Merges already time-ordered per-camera streams and synchronizes them.
pub fn synchronize(
    streams: Vec<Vec<TaggedFrame>>,
    cfg: SyncConfig,
) -> (Vec<SyncedGroup>, SyncStats) {
    let mut all: Vec<TaggedFrame> = streams.into_iter().flatten().collect();
    all.sort_by_key(|f| (f.timestamp(), f.camera_id(), f.descriptor.sequence_number));
    let mut sync = Synchronizer::new(cfg);
    let mut groups = Vec::new();
    for f in all {
        groups.extend(sync.push(f));
    }
    groups.extend(sync.finish());
    (groups, sync.stats())
}

/// Fixed-depth queue that discards its oldest entry on overflow.
#[derive(Debug)]
pub struct FrameQueue<T> {
    items: VecDeque<T>,
    depth: usize,
    dropped: u64,
}

impl<T> FrameQueue<T> {
    pub fn new(depth: usize) -> Self {
        assert!(depth > 0);
        FrameQueue {
            items: VecDeque::with_capacity(depth),
            depth,
            dropped: 0,
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.depth {
            self.items.pop_front();
            self.dropped += 1;
        }
        self.items.push_back(item);
    }

    pub fn pop(&mut self) -> Option<T> {
        self.items.pop_front()
    }

    pub fn front(&self) -> Option<&T> {
        self.items.front()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

struct Shared {
    queues: Vec<FrameQueue<TaggedFrame>>,
    done: Vec<bool>,
}

/// Runs one producer thread per camera feeding bounded queues, with the
/// synchronizer consuming on the calling thread. Frames are consumed in
/// timestamp order across the queue heads.
pub fn synchronize_threaded<I>(streams: Vec<I>, cfg: SyncConfig) -> (Vec<SyncedGroup>, SyncStats)
where
    I: IntoIterator<Item = TaggedFrame> + Send + 'static,
    I::IntoIter: Send,
{
    let n = streams.len();
    let shared = Arc::new((
        Mutex::new(Shared {
            queues: (0..n).map(|_| FrameQueue::new(cfg.queue_depth)).collect(),
            done: vec![false; n],
        }),
        Condvar::new(),
    ));
    let handles: Vec<_> = streams
        .into_iter()
        .enumerate()
        .map(|(i, stream)| {
            let shared = Arc::clone(&shared);
            thread::spawn(move || {
                for frame in stream {
                    let (lock, cv) = &*shared;
                    lock.lock().unwrap().queues[i].push(frame);
                    cv.notify_all();
                }
                let (lock, cv) = &*shared;
                lock.lock().unwrap().done[i] = true;
                cv.notify_all();
            })
        })
        .collect();

    let mut sync = Synchronizer::new(cfg);
    let mut groups = Vec::new();
    let (lock, cv) = &*shared;
    loop {
        let next = {
            let mut st = lock.lock().unwrap();
            loop {
                // a head can be taken once every unfinished stream has one
                let ready = (0..n).all(|i| st.done[i] || !st.queues[i].is_empty());
                if ready {
                    break;
                }
                st = cv.wait(st).unwrap();
            }
            let pick = (0..n)
                .filter(|&i| !st.queues[i].is_empty())
                .min_by_key(|&i| st.queues[i].front().map(|f| (f.timestamp(), f.camera_id())));
            pick.and_then(|i| st.queues[i].pop())
        };
        match next {
            Some(frame) => groups.extend(sync.push(frame)),
            None => break,
        }
    }
    for h in handles {
        h.join().expect("producer thread panicked");
    }
    let dropped: u64 = lock.lock().unwrap().queues.iter().map(|q| q.dropped()).sum();
    sync.add_queue_drops(dropped);
    groups.extend(sync.finish());
    (groups, sync.stats())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point, PointCloud};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(cam: CameraId, ts: i64, seq: u64) -> TaggedFrame {
        let cloud: PointCloud = std::iter::once(Point::new(ts as f64, cam as f64, 0.0, [0; 3])).collect();
        TaggedFrame::new(cam, ts, seq, cloud, None)
    }

    fn slot_ts(cfg: &SyncConfig, k: i64) -> i64 {
        cfg.slot.slot_start(k)
    }

    #[test]
    fn slot_assignment_is_half_open() {
        let d = SlotDuration::from_fps(24);
        assert_eq!(d.slot_of(0), 0);
        assert_eq!(d.slot_of(41_666), 0);
        assert_eq!(d.slot_of(41_667), 1);
        assert_eq!(d.slot_start(1), 41_667);
        assert_eq!(d.slot_of(1_000_000), 24);
        assert_eq!(d.slot_of(-1), -1);
        for k in -50..500 {
            assert_eq!(d.slot_of(d.slot_start(k)), k);
            assert_eq!(d.slot_of(d.slot_start(k) - 1), k - 1);
        }
    }

    #[test]
    fn aligned_cameras_give_clean_groups() {
        let cfg = SyncConfig::new(vec![0, 1]);
        let streams = (0..2)
            .map(|c| (0..10).map(|k| frame(c, slot_ts(&cfg, k), k as u64)).collect())
            .collect();
        let (groups, stats) = synchronize(streams, cfg);
        assert_eq!(groups.len(), 10);
        assert!(groups.iter().all(|g| g.reused_count() == 0));
        assert_eq!(stats.reused_frames, 0);
    }

    #[test]
    fn dropped_frame_reuses_previous() {
        let cfg = SyncConfig::new(vec![1, 2]);
        let cam1: Vec<_> = (0..10).map(|k| frame(1, slot_ts(&cfg, k), k as u64)).collect();
        let cam2: Vec<_> = (0..10)
            .filter(|&k| k != 5)
            .map(|k| frame(2, slot_ts(&cfg, k), k as u64))
            .collect();
        let (groups, _) = synchronize(vec![cam1, cam2], cfg.clone());
        assert_eq!(groups.len(), 10);
        let g5 = &groups[5];
        assert_eq!(g5.slot_index, 5);
        assert_eq!(g5.reused, vec![false, true]);
        assert_eq!(g5.frames[1].timestamp(), slot_ts(&cfg, 4));
    }

    #[test]
    fn startup_is_withheld_until_all_report() {
        let cfg = SyncConfig::new(vec![0, 1]);
        let cam0: Vec<_> = (0..6).map(|k| frame(0, slot_ts(&cfg, k), k as u64)).collect();
        let cam1: Vec<_> = (2..6).map(|k| frame(1, slot_ts(&cfg, k), k as u64)).collect();
        let (groups, stats) = synchronize(vec![cam0, cam1], cfg);
        assert_eq!(groups.first().unwrap().slot_index, 2);
        assert_eq!(groups.len(), 4);
        assert_eq!(stats.withheld_slots, 2);
    }

    #[test]
    fn later_frame_in_slot_wins_and_late_frames_are_dropped() {
        let cfg = SyncConfig::new(vec![0]);
        let mut sync = Synchronizer::new(cfg);
        assert!(sync.push(frame(0, 1_000, 0)).is_empty());
        assert!(sync.push(frame(0, 30_000, 1)).is_empty());
        let g = sync.push(frame(0, 50_000, 2));
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].frames[0].timestamp(), 30_000);
        assert!(sync.push(frame(0, 2_000, 3)).is_empty());
        assert_eq!(sync.stats().late_frames, 1);
        assert_eq!(sync.finish().len(), 1);
    }

    #[test]
    fn silent_slots_stay_gap_free() {
        let cfg = SyncConfig::new(vec![0, 1]);
        let streams = (0..2)
            .map(|c| {
                [0, 1, 4, 5]
                    .iter()
                    .map(|&k| frame(c, slot_ts(&cfg, k), k as u64))
                    .collect()
            })
            .collect();
        let (groups, _) = synchronize(streams, cfg);
        let slots: Vec<i64> = groups.iter().map(|g| g.slot_index).collect();
        assert_eq!(slots, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(groups[2].reused, vec![true, true]);
    }

    #[test]
    fn reuse_off_skips_incomplete_slots() {
        let mut cfg = SyncConfig::new(vec![0, 1]);
        cfg.reuse_on_loss = false;
        let cam0: Vec<_> = (0..5).map(|k| frame(0, slot_ts(&cfg, k), k as u64)).collect();
        let cam1: Vec<_> = [0, 1, 3, 4].iter().map(|&k| frame(1, slot_ts(&cfg, k), k as u64)).collect();
        let (groups, stats) = synchronize(vec![cam0, cam1], cfg);
        assert_eq!(groups.len(), 4);
        assert_eq!(stats.incomplete_slots, 1);
    }

    #[test]
    fn bounded_queue_drops_oldest() {
        let mut q = FrameQueue::new(8);
        for i in 0..10 {
            q.push(i);
        }
        assert_eq!(q.len(), 8);
        assert_eq!(q.dropped(), 2);
        assert_eq!(q.pop(), Some(2));
    }

    #[test]
    fn threaded_runner_produces_complete_ordered_groups() {
        let cfg = SyncConfig::new(vec![0, 1, 2]);
        let streams: Vec<Vec<TaggedFrame>> = (0..3)
            .map(|c| (0..100).map(|k| frame(c, slot_ts(&cfg, k), k as u64)).collect())
            .collect();
        let (groups, stats) = synchronize_threaded(streams, cfg);
        assert!(!groups.is_empty());
        assert!(groups.iter().all(|g| g.frames.len() == 3));
        assert!(groups.windows(2).all(|w| w[1].slot_index == w[0].slot_index + 1));
        assert_eq!(stats.groups_out as usize, groups.len());
    }

    proptest! {
        #[test]
        fn groups_are_complete_gap_free_and_in_slot(
            n in 1usize..5,
            slots in 1i64..60,
            drop in 0.0f64..0.5,
            jitter in 0i64..40_000,
            seed: u64,
        ) {
            let cfg = SyncConfig::new((0..n as u32).collect());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dropped_slots = Vec::new();
            let streams: Vec<Vec<TaggedFrame>> = (0..n as u32)
                .map(|c| {
                    let mut out = Vec::new();
                    for k in 0..slots {
                        if k > 0 && rng.random::<f64>() < drop {
                            dropped_slots.push(k);
                            continue;
                        }
                        out.push(frame(c, slot_ts(&cfg, k) + rng.random_range(0..=jitter), k as u64));
                    }
                    out
                })
                .collect();
            let last = streams.iter().flatten().map(|f| cfg.slot.slot_of(f.timestamp())).max().unwrap();
            let injected = dropped_slots.iter().filter(|&&k| k <= last).count() as u64;
            let (groups, stats) = synchronize(streams, cfg.clone());
            prop_assert_eq!(groups.len() as i64, last + 1);
            prop_assert_eq!(stats.reused_frames, injected);
            for (k, g) in groups.iter().enumerate() {
                prop_assert_eq!(g.slot_index, k as i64);
                prop_assert_eq!(g.frames.len(), n);
                for (f, r) in g.frames.iter().zip(&g.reused) {
                    if !r {
                        prop_assert_eq!(cfg.slot.slot_of(f.timestamp()), g.slot_index);
                    }
                }
            }
        }
    }
}
