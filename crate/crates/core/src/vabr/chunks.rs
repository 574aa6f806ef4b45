//! Layered dynamic and static chunks, sized exactly as framed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::VabrError;
use crate::geometry::{Point, PointCloud};
use crate::scene_reuse::{fraction_subset, CellIndex, CubeUpdate, UpdateAction};
use crate::segmentation::{decimation_order, kept_count, part_seed, BodyGroup, BodyPart, SegmentedFrame};
use crate::transport::wire::{
    ChunkPayload, FramePayload, Message, PartPayload, StaticPayload, WireCubeUpdate, POINT_BYTES,
    STATIC_MESSAGE_OVERHEAD, STATIC_UPDATE_OVERHEAD,
};

/// Salt separating layer ordering from preset decimation.
const LAYER_SALT: u64 = 0x6C61_7965_7273_0001;
/// Floor on a cube's lowest-level fraction so a partial update never
/// empties a changed cube.
pub const MIN_CUBE_FRACTION: f64 = 0.1;

/// Per-level kept fractions of each body group, applied on top of the
/// preset-decimated body. Rows are levels, columns head/chest/arm/leg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelLadder {
    levels: Vec<[f64; 4]>,
}

fn group_slot(g: BodyGroup) -> usize {
    match g {
        BodyGroup::Head => 0,
        BodyGroup::Chest => 1,
        BodyGroup::Arm => 2,
        BodyGroup::Leg => 3,
    }
}

impl LevelLadder {
    /// Rows must be non-decreasing per group, in (0, 1], with the head at
    /// full density from level 0 and every group at 1 on the top level.
    pub fn new(levels: Vec<[f64; 4]>) -> Result<Self, VabrError> {
        let bad = |m: &str| Err(VabrError::Ladder(m.into()));
        if levels.len() < 2 {
            return bad("need at least two levels");
        }
        for (i, row) in levels.iter().enumerate() {
            if row.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
                return bad("fractions must lie in (0, 1]");
            }
            if row[0] != 1.0 {
                return bad("head must be full density at every level");
            }
            if i > 0 && row.iter().zip(&levels[i - 1]).any(|(a, b)| a < b) {
                return bad("fractions must not decrease with level");
            }
        }
        if levels.last().unwrap().iter().any(|f| *f != 1.0) {
            return bad("top level must keep every point");
        }
        Ok(LevelLadder { levels })
    }

    pub fn max_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn fraction(&self, level: usize, part: BodyPart) -> f64 {
        self.levels[level][group_slot(part.group())]
    }

    pub fn rows(&self) -> &[[f64; 4]] {
        &self.levels
    }
}

impl Default for LevelLadder {
    fn default() -> Self {
        LevelLadder {
            levels: vec![
                [1.0, 0.25, 0.15, 0.25],
                [1.0, 0.4, 0.2, 0.5],
                [1.0, 0.6, 0.25, 0.8],
                [1.0, 1.0, 1.0, 1.0],
            ],
        }
    }
}

/// One period of body frames split into nested layers. `layers[0]` is the
/// base chunk and `layers[l]` the delta lifting level `l-1` to `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicChunk {
    pub index: u32,
    pub layers: Vec<ChunkPayload>,
    /// Framed bytes needed to reach each level (cumulative).
    pub level_bytes: Vec<u64>,
    /// Body points carried up to each level (cumulative).
    pub level_points: Vec<u64>,
}

impl DynamicChunk {
    pub fn max_level(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn bits(&self, level: usize) -> u64 {
        self.level_bytes[level] * 8
    }

    /// Cumulative bit sizes, one per level.
    pub fn size_table(&self) -> Vec<u64> {
        self.level_bytes.iter().map(|b| b * 8).collect()
    }

    /// Messages taking a client from nothing to `level`.
    pub fn messages(&self, level: usize) -> Vec<Message> {
        self.layers[..=level]
            .iter()
            .enumerate()
            .map(|(l, p)| {
                if l == 0 {
                    Message::DynamicChunk(p.clone())
                } else {
                    Message::LayerUpgrade(p.clone())
                }
            })
            .collect()
    }

    /// Message lifting a client already at `from` by one level.
    pub fn upgrade_message(&self, from: usize) -> Option<Message> {
        self.layers.get(from + 1).cloned().map(Message::LayerUpgrade)
    }

    /// The full payload of `level`, as if it had been sent in one piece.
    pub fn level_payload(&self, level: usize) -> ChunkPayload {
        let mut merged = self.layers[0].clone();
        for layer in &self.layers[1..=level] {
            merge_layer(&mut merged, layer);
        }
        merged.level = level as u8;
        merged
    }
}

/// Appends a delta layer to an accumulated chunk payload.
pub fn merge_layer(acc: &mut ChunkPayload, delta: &ChunkPayload) {
    for f in &delta.frames {
        let frame = match acc.frames.iter_mut().find(|x| x.slot == f.slot) {
            Some(frame) => frame,
            None => {
                acc.frames.push(FramePayload {
                    slot: f.slot,
                    parts: Vec::new(),
                });
                acc.frames.last_mut().unwrap()
            }
        };
        for p in &f.parts {
            match frame.parts.iter_mut().find(|x| x.label == p.label) {
                Some(part) => part.points.extend_from_slice(&p.points),
                None => frame.parts.push(p.clone()),
            }
        }
        frame.parts.sort_by_key(|p| p.label);
    }
    acc.level = delta.level;
}

/// Per-slot body parts carried by a chunk payload.
pub fn payload_parts(payload: &ChunkPayload) -> BTreeMap<u32, Vec<PointCloud>> {
    payload
        .frames
        .iter()
        .map(|f| {
            let mut parts = vec![PointCloud::default(); BodyPart::ALL.len()];
            for p in &f.parts {
                parts[p.label as usize].points.extend_from_slice(&p.points);
            }
            (f.slot, parts)
        })
        .collect()
}

/// Splits decimated frames into layered payloads. Points are quantized to
/// their wire precision.
pub fn build_dynamic_chunk(index: u32, frames: &[SegmentedFrame], ladder: &LevelLadder, seed: u64) -> DynamicChunk {
    let levels = ladder.max_level() + 1;
    let mut layers: Vec<ChunkPayload> = (0..levels)
        .map(|l| ChunkPayload {
            chunk: index,
            level: l as u8,
            frames: Vec::with_capacity(frames.len()),
        })
        .collect();
    for frame in frames {
        let mut per_level: Vec<Vec<PartPayload>> = vec![Vec::new(); levels];
        for part in BodyPart::ALL {
            let cloud = frame.part(part);
            if cloud.is_empty() {
                continue;
            }
            let order = decimation_order(cloud.len(), part_seed(seed ^ LAYER_SALT, frame.slot_index, part));
            let mut prev = 0;
            for (l, layer) in per_level.iter_mut().enumerate() {
                let k = kept_count(cloud.len(), ladder.fraction(l, part)).max(prev);
                if k > prev {
                    let mut idx = order[prev..k].to_vec();
                    idx.sort_unstable();
                    layer.push(PartPayload {
                        label: part as u8,
                        points: idx.into_iter().map(|i| cloud.points[i].quantized()).collect(),
                    });
                }
                prev = k;
            }
        }
        for (layer, parts) in layers.iter_mut().zip(per_level) {
            layer.frames.push(FramePayload {
                slot: frame.slot_index as u32,
                parts,
            });
        }
    }
    let mut level_bytes = Vec::with_capacity(levels);
    let mut level_points = Vec::with_capacity(levels);
    let (mut bytes, mut points) = (0u64, 0u64);
    for (l, layer) in layers.iter().enumerate() {
        let msg = if l == 0 {
            Message::DynamicChunk(layer.clone())
        } else {
            Message::LayerUpgrade(layer.clone())
        };
        bytes += msg.encoded_len() as u64;
        points += layer.frames.iter().flat_map(|f| &f.parts).map(|p| p.points.len() as u64).sum::<u64>();
        level_bytes.push(bytes);
        level_points.push(points);
    }
    DynamicChunk {
        index,
        layers,
        level_bytes,
        level_points,
    }
}

fn cube_seed(seed: u64, cell: &CellIndex) -> u64 {
    let mut z = seed ^ 0x6375_6265_0000_0000;
    for v in cell {
        z = (z ^ (*v as u32 as u64)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z ^= z >> 29;
    }
    z
}

/// Lowest-level share of a cube: its normalized Chamfer distance times
/// its detection frequency, floored at [`MIN_CUBE_FRACTION`].
pub fn base_fraction(u: &CubeUpdate) -> f64 {
    if u.action == UpdateAction::Clear {
        return 1.0;
    }
    (u.normalized_cd * u.level.frequency()).clamp(MIN_CUBE_FRACTION, 1.0)
}

/// Fraction of a cube sent at `level` out of `max_level`.
pub fn cube_fraction(u: &CubeUpdate, level: usize, max_level: usize) -> f64 {
    let d = base_fraction(u);
    if level >= max_level {
        return 1.0;
    }
    d + (1.0 - d) * level as f64 / max_level as f64
}

/// Returns `u` trimmed to `fraction` of its points, ready to commit.
pub fn partial_update(u: &CubeUpdate, fraction: f64, seed: u64) -> CubeUpdate {
    let mut out = u.clone();
    if u.action == UpdateAction::Replace {
        let pts: Vec<Point> = fraction_subset(&u.points, fraction, cube_seed(seed, &u.index))
            .into_iter()
            .map(|p| p.quantized())
            .collect();
        out.points = PointCloud::from_points(pts, u.points.frame);
        out.fraction = fraction;
    } else {
        out.fraction = 1.0;
    }
    out
}

fn wire_update(u: &CubeUpdate) -> WireCubeUpdate {
    WireCubeUpdate {
        cell: u.index,
        action: u.action,
        fraction: u.fraction as f32,
        points: u.points.points.clone(),
    }
}

pub fn update_bytes(points: usize) -> u64 {
    (STATIC_UPDATE_OVERHEAD + POINT_BYTES * points) as u64
}

/// Pending cube updates for one period, most salient first, at every
/// quality level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticChunk {
    pub index: u32,
    pub max_level: usize,
    /// Updates with their full content, ordered by descending saliency.
    pub cubes: Vec<CubeUpdate>,
    /// Framed bytes of each level's message.
    pub level_bytes: Vec<u64>,
    seed: u64,
}

impl StaticChunk {
    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn bits(&self, level: usize) -> u64 {
        self.level_bytes[level] * 8
    }

    /// Trimmed updates carried at `level`.
    pub fn updates(&self, level: usize) -> Vec<CubeUpdate> {
        self.cubes
            .iter()
            .map(|u| partial_update(u, cube_fraction(u, level, self.max_level), self.seed))
            .collect()
    }

    pub fn message(&self, level: usize) -> Message {
        static_message(self.index, level as u8, &self.updates(level))
    }
}

pub fn static_message(index: u32, level: u8, updates: &[CubeUpdate]) -> Message {
    Message::StaticUpdate(StaticPayload {
        chunk: index,
        level,
        updates: updates.iter().map(wire_update).collect(),
    })
}

pub fn build_static_chunk(index: u32, pending: &[CubeUpdate], max_level: usize, seed: u64) -> StaticChunk {
    let mut cubes = pending.to_vec();
    cubes.sort_by(|a, b| b.saliency.total_cmp(&a.saliency).then(a.index.cmp(&b.index)));
    let level_bytes = (0..=max_level)
        .map(|l| {
            STATIC_MESSAGE_OVERHEAD as u64
                + cubes
                    .iter()
                    .map(|u| {
                        let n = if u.action == UpdateAction::Clear {
                            0
                        } else {
                            kept_count(u.points.len(), cube_fraction(u, l, max_level))
                        };
                        update_bytes(n)
                    })
                    .sum::<u64>()
        })
        .collect();
    StaticChunk {
        index,
        max_level,
        cubes,
        level_bytes,
        seed,
    }
}

/// Outcome of filling a residual budget with cube updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaticFill {
    pub chosen: Vec<CubeUpdate>,
    pub deferred: Vec<CellIndex>,
    /// Framed bits of the resulting message, 0 if nothing was chosen.
    pub bits: u64,
}

/// Greedy saliency-ordered fill of `residual_bits` with each cube's
/// lowest-level share. Filling stops at the first cube that does not fit;
/// it and every later cube are deferred.
pub fn static_budget_fill(residual_bits: f64, cubes: &[CubeUpdate], seed: u64) -> StaticFill {
    let mut order: Vec<&CubeUpdate> = cubes.iter().collect();
    order.sort_by(|a, b| b.saliency.total_cmp(&a.saliency).then(a.index.cmp(&b.index)));
    let mut fill = StaticFill::default();
    let mut bytes = STATIC_MESSAGE_OVERHEAD as u64;
    let mut open = true;
    for u in order {
        if open {
            let part = partial_update(u, base_fraction(u), seed);
            let next = bytes + update_bytes(part.points.len());
            if (next * 8) as f64 <= residual_bits {
                bytes = next;
                fill.chosen.push(part);
                continue;
            }
            open = false;
        }
        fill.deferred.push(u.index);
    }
    if !fill.chosen.is_empty() {
        fill.bits = bytes * 8;
    }
    fill
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_reuse::DetectLevel;
    use crate::transport::wire::{decode_exact, encode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, slot: u64, max_per_part: usize) -> SegmentedFrame {
        let mut f = SegmentedFrame::empty(slot);
        for part in BodyPart::ALL {
            let n = rng.random_range(0..=max_per_part);
            f.body_parts[part.index()] = (0..n)
                .map(|_| {
                    Point::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(0.0..2.0),
                        [rng.random(), rng.random(), rng.random()],
                    )
                })
                .collect();
        }
        f
    }

    fn cube(idx: i32, n: usize, ncd: f64, level: DetectLevel, saliency: f64) -> CubeUpdate {
        CubeUpdate {
            index: [idx, 0, 0],
            action: UpdateAction::Replace,
            points: (0..n).map(|i| Point::new(i as f64 * 1e-3, 0.0, 0.0, [1, 2, 3])).collect(),
            fraction: 1.0,
            normalized_cd: ncd,
            saliency,
            level,
            detected_slot: 0,
        }
    }

    #[test]
    fn empty_inputs_carry_no_points() {
        let d = build_dynamic_chunk(0, &[SegmentedFrame::empty(0)], &LevelLadder::default(), 1);
        assert!(d.level_points.iter().all(|&p| p == 0));
        assert!(d.level_bytes.windows(2).all(|w| w[0] < w[1]));
        let s = build_static_chunk(0, &[], 3, 1);
        assert!((0..=3).all(|l| s.updates(l).is_empty()));
    }

    #[test]
    fn ladder_validation() {
        assert!(LevelLadder::new(vec![[1.0, 0.5, 0.5, 0.5], [1.0, 0.4, 1.0, 1.0]]).is_err());
        assert!(LevelLadder::new(vec![[0.5, 0.5, 0.5, 0.5], [1.0; 4]]).is_err());
        assert!(LevelLadder::new(vec![[1.0, 0.5, 0.5, 0.5], [1.0, 0.9, 1.0, 1.0]]).is_err());
        assert!(LevelLadder::new(vec![[1.0, 0.5, 0.5, 0.5], [1.0; 4]]).is_ok());
    }

    #[test]
    fn base_layer_keeps_full_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_frame(&mut rng, 3, 40);
        let d = build_dynamic_chunk(0, std::slice::from_ref(&f), &LevelLadder::default(), 9);
        let base = payload_parts(&d.layers[0]);
        assert_eq!(base[&3][BodyPart::Head.index()].len(), f.part(BodyPart::Head).len());
        let top = payload_parts(&d.level_payload(3));
        for part in BodyPart::ALL {
            assert!(top[&3][part.index()].same_points(&f.part(part).quantized()));
        }
    }

    #[test]
    fn sizes_match_encoded_messages() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<_> = (0..4).map(|s| random_frame(&mut rng, s, 30)).collect();
        let d = build_dynamic_chunk(2, &frames, &LevelLadder::default(), 1);
        for l in 0..=3 {
            let total: usize = d.messages(l).iter().map(|m| encode(m).len()).sum();
            assert_eq!(total as u64, d.level_bytes[l]);
        }
        let pending = vec![cube(0, 100, 0.5, DetectLevel::High, 3.0), cube(1, 40, 1.0, DetectLevel::Low, 9.0)];
        let s = build_static_chunk(2, &pending, 3, 7);
        for l in 0..=3 {
            assert_eq!(encode(&s.message(l)).len() as u64, s.level_bytes[l]);
        }
        assert!(s.level_bytes.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(s.cubes[0].index, [1, 0, 0]);
    }

    #[test]
    fn static_levels_are_nested_and_top_is_full() {
        let pending = vec![cube(0, 200, 0.3, DetectLevel::Mid, 1.0)];
        let s = build_static_chunk(0, &pending, 3, 11);
        let mut prev: Vec<Point> = Vec::new();
        for l in 0..=3 {
            let pts = s.updates(l)[0].points.points.clone();
            assert!(prev.iter().all(|p| pts.contains(p)));
            prev = pts;
        }
        assert_eq!(prev.len(), 200);
        // 0.3 × 0.2 = 0.06 is floored
        assert_eq!(s.updates(0)[0].points.len(), 20);
    }

    #[test]
    fn fill_examples() {
        let one = vec![cube(0, 1000, 1.0, DetectLevel::High, 5.0)];
        assert!(static_budget_fill(0.0, &one, 1).chosen.is_empty());
        let f = static_budget_fill(1e9, &one, 1);
        assert_eq!(f.chosen[0].points.len(), 1000);
        assert_eq!(f.bits, (STATIC_MESSAGE_OVERHEAD as u64 + update_bytes(1000)) * 8);

        let two = vec![cube(0, 100, 1.0, DetectLevel::High, 5.0), cube(1, 100, 1.0, DetectLevel::High, 20.0)];
        let room = ((STATIC_MESSAGE_OVERHEAD as u64 + update_bytes(100)) * 8) as f64;
        let f = static_budget_fill(room, &two, 1);
        assert_eq!(f.chosen.len(), 1);
        assert_eq!(f.chosen[0].index, [1, 0, 0]);
        assert_eq!(f.deferred, vec![[0, 0, 0]]);
    }

    proptest! {
        #[test]
        fn upgrade_equals_direct_level(seed in any::<u64>(), nframes in 1usize..4, level in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<_> = (0..nframes as u64).map(|s| random_frame(&mut rng, s * 2, 25)).collect();
            let d = build_dynamic_chunk(1, &frames, &LevelLadder::default(), seed);
            prop_assert!(d.level_bytes.windows(2).all(|w| w[0] < w[1]));
            // decode level L, apply the decoded delta, compare with L+1
            let Message::DynamicChunk(base) = decode_exact(&encode(&Message::DynamicChunk(d.level_payload(level)))).unwrap() else {
                unreachable!()
            };
            let Message::LayerUpgrade(delta) = decode_exact(&encode(&d.upgrade_message(level).unwrap())).unwrap() else {
                unreachable!()
            };
            let mut acc = base;
            merge_layer(&mut acc, &delta);
            let got = payload_parts(&acc);
            let want = payload_parts(&d.level_payload(level + 1));
            prop_assert_eq!(got.len(), want.len());
            for (slot, parts) in &want {
                for (a, b) in parts.iter().zip(&got[slot]) {
                    prop_assert!(a.same_points(b));
                }
            }
        }
    }
}
