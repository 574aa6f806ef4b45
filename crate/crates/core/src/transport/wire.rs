//! Byte-exact message framing.
//!
//! Every message is a 10-byte header followed by its payload:
//!
//! | bytes | field                              |
//! |-------|------------------------------------|
//! | 0..4  | magic `LVVS`                       |
//! | 4     | version (1)                        |
//! | 5     | message type                       |
//! | 6..10 | payload length, u32 little-endian  |
//!
//! All integers and floats are little-endian. A point is `f32 x, y, z`
//! followed by `u8 r, g, b` (15 bytes).

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point;
use crate::scene_reuse::{CellIndex, UpdateAction};
use crate::segmentation::PART_COUNT;

pub const MAGIC: [u8; 4] = *b"LVVS";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const POINT_BYTES: usize = 15;
/// Upper bound accepted for a single payload.
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageType {
    Hello = 0,
    DynamicChunk = 1,
    StaticUpdate = 2,
    LayerUpgrade = 3,
    ViewportReport = 4,
    ThroughputReport = 5,
    End = 6,
}

impl MessageType {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MessageType::*;
        Some(match v {
            0 => Hello,
            1 => DynamicChunk,
            2 => StaticUpdate,
            3 => LayerUpgrade,
            4 => ViewportReport,
            5 => ThroughputReport,
            6 => End,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol error at byte {offset}: {kind}")]
pub struct ProtocolError {
    pub offset: usize,
    pub kind: ProtocolErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolErrorKind {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated input")]
    Truncated,
    #[error("payload length {0} exceeds limit")]
    Oversized(u32),
    #[error("{0} trailing payload bytes")]
    TrailingBytes(usize),
    #[error("invalid field: {0}")]
    InvalidField(&'static str),
}

/// Points of one body part in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartPayload {
    pub label: u8,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub slot: u32,
    pub parts: Vec<PartPayload>,
}

/// Body payload of a dynamic chunk (level 0) or one upgrade layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkPayload {
    pub chunk: u32,
    pub level: u8,
    pub frames: Vec<FramePayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCubeUpdate {
    pub cell: CellIndex,
    pub action: UpdateAction,
    pub fraction: f32,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticPayload {
    pub chunk: u32,
    pub level: u8,
    pub updates: Vec<WireCubeUpdate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewportReport {
    pub timestamp_us: i64,
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub chunk: u32,
    pub bytes: u64,
    pub duration_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    Hello,
    DynamicChunk(ChunkPayload),
    StaticUpdate(StaticPayload),
    LayerUpgrade(ChunkPayload),
    ViewportReport(ViewportReport),
    ThroughputReport(ThroughputReport),
    End,
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::Hello => MessageType::Hello,
            Message::DynamicChunk(_) => MessageType::DynamicChunk,
            Message::StaticUpdate(_) => MessageType::StaticUpdate,
            Message::LayerUpgrade(_) => MessageType::LayerUpgrade,
            Message::ViewportReport(_) => MessageType::ViewportReport,
            Message::ThroughputReport(_) => MessageType::ThroughputReport,
            Message::End => MessageType::End,
        }
    }

    /// Exact framed size in bytes without encoding.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload_len()
    }

    fn payload_len(&self) -> usize {
        match self {
            Message::Hello | Message::End => 0,
            Message::DynamicChunk(c) | Message::LayerUpgrade(c) => chunk_payload_len(c),
            Message::StaticUpdate(s) => static_payload_len(s),
            Message::ViewportReport(_) => 8 + 6 * 8,
            Message::ThroughputReport(_) => 4 + 8 + 8,
        }
    }
}

pub fn chunk_payload_len(c: &ChunkPayload) -> usize {
    4 + 1
        + 2
        + c.frames
            .iter()
            .map(|f| 4 + 1 + f.parts.iter().map(|p| 1 + 4 + POINT_BYTES * p.points.len()).sum::<usize>())
            .sum::<usize>()
}

pub fn static_payload_len(s: &StaticPayload) -> usize {
    4 + 1 + 4 + s.updates.iter().map(|u| STATIC_UPDATE_OVERHEAD + POINT_BYTES * u.points.len()).sum::<usize>()
}

/// Bytes of one cube update besides its points.
pub const STATIC_UPDATE_OVERHEAD: usize = 12 + 1 + 4 + 4;
/// Bytes of a static message besides its updates.
pub const STATIC_MESSAGE_OVERHEAD: usize = HEADER_LEN + 4 + 1 + 4;

fn put_point(out: &mut Vec<u8>, p: &Point) {
    out.extend_from_slice(&(p.x as f32).to_le_bytes());
    out.extend_from_slice(&(p.y as f32).to_le_bytes());
    out.extend_from_slice(&(p.z as f32).to_le_bytes());
    out.extend_from_slice(&[p.r, p.g, p.b]);
}

fn put_chunk(out: &mut Vec<u8>, c: &ChunkPayload) {
    out.extend_from_slice(&c.chunk.to_le_bytes());
    out.push(c.level);
    out.extend_from_slice(&(c.frames.len() as u16).to_le_bytes());
    for f in &c.frames {
        out.extend_from_slice(&f.slot.to_le_bytes());
        out.push(f.parts.len() as u8);
        for p in &f.parts {
            out.push(p.label);
            out.extend_from_slice(&(p.points.len() as u32).to_le_bytes());
            for pt in &p.points {
                put_point(out, pt);
            }
        }
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.message_type() as u8);
    out.extend_from_slice(&(msg.payload_len() as u32).to_le_bytes());
    match msg {
        Message::Hello | Message::End => {}
        Message::DynamicChunk(c) | Message::LayerUpgrade(c) => put_chunk(&mut out, c),
        Message::StaticUpdate(s) => {
            out.extend_from_slice(&s.chunk.to_le_bytes());
            out.push(s.level);
            out.extend_from_slice(&(s.updates.len() as u32).to_le_bytes());
            for u in &s.updates {
                for v in u.cell {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.push(match u.action {
                    UpdateAction::Replace => 0,
                    UpdateAction::Clear => 1,
                });
                out.extend_from_slice(&u.fraction.to_le_bytes());
                out.extend_from_slice(&(u.points.len() as u32).to_le_bytes());
                for pt in &u.points {
                    put_point(&mut out, pt);
                }
            }
        }
        Message::ViewportReport(v) => {
            out.extend_from_slice(&v.timestamp_us.to_le_bytes());
            for x in [v.position[0], v.position[1], v.position[2], v.yaw, v.pitch, v.roll] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Message::ThroughputReport(t) => {
            out.extend_from_slice(&t.chunk.to_le_bytes());
            out.extend_from_slice(&t.bytes.to_le_bytes());
            out.extend_from_slice(&t.duration_us.to_le_bytes());
        }
    }
    debug_assert_eq!(out.len(), msg.encoded_len());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Offset of `buf[0]` in the whole input, for error reporting.
    base: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, kind: ProtocolErrorKind) -> ProtocolError {
        ProtocolError {
            offset: self.base + self.pos,
            kind,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(ProtocolErrorKind::Truncated));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32, ProtocolError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, ProtocolError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, ProtocolError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finite_f64(&mut self, what: &'static str) -> Result<f64, ProtocolError> {
        let at = self.pos;
        let v = self.f64()?;
        if !v.is_finite() {
            self.pos = at;
            return Err(self.err(ProtocolErrorKind::InvalidField(what)));
        }
        Ok(v)
    }

    fn point(&mut self) -> Result<Point, ProtocolError> {
        let at = self.pos;
        let b = self.take(POINT_BYTES)?;
        let x = f32::from_le_bytes(b[0..4].try_into().unwrap());
        let y = f32::from_le_bytes(b[4..8].try_into().unwrap());
        let z = f32::from_le_bytes(b[8..12].try_into().unwrap());
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            self.pos = at;
            return Err(self.err(ProtocolErrorKind::InvalidField("point coordinate")));
        }
        Ok(Point {
            x: x as f64,
            y: y as f64,
            z: z as f64,
            r: b[12],
            g: b[13],
            b: b[14],
        })
    }

    /// Reads a count and checks the remaining bytes can hold that many
    /// items of at least `min_item` bytes.
    fn count(&mut self, n: usize, min_item: usize) -> Result<usize, ProtocolError> {
        if n.saturating_mul(min_item) > self.remaining() {
            return Err(self.err(ProtocolErrorKind::Truncated));
        }
        Ok(n)
    }

    fn points(&mut self) -> Result<Vec<Point>, ProtocolError> {
        let n = self.u32()? as usize;
        let n = self.count(n, POINT_BYTES)?;
        (0..n).map(|_| self.point()).collect()
    }
}

fn decode_chunk(c: &mut Cursor) -> Result<ChunkPayload, ProtocolError> {
    let chunk = c.u32()?;
    let level = c.u8()?;
    let nframes = c.u16()? as usize;
    let nframes = c.count(nframes, 5)?;
    let mut frames = Vec::with_capacity(nframes);
    for _ in 0..nframes {
        let slot = c.u32()?;
        let nparts = c.u8()? as usize;
        let nparts = c.count(nparts, 5)?;
        let mut parts = Vec::with_capacity(nparts);
        for _ in 0..nparts {
            let at = c.pos;
            let label = c.u8()?;
            if label as usize >= PART_COUNT {
                c.pos = at;
                return Err(c.err(ProtocolErrorKind::InvalidField("part label")));
            }
            parts.push(PartPayload {
                label,
                points: c.points()?,
            });
        }
        frames.push(FramePayload { slot, parts });
    }
    Ok(ChunkPayload { chunk, level, frames })
}

fn decode_static(c: &mut Cursor) -> Result<StaticPayload, ProtocolError> {
    let chunk = c.u32()?;
    let level = c.u8()?;
    let n = c.u32()? as usize;
    let n = c.count(n, STATIC_UPDATE_OVERHEAD)?;
    let mut updates = Vec::with_capacity(n);
    for _ in 0..n {
        let cell = [c.i32()?, c.i32()?, c.i32()?];
        let at = c.pos;
        let action = match c.u8()? {
            0 => UpdateAction::Replace,
            1 => UpdateAction::Clear,
            _ => {
                c.pos = at;
                return Err(c.err(ProtocolErrorKind::InvalidField("cube action")));
            }
        };
        let at = c.pos;
        let fraction = c.f32()?;
        if !(fraction.is_finite() && (0.0..=1.0).contains(&fraction)) {
            c.pos = at;
            return Err(c.err(ProtocolErrorKind::InvalidField("cube fraction")));
        }
        let at = c.pos;
        let points = c.points()?;
        if action == UpdateAction::Clear && !points.is_empty() {
            c.pos = at;
            return Err(c.err(ProtocolErrorKind::InvalidField("clear carries points")));
        }
        updates.push(WireCubeUpdate {
            cell,
            action,
            fraction,
            points,
        });
    }
    Ok(StaticPayload { chunk, level, updates })
}

/// Parses and validates a header, returning the type and payload length.
pub fn decode_header(buf: &[u8]) -> Result<(MessageType, u32), ProtocolError> {
    let mut c = Cursor { buf, pos: 0, base: 0 };
    let magic = c.take(4)?;
    if magic != MAGIC {
        return Err(ProtocolError {
            offset: 0,
            kind: ProtocolErrorKind::BadMagic,
        });
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(ProtocolError {
            offset: 4,
            kind: ProtocolErrorKind::BadVersion(version),
        });
    }
    let t = c.u8()?;
    let ty = MessageType::from_u8(t).ok_or(ProtocolError {
        offset: 5,
        kind: ProtocolErrorKind::UnknownType(t),
    })?;
    let len = c.u32()?;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError {
            offset: 6,
            kind: ProtocolErrorKind::Oversized(len),
        });
    }
    Ok((ty, len))
}

fn decode_payload(ty: MessageType, payload: &[u8], base: usize) -> Result<Message, ProtocolError> {
    let mut c = Cursor { buf: payload, pos: 0, base };
    let msg = match ty {
        MessageType::Hello => Message::Hello,
        MessageType::End => Message::End,
        MessageType::DynamicChunk => Message::DynamicChunk(decode_chunk(&mut c)?),
        MessageType::LayerUpgrade => Message::LayerUpgrade(decode_chunk(&mut c)?),
        MessageType::StaticUpdate => Message::StaticUpdate(decode_static(&mut c)?),
        MessageType::ViewportReport => Message::ViewportReport(ViewportReport {
            timestamp_us: c.i64()?,
            position: [
                c.finite_f64("viewport position")?,
                c.finite_f64("viewport position")?,
                c.finite_f64("viewport position")?,
            ],
            yaw: c.finite_f64("viewport yaw")?,
            pitch: c.finite_f64("viewport pitch")?,
            roll: c.finite_f64("viewport roll")?,
        }),
        MessageType::ThroughputReport => Message::ThroughputReport(ThroughputReport {
            chunk: c.u32()?,
            bytes: c.u64()?,
            duration_us: c.u64()?,
        }),
    };
    if c.remaining() != 0 {
        return Err(c.err(ProtocolErrorKind::TrailingBytes(c.remaining())));
    }
    Ok(msg)
}

/// Decodes one message from the front of `buf`, returning it and the
/// number of bytes consumed.
pub fn decode(buf: &[u8]) -> Result<(Message, usize), ProtocolError> {
    let (ty, len) = decode_header(buf)?;
    let end = HEADER_LEN + len as usize;
    if buf.len() < end {
        return Err(ProtocolError {
            offset: buf.len(),
            kind: ProtocolErrorKind::Truncated,
        });
    }
    let msg = decode_payload(ty, &buf[HEADER_LEN..end], HEADER_LEN)?;
    Ok((msg, end))
}

/// Decodes a buffer that must hold exactly one message.
pub fn decode_exact(buf: &[u8]) -> Result<Message, ProtocolError> {
    let (msg, used) = decode(buf)?;
    if used != buf.len() {
        return Err(ProtocolError {
            offset: used,
            kind: ProtocolErrorKind::TrailingBytes(buf.len() - used),
        });
    }
    Ok(msg)
}

/// Decodes a concatenation of messages.
pub fn decode_stream(mut buf: &[u8]) -> Result<Vec<Message>, ProtocolError> {
    let mut out = Vec::new();
    let mut base = 0;
    while !buf.is_empty() {
        let (m, used) = decode(buf).map_err(|mut e| {
            e.offset += base;
            e
        })?;
        out.push(m);
        buf = &buf[used..];
        base += used;
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&encode(msg))
}

/// Reads one message; `Ok(None)` on a clean end of stream.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, StreamError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let n = r.read(&mut header[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(ProtocolError {
                offset: got,
                kind: ProtocolErrorKind::Truncated,
            }
            .into());
        }
        got += n;
    }
    let (ty, len) = decode_header(&header)?;
    let mut payload = Vec::new();
    r.take(len as u64).read_to_end(&mut payload)?;
    if payload.len() != len as usize {
        return Err(ProtocolError {
            offset: HEADER_LEN + payload.len(),
            kind: ProtocolErrorKind::Truncated,
        }
        .into());
    }
    Ok(Some(decode_payload(ty, &payload, HEADER_LEN)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(x: f32, y: f32, z: f32, c: u8) -> Point {
        Point::new(x as f64, y as f64, z as f64, [c, c.wrapping_add(1), c.wrapping_add(2)])
    }

    #[test]
    fn hello_frame_bytes() {
        assert_eq!(encode(&Message::Hello), vec![0x4C, 0x56, 0x56, 0x53, 0x01, 0x00, 0x00, 0x00, 0x00, 0x00]);
        assert_eq!(decode_exact(&encode(&Message::End)).unwrap(), Message::End);
    }

    #[test]
    fn two_point_chunk_round_trips() {
        let msg = Message::DynamicChunk(ChunkPayload {
            chunk: 7,
            level: 0,
            frames: vec![FramePayload {
                slot: 3,
                parts: vec![PartPayload {
                    label: 0,
                    points: vec![pt(1.0, 2.0, 3.0, 9), pt(-0.5, 0.25, 8.0, 200)],
                }],
            }],
        });
        let bytes = encode(&msg);
        assert_eq!(bytes.len(), HEADER_LEN + 4 + 1 + 2 + 4 + 1 + 1 + 4 + 30);
        let back = decode_exact(&bytes).unwrap();
        assert_eq!(back, msg);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn header_errors_carry_offsets() {
        let mut b = encode(&Message::Hello);
        b[0] = b'X';
        assert_eq!(decode(&b).unwrap_err().kind, ProtocolErrorKind::BadMagic);
        let mut b = encode(&Message::Hello);
        b[4] = 2;
        assert_eq!(decode(&b).unwrap_err(), ProtocolError { offset: 4, kind: ProtocolErrorKind::BadVersion(2) });
        let mut b = encode(&Message::Hello);
        b[5] = 9;
        assert_eq!(decode(&b).unwrap_err().offset, 5);
        let mut b = encode(&Message::Hello);
        b[6] = 1;
        assert_eq!(decode(&b).unwrap_err().kind, ProtocolErrorKind::Truncated);
        b.push(0);
        assert_eq!(decode(&b).unwrap_err().kind, ProtocolErrorKind::TrailingBytes(1));
    }

    #[test]
    fn stream_io_round_trip() {
        let msgs = vec![
            Message::Hello,
            Message::ThroughputReport(ThroughputReport { chunk: 1, bytes: 99, duration_us: 5 }),
            Message::End,
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_message(&mut buf, m).unwrap();
        }
        assert_eq!(decode_stream(&buf).unwrap(), msgs);
        let mut r = &buf[..];
        let mut got = Vec::new();
        while let Some(m) = read_message(&mut r).unwrap() {
            got.push(m);
        }
        assert_eq!(got, msgs);
        let mut short = &buf[..buf.len() - 3];
        let mut err = None;
        loop {
            match read_message(&mut short) {
                Ok(Some(_)) => continue,
                Ok(None) => break,
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        assert!(matches!(err, Some(StreamError::Protocol(_))));
    }

    fn arb_point() -> impl Strategy<Value = Point> {
        (-1e3f32..1e3, -1e3f32..1e3, -1e3f32..1e3, any::<[u8; 3]>())
            .prop_map(|(x, y, z, c)| Point::new(x as f64, y as f64, z as f64, c))
    }

    fn arb_chunk() -> impl Strategy<Value = ChunkPayload> {
        (
            any::<u32>(),
            any::<u8>(),
            prop::collection::vec(
                (any::<u32>(), prop::collection::vec((0u8..15, prop::collection::vec(arb_point(), 0..5)), 0..4)),
                0..4,
            ),
        )
            .prop_map(|(chunk, level, frames)| ChunkPayload {
                chunk,
                level,
                frames: frames
                    .into_iter()
                    .map(|(slot, parts)| FramePayload {
                        slot,
                        parts: parts.into_iter().map(|(label, points)| PartPayload { label, points }).collect(),
                    })
                    .collect(),
            })
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let upd = (any::<[i32; 3]>(), any::<bool>(), 0.0f32..=1.0, prop::collection::vec(arb_point(), 0..5)).prop_map(
            |(cell, clear, fraction, points)| WireCubeUpdate {
                cell,
                action: if clear { UpdateAction::Clear } else { UpdateAction::Replace },
                fraction,
                points: if clear { vec![] } else { points },
            },
        );
        prop_oneof![
            Just(Message::Hello),
            Just(Message::End),
            arb_chunk().prop_map(Message::DynamicChunk),
            arb_chunk().prop_map(Message::LayerUpgrade),
            (any::<u32>(), any::<u8>(), prop::collection::vec(upd, 0..4))
                .prop_map(|(chunk, level, updates)| Message::StaticUpdate(StaticPayload { chunk, level, updates })),
            (any::<i64>(), -1e6f64..1e6, -1e6f64..1e6, -1e6f64..1e6, -10.0f64..10.0).prop_map(|(t, x, y, z, a)| {
                Message::ViewportReport(ViewportReport { timestamp_us: t, position: [x, y, z], yaw: a, pitch: -a, roll: a / 2.0 })
            }),
            (any::<u32>(), any::<u64>(), any::<u64>())
                .prop_map(|(chunk, bytes, duration_us)| Message::ThroughputReport(ThroughputReport { chunk, bytes, duration_us })),
        ]
    }

    proptest! {
        #[test]
        fn every_message_round_trips(msg in arb_message()) {
            let bytes = encode(&msg);
            prop_assert_eq!(bytes.len(), msg.encoded_len());
            prop_assert_eq!(decode_exact(&bytes).unwrap(), msg);
        }

        #[test]
        fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn corrupted_frames_never_panic(msg in arb_message(), flips in prop::collection::vec((any::<usize>(), any::<u8>()), 1..6)) {
            let mut bytes = encode(&msg);
            for (i, v) in flips {
                let n = bytes.len();
                bytes[i % n] ^= v;
            }
            let _ = decode(&bytes);
        }
    }
}
