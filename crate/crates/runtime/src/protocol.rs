//! Wire format shared by every transport.
//!
//! A frame is a 4-byte little-endian payload length in bytes, a 1-byte tag, a
//! 4-byte little-endian iteration index and the payload as little-endian
//! `f64` values. Matrices are row-major.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 9;
/// Frames larger than this are rejected before allocation.
pub const MAX_PAYLOAD_BYTES: usize = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Tag {
    Setup = 1,
    PartitionData = 2,
    MinMaxReport = 3,
    BroadcastGrid = 4,
    BroadcastModel = 5,
    LoglikReport = 6,
    BroadcastPenalty = 7,
    EStatsReport = 8,
    ShrinkDirective = 9,
    GateStatsReport = 10,
    ExpertCandidateReport = 11,
    BroadcastFeatureSet = 12,
    ExpertFitReport = 13,
    CheckpointRequest = 14,
    CheckpointAck = 15,
    Restore = 16,
    Terminate = 17,
    Failure = 18,
}

impl Tag {
    pub const ALL: [Tag; 18] = [
        Tag::Setup,
        Tag::PartitionData,
        Tag::MinMaxReport,
        Tag::BroadcastGrid,
        Tag::BroadcastModel,
        Tag::LoglikReport,
        Tag::BroadcastPenalty,
        Tag::EStatsReport,
        Tag::ShrinkDirective,
        Tag::GateStatsReport,
        Tag::ExpertCandidateReport,
        Tag::BroadcastFeatureSet,
        Tag::ExpertFitReport,
        Tag::CheckpointRequest,
        Tag::CheckpointAck,
        Tag::Restore,
        Tag::Terminate,
        Tag::Failure,
    ];

    pub fn from_u8(v: u8) -> Option<Tag> {
        Tag::ALL.iter().copied().find(|t| *t as u8 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::Setup => "Setup",
            Tag::PartitionData => "PartitionData",
            Tag::MinMaxReport => "MinMaxReport",
            Tag::BroadcastGrid => "BroadcastGrid",
            Tag::BroadcastModel => "BroadcastModel",
            Tag::LoglikReport => "LoglikReport",
            Tag::BroadcastPenalty => "BroadcastPenalty",
            Tag::EStatsReport => "EStatsReport",
            Tag::ShrinkDirective => "ShrinkDirective",
            Tag::GateStatsReport => "GateStatsReport",
            Tag::ExpertCandidateReport => "ExpertCandidateReport",
            Tag::BroadcastFeatureSet => "BroadcastFeatureSet",
            Tag::ExpertFitReport => "ExpertFitReport",
            Tag::CheckpointRequest => "CheckpointRequest",
            Tag::CheckpointAck => "CheckpointAck",
            Tag::Restore => "Restore",
            Tag::Terminate => "Terminate",
            Tag::Failure => "Failure",
        }
    }
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub tag: Tag,
    pub iteration: u32,
    pub payload: Vec<f64>,
}

impl Frame {
    pub fn new(tag: Tag, iteration: u32, payload: Vec<f64>) -> Self {
        Frame { tag, iteration, payload }
    }

    /// Size on the wire.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + 8 * self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&((8 * self.payload.len()) as u32).to_le_bytes());
        out.push(self.tag as u8);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::protocol(format!("frame of {} bytes is shorter than the header", bytes.len())));
        }
        let (tag, iteration, len) = parse_header(bytes[..HEADER_LEN].try_into().unwrap())?;
        if bytes.len() != HEADER_LEN + len {
            return Err(Error::protocol(format!(
                "frame declares {len} payload bytes but carries {}",
                bytes.len() - HEADER_LEN
            )));
        }
        Ok(Frame {
            tag,
            iteration,
            payload: decode_values(&bytes[HEADER_LEN..]),
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<usize> {
        let bytes = self.encode();
        w.write_all(&bytes)?;
        Ok(bytes.len())
    }

    /// Reads one frame; returns it with its wire size.
    pub fn read_from(r: &mut impl Read) -> Result<(Frame, usize)> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        let (tag, iteration, len) = parse_header(&header)?;
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        Ok((
            Frame {
                tag,
                iteration,
                payload: decode_values(&body),
            },
            HEADER_LEN + len,
        ))
    }
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(Tag, u32, usize)> {
    let len = u32::from_le_bytes(h[0..4].try_into().unwrap()) as usize;
    let tag = Tag::from_u8(h[4]).ok_or_else(|| Error::protocol(format!("unknown tag {}", h[4])))?;
    let iteration = u32::from_le_bytes(h[5..9].try_into().unwrap());
    if len % 8 != 0 || len > MAX_PAYLOAD_BYTES {
        return Err(Error::protocol(format!("bad payload length {len}")));
    }
    Ok((tag, iteration, len))
}

fn decode_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Packs raw bytes into `f64` bit patterns: a length word, then 8 bytes per
/// value, zero-padded. Lossless because only bit patterns are moved.
pub fn pack_bytes(bytes: &[u8]) -> Vec<f64> {
    let mut out = Vec::with_capacity(1 + bytes.len().div_ceil(8));
    out.push(bytes.len() as f64);
    for chunk in bytes.chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        out.push(f64::from_bits(u64::from_le_bytes(word)));
    }
    out
}

pub fn unpack_bytes(values: &[f64]) -> Result<Vec<u8>> {
    let (&len, words) = values
        .split_first()
        .ok_or_else(|| Error::protocol("packed bytes without a length word"))?;
    let len = len as usize;
    if words.len() != len.div_ceil(8) {
        return Err(Error::protocol("packed byte length does not match its payload"));
    }
    let mut out: Vec<u8> = words.iter().flat_map(|w| w.to_bits().to_le_bytes()).collect();
    out.truncate(len);
    Ok(out)
}

/// Splits a `u64` into two exactly representable halves.
pub fn pack_u64(v: u64) -> [f64; 2] {
    [(v >> 32) as f64, (v & 0xffff_ffff) as f64]
}

pub fn unpack_u64(hi: f64, lo: f64) -> u64 {
    ((hi as u64) << 32) | lo as u64
}

/// Sizes of the per-iteration message schemas. Every one is a function of
/// the initial expert count, gate count, dimension and grid resolution only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub experts: usize,
    pub gates: usize,
    pub dim: usize,
    pub tmax: usize,
}

impl Shape {
    pub fn stats_len(&self) -> usize {
        2 * self.experts + self.gates
    }

    pub fn model_len(&self) -> usize {
        self.experts + 3 * self.gates + self.experts * (self.dim + 2)
    }

    pub fn gate_stats_len(&self) -> usize {
        self.gates * 2 * self.dim * (self.tmax - 1)
    }

    /// Payload length of the fixed-size per-iteration tags.
    pub fn payload_len(&self, tag: Tag) -> Option<usize> {
        Some(match tag {
            Tag::MinMaxReport => 2 * self.dim + 2,
            Tag::BroadcastGrid => 2 * self.dim + 1,
            Tag::BroadcastModel => self.model_len(),
            Tag::LoglikReport => 2 + self.stats_len(),
            Tag::BroadcastPenalty => 2 + self.stats_len(),
            Tag::EStatsReport => self.stats_len(),
            Tag::ShrinkDirective => self.experts,
            Tag::GateStatsReport => self.gate_stats_len(),
            Tag::ExpertCandidateReport => self.experts * (1 + self.dim),
            Tag::BroadcastFeatureSet => self.experts * self.dim,
            Tag::ExpertFitReport => self.experts * (3 + self.dim),
            Tag::Terminate => 0,
            _ => return None,
        })
    }
}
