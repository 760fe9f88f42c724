//! `SVXP` point-cloud frames.
//!
//! ```text
//! magic      "SVXP"
//! count      u32
//! points     count x (x, y, z, intensity) f32
//! timestamp  f64
//! frame_id   u32
//! ```
//!
//! All little-endian; the byte length must equal `16 + 16 * count`.

use std::path::Path;

use super::weights::check_magic;
use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::voxelizer::PointCloud;

pub const FRAME_MAGIC: [u8; 4] = *b"SVXP";

pub fn encode_frame(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 16 * pc.points.len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&(pc.points.len() as u32).to_le_bytes());
    for p in &pc.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&pc.timestamp.to_le_bytes());
    out.extend_from_slice(&pc.frame_id.to_le_bytes());
    out
}

pub fn decode_frame(buf: &[u8]) -> Result<PointCloud> {
    check_magic(buf, FRAME_MAGIC)?;
    if buf.len() < 8 {
        return Err(Error::Truncated("point count".into()));
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let expected = 8 + 16 * n + 12;
    if buf.len() < expected {
        return Err(Error::Truncated(format!("{n} points need {expected} bytes, found {}", buf.len())));
    }
    if buf.len() > expected {
        return Err(Error::Malformed(format!("{n} points need {expected} bytes, found {}", buf.len())));
    }
    let f = |i: usize| f32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
    let points = (0..n)
        .map(|k| {
            let b = 8 + 16 * k;
            [f(b), f(b + 4), f(b + 8), f(b + 12)]
        })
        .collect();
    let t = 8 + 16 * n;
    Ok(PointCloud {
        points,
        timestamp: f64::from_le_bytes(buf[t..t + 8].try_into().unwrap()),
        frame_id: u32::from_le_bytes(buf[t + 8..t + 12].try_into().unwrap()),
    })
}

pub fn read_frame(path: &Path) -> Result<PointCloud> {
    decode_frame(&read_bytes(path)?)
}

pub fn write_frame(path: &Path, pc: &PointCloud) -> Result<()> {
    write_bytes(path, &encode_frame(pc))
}
