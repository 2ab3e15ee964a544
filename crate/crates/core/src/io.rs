//! `.vten` raw tensor files and PPM/PGM frame export.
//!
//! `.vten` layout, all little-endian:
//!
//! | bytes | field                      |
//! |-------|----------------------------|
//! | 4     | magic `VTEN`               |
//! | 4     | version `u32` = 1          |
//! | 4     | ndims `u32` = 4            |
//! | 16    | dims `4 x u32` (T, C, H, W)|
//! | 4·N   | payload `f32`              |

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{checked_len, Dims, FlowField, VideoTensor};

pub const MAGIC: &[u8; 4] = b"VTEN";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 16;

pub fn encode_vten(t: &VideoTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&4u32.to_le_bytes());
    for d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_vten(bytes: &[u8], path: &Path) -> Result<VideoTensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing VTEN magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let ndims = word(8);
    if ndims != 4 {
        return Err(Error::format(path, format!("expected 4 dims, got {ndims}")));
    }
    let dims: Dims = [
        word(12) as usize,
        word(16) as usize,
        word(20) as usize,
        word(24) as usize,
    ];
    let len = checked_len(dims)
        .and_then(|n| n.checked_mul(4))
        .ok_or(Error::DimOverflow(dims))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != len {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, dims {dims:?} need {len}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    VideoTensor::new(dims, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_raw(t: &VideoTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_vten(t)).map_err(|e| Error::io(path, e))
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<VideoTensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_vten(&bytes, path)
}

pub fn save_flow(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    save_raw(flow.tensor(), path)
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    FlowField::new(load_raw(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// `round(clamp(v, 0, 1) * 255)`.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (3 channels) or PGM (1 channel) bytes for frame `t`.
pub fn encode_frame(t: &VideoTensor, frame: usize) -> Result<Vec<u8>> {
    let [_, c, h, w] = t.dims();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::Unsupported(format!(
                "frame export needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize(t.get(frame, ch, y, x)));
            }
        }
    }
    Ok(out)
}

/// Writes `frame_0000.ppm`, `frame_0001.ppm`, ... (or `.pgm`) into `dir`.
pub fn export_frames(t: &VideoTensor, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let ext = match t.channels() {
        1 => "pgm",
        3 => "ppm",
        c => {
            return Err(Error::Unsupported(format!(
                "frame export needs 1 or 3 channels, got {c}"
            )))
        }
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..t.frames() {
        let path = dir.join(format!("frame_{i:04}.{ext}"));
        let bytes = encode_frame(t, i)?;
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
