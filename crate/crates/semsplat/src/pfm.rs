//! Single-channel PFM ("Pf") depth maps.
//!
//! Rows are stored bottom to top. A negative scale line marks little-endian
//! samples; both byte orders are read, little-endian is written.

use std::fs;
use std::path::Path;

use semsplat_core::Image;

use crate::error::{IoError, Result};

/// Splits off the first whitespace-delimited token.
fn token(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let start = bytes.iter().position(|b| !b.is_ascii_whitespace())?;
    let rest = &bytes[start..];
    let end = rest.iter().position(|b| b.is_ascii_whitespace())?;
    Some((&rest[..end], &rest[end..]))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
    let (magic, rest) = token(bytes).ok_or("missing header")?;
    match magic {
        b"Pf" => {}
        b"PF" => return Err("three-channel PFM where a depth map was expected".into()),
        _ => return Err("not a PFM file".into()),
    }
    let parse = |t: &[u8]| std::str::from_utf8(t).ok().map(str::to_owned).ok_or("non-ASCII header");
    let (w, rest) = token(rest).ok_or("missing width")?;
    let (h, rest) = token(rest).ok_or("missing height")?;
    let (scale, rest) = token(rest).ok_or("missing scale")?;
    let w: usize = parse(w)?.parse().map_err(|_| "bad width")?;
    let h: usize = parse(h)?.parse().map_err(|_| "bad height")?;
    let scale: f64 = parse(scale)?.parse().map_err(|_| "bad scale")?;
    if w == 0 || h == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(format!("invalid header {w}x{h} scale {scale}"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    let data = &rest[1..];
    let expected = w.checked_mul(h).and_then(|n| n.checked_mul(4)).ok_or("size overflow")?;
    if data.len() != expected {
        return Err(format!("expected {expected} bytes of samples, found {}", data.len()));
    }
    let little = scale < 0.0;
    let mut out = Image::new(w, h, 1, 0.0);
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, row) = (k % w, k / w);
        out.set(x, h - 1 - row, v as f64);
    }
    Ok(out)
}

/// Encodes `depth` as little-endian float32; values are rounded to f32.
pub fn encode(depth: &Image) -> Vec<u8> {
    let (w, h) = (depth.width(), depth.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for row in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(depth.get(x, row) as f32).to_le_bytes());
        }
    }
    out
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode(&bytes).map_err(|m| IoError::format(path, m))
}

pub fn write(path: &Path, depth: &Image) -> Result<()> {
    if depth.channels() != 1 {
        return Err(IoError::format(path, "depth maps have one channel"));
    }
    fs::write(path, encode(depth)).map_err(|e| IoError::io(path, e))
}
