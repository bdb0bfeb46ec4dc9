//! Binary checkpoints.
//!
//! Layout, all little-endian: magic `TSGS`, format version (u32), N (u64),
//! C (u64), SH degree (u32), then float32 arrays in this order: centers,
//! log-scales, rotations, opacity logits, colors, identity codes, head
//! weight, head bias; finally the iteration (u64).

use std::fs;
use std::io::Write;
use std::path::Path;

use semsplat_core::scene::ID_DIM;
use semsplat_core::{ClassHead, GaussianCloud};

use crate::error::{IoError, Result};

pub const MAGIC: &[u8; 4] = b"TSGS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cloud: GaussianCloud,
    pub head: ClassHead,
    pub iteration: u64,
}

fn push_f32(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes to the container format. Parameters are rounded to f32.
pub fn encode(cloud: &GaussianCloud, head: &ClassHead, iteration: u64) -> Vec<u8> {
    let n = cloud.len();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(head.instance_count() as u64).to_le_bytes());
    out.extend_from_slice(&(cloud.sh_degree() as u32).to_le_bytes());
    push_f32(&mut out, cloud.centers.iter().flatten().copied());
    push_f32(&mut out, cloud.log_scales.iter().flatten().copied());
    push_f32(&mut out, cloud.rotations.iter().flatten().copied());
    push_f32(&mut out, cloud.opacity_logits.iter().copied());
    push_f32(&mut out, cloud.colors.iter().flatten().copied());
    push_f32(&mut out, cloud.identity_codes.iter().flatten().copied());
    push_f32(&mut out, head.weight.iter().copied());
    push_f32(&mut out, head.bias.iter().copied());
    out.extend_from_slice(&iteration.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            format!("truncated while reading {what} at byte {} ({} bytes total)", self.pos, self.bytes.len())
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, count: usize, what: &str) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(count.checked_mul(4).ok_or("length overflow")?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
}

fn chunk<const K: usize>(v: Vec<f64>) -> Vec<[f64; K]> {
    v.chunks_exact(K).map(|c| c.try_into().expect("exact chunk")).collect()
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("bad magic, not a checkpoint".into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let n = usize::try_from(r.u64("gaussian count")?).map_err(|_| "gaussian count overflows")?;
    let c = usize::try_from(r.u64("instance count")?).map_err(|_| "instance count overflows")?;
    let degree = r.u32("sh degree")?;
    if degree > semsplat_core::sh::MAX_DEGREE as u32 {
        return Err(format!("sh degree {degree} exceeds 3"));
    }
    let coeffs = semsplat_core::sh::coeff_count(degree as u8);
    // Reject absurd headers before allocating.
    let floats = n
        .checked_mul(3 + 3 + 4 + 1 + 3 * coeffs + ID_DIM)
        .and_then(|v| v.checked_add(c.checked_add(1)?.checked_mul(ID_DIM + 1)?))
        .ok_or("header sizes overflow")?;
    let expected = floats.checked_mul(4).and_then(|v| v.checked_add(r.pos + 8)).ok_or("header sizes overflow")?;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes for N={n}, C={c}, degree {degree}; found {}", bytes.len()));
    }
    let mut cloud = GaussianCloud::empty(degree as u8).map_err(|e| e.to_string())?;
    cloud.centers = chunk(r.f32s(3 * n, "centers")?);
    cloud.log_scales = chunk(r.f32s(3 * n, "log_scales")?);
    cloud.rotations = chunk(r.f32s(4 * n, "rotations")?);
    cloud.opacity_logits = r.f32s(n, "opacity_logits")?;
    cloud.colors = chunk(r.f32s(3 * coeffs * n, "colors")?);
    cloud.identity_codes = chunk(r.f32s(ID_DIM * n, "identity_codes")?);
    let weight = r.f32s(ID_DIM * (c + 1), "head weight")?;
    let bias = r.f32s(c + 1, "head bias")?;
    let iteration = r.u64("iteration")?;
    Ok(Checkpoint { cloud, head: ClassHead { weight, bias }, iteration })
}

/// Writes atomically: the bytes go to a sibling temporary file that is then
/// renamed over `path`.
pub fn save(path: &Path, cloud: &GaussianCloud, head: &ClassHead, iteration: u64) -> Result<()> {
    let bytes = encode(cloud, head, iteration);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| IoError::io(&tmp, e))?;
    f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| IoError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| IoError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode(&bytes).map_err(|message| IoError::Corrupt { path: path.to_path_buf(), message })
}
