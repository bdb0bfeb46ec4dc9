//! Minimal reader for COLMAP text reconstructions (`cameras.txt` and
//! `images.txt`), used to bootstrap a manifest.
//!
//! Only `PINHOLE` and `SIMPLE_PINHOLE` cameras are accepted; distortion
//! models are rejected rather than silently ignored. COLMAP poses are
//! world-to-camera with +z forward and +y down, which is the convention used
//! here, so they are copied without conversion. The generated manifest points
//! at `masks/<stem>.png` and `depth/<stem>.pfm`, which the caller must
//! produce, and holds out every eighth view.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{IoError, Result};
use crate::manifest::{CameraRecord, Manifest, ViewRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePose {
    pub image_id: u64,
    /// Unit quaternion (w, x, y, z), world to camera.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u64,
    pub name: String,
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn nums<T: std::str::FromStr>(fields: &[&str], line: usize) -> std::result::Result<Vec<T>, String> {
    fields.iter().map(|f| f.parse().map_err(|_| format!("line {line}: cannot parse `{f}`"))).collect()
}

pub fn parse_cameras(text: &str) -> std::result::Result<BTreeMap<u64, Intrinsics>, String> {
    let mut out = BTreeMap::new();
    for (line, l) in content_lines(text) {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() < 4 {
            return Err(format!("line {line}: expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS"));
        }
        let id: u64 = f[0].parse().map_err(|_| format!("line {line}: bad camera id"))?;
        let size: Vec<usize> = nums(&f[2..4], line)?;
        let p: Vec<f64> = nums(&f[4..], line)?;
        let (fx, fy, cx, cy) = match (f[1], p.as_slice()) {
            ("PINHOLE", [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
            ("SIMPLE_PINHOLE", [f, cx, cy]) => (*f, *f, *cx, *cy),
            (model, _) => return Err(format!("line {line}: unsupported camera model {model} with {} params", p.len())),
        };
        out.insert(id, Intrinsics { width: size[0], height: size[1], fx, fy, cx, cy });
    }
    Ok(out)
}

/// Parses `images.txt`. Each image takes two lines; the second (2D points)
/// is skipped and may be empty.
pub fn parse_images(text: &str) -> std::result::Result<Vec<ImagePose>, String> {
    let mut out = Vec::new();
    let mut expect_points = false;
    for (line, raw) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if raw.starts_with('#') {
            continue;
        }
        if expect_points {
            expect_points = false;
            continue;
        }
        if raw.is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split_whitespace().collect();
        if f.len() < 10 {
            return Err(format!("line {line}: expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME"));
        }
        let v: Vec<f64> = nums(&f[1..8], line)?;
        let q = [v[0], v[1], v[2], v[3]];
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(format!("line {line}: zero quaternion"));
        }
        out.push(ImagePose {
            image_id: f[0].parse().map_err(|_| format!("line {line}: bad image id"))?,
            qvec: q.map(|c| c / n),
            tvec: [v[4], v[5], v[6]],
            camera_id: f[8].parse().map_err(|_| format!("line {line}: bad camera id"))?,
            name: f[9..].join(" "),
        });
        expect_points = true;
    }
    Ok(out)
}

/// Row-major rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_rotation(q: [f64; 4]) -> [f64; 9] {
    let [w, x, y, z] = q;
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

/// Builds a manifest from a COLMAP `sparse/0`-style text directory. Views
/// are ordered by image name.
pub fn manifest_from_colmap(sparse_dir: &Path, image_dir: &str, instance_count: usize) -> Result<Manifest> {
    let read = |name: &str| {
        let p = sparse_dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| IoError::io(&p, e)).map(|t| (p, t))
    };
    let (cam_path, cam_text) = read("cameras.txt")?;
    let (img_path, img_text) = read("images.txt")?;
    let cameras = parse_cameras(&cam_text).map_err(|m| IoError::format(&cam_path, m))?;
    let mut images = parse_images(&img_text).map_err(|m| IoError::format(&img_path, m))?;
    images.sort_by(|a, b| a.name.cmp(&b.name));

    let mut views = Vec::with_capacity(images.len());
    for img in &images {
        let k = cameras
            .get(&img.camera_id)
            .ok_or_else(|| IoError::format(&img_path, format!("image {} uses unknown camera {}", img.name, img.camera_id)))?;
        let stem = Path::new(&img.name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        views.push(ViewRecord {
            name: Some(stem.clone()),
            image: PathBuf::from(image_dir).join(&img.name),
            mask: PathBuf::from("masks").join(format!("{stem}.png")),
            depth: PathBuf::from("depth").join(format!("{stem}.pfm")),
            gt_depth: None,
            camera: CameraRecord {
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
                rotation: quat_to_rotation(img.qvec),
                translation: img.tvec,
                width: k.width,
                height: k.height,
            },
        });
    }
    let (holdout, train): (Vec<usize>, Vec<usize>) = (0..views.len()).partition(|i| views.len() > 1 && i % 8 == 0);
    Ok(Manifest { instance_count, train, holdout, bounds: None, views })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAMERAS: &str = "# Camera list\n1 PINHOLE 64 48 50 51 32 24\n2 SIMPLE_PINHOLE 10 10 7 5 5\n";
    const IMAGES: &str = "# Image list\n\
        1 1 0 0 0 0 0 4 1 b.png\n\
        10 20 30 -1 5 7\n\
        2 0.7071067811865476 0 0.7071067811865476 0 1 2 3 2 a.png\n\
        \n";

    #[test]
    fn parses_both_pinhole_models() {
        let c = parse_cameras(CAMERAS).unwrap();
        assert_eq!(c[&1], Intrinsics { width: 64, height: 48, fx: 50.0, fy: 51.0, cx: 32.0, cy: 24.0 });
        assert_eq!(c[&2].fx, 7.0);
        assert_eq!(c[&2].fy, 7.0);
        assert!(parse_cameras("3 OPENCV 10 10 1 1 5 5 0 0 0 0").is_err());
    }

    #[test]
    fn image_entries_skip_their_point_lines() {
        let imgs = parse_images(IMAGES).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0].name, "b.png");
        assert_eq!(imgs[1].camera_id, 2);
        assert_eq!(imgs[1].tvec, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn quarter_turn_about_y_maps_x_to_minus_z() {
        let r = quat_to_rotation([0.5f64.sqrt(), 0.0, 0.5f64.sqrt(), 0.0]);
        let x = [r[0], r[3], r[6]];
        assert!((x[0]).abs() < 1e-12 && (x[2] + 1.0).abs() < 1e-12, "{x:?}");
    }

    #[test]
    fn manifest_from_text_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cameras.txt"), CAMERAS).unwrap();
        std::fs::write(dir.path().join("images.txt"), IMAGES).unwrap();
        let m = manifest_from_colmap(dir.path(), "images", 3).unwrap();
        assert_eq!(m.views[0].name.as_deref(), Some("a"));
        assert_eq!(m.views[0].mask, PathBuf::from("masks/a.png"));
        assert_eq!(m.holdout, vec![0]);
        assert_eq!(m.train, vec![1]);
        assert!(m.views[1].camera.to_camera().is_ok());
    }
}
