//! The dataset manifest: a TOML file listing views, splits and cameras.
//!
//! ```toml
//! instance_count = 2
//! train = [0, 2]
//! holdout = [1]
//!
//! [bounds]               # optional; derived from the cameras when absent
//! min = [-1.0, -1.0, -1.0]
//! max = [1.0, 1.0, 1.0]
//!
//! [[views]]
//! name = "000"           # optional
//! image = "images/000.png"
//! mask = "masks/000.png"
//! depth = "depth/000.pfm"
//! gt_depth = "gt_depth/000.pfm"   # optional, used only for evaluation
//! [views.camera]
//! fx = 80.0
//! fy = 80.0
//! cx = 32.0
//! cy = 32.0
//! rotation = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]  # world to camera, row-major
//! translation = [0.0, 0.0, 4.0]
//! width = 64
//! height = 64
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semsplat_core::{Aabb, Camera};

use crate::error::{IoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl CameraRecord {
    pub fn to_camera(&self) -> semsplat_core::Result<Camera> {
        let r = &self.rotation;
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            self.translation,
            self.width,
            self.height,
        )
    }

    pub fn from_camera(c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]],
            translation: c.translation,
            width: c.width,
            height: c.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsRecord {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl From<BoundsRecord> for Aabb {
    fn from(b: BoundsRecord) -> Self {
        Aabb::new(b.min, b.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub depth: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_depth: Option<PathBuf>,
    pub camera: CameraRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub instance_count: usize,
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsRecord>,
    pub views: Vec<ViewRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        toml::from_str(&text).map_err(|e| IoError::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| IoError::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| IoError::io(path, e))
    }

    /// Display name of view `i`.
    pub fn view_name(&self, i: usize) -> String {
        self.views[i].name.clone().unwrap_or_else(|| format!("{i:03}"))
    }
}

/// Scene bounds when the manifest gives none: a cube around the point
/// closest (in least squares) to every optical axis, with half-width a
/// quarter of the mean camera distance to it.
pub fn bounds_from_cameras(cameras: &[Camera]) -> Option<Aabb> {
    use nalgebra::{Matrix3, Vector3};
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for c in cameras {
        let p = Vector3::from(c.position());
        let d = Vector3::from(c.rotation[2]);
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * p;
    }
    let target = a.try_inverse()? * b;
    let mean_dist =
        cameras.iter().map(|c| (Vector3::from(c.position()) - target).norm()).sum::<f64>() / cameras.len() as f64;
    let h = 0.25 * mean_dist;
    let bounds = Aabb::new(
        [target.x - h, target.y - h, target.z - h],
        [target.x + h, target.y + h, target.z + h],
    );
    (!bounds.is_degenerate()).then_some(bounds)
}
