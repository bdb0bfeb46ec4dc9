use alloc::vec::Vec;
use core::cmp::Ordering;

use super::{DILATION, MIN_ALPHA, NEAR_PLANE};
use crate::math::{self, Sym2, Vec3};
use crate::scene::{Camera, GaussianCloud};
use crate::sh;

/// A Gaussian projected into one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    /// Pixel coordinates; pixel `(x, y)` is sampled at `(x + 0.5, y + 0.5)`.
    pub mean2d: [f64; 2],
    /// Screen covariance including the low-pass dilation, px².
    pub cov2d: Sym2,
    /// Inverse of `cov2d`.
    pub conic: Sym2,
    /// Camera-space z.
    pub view_depth: f64,
    /// Linear RGB for this view direction.
    pub eval_color: [f64; 3],
    /// Activated opacity.
    pub opacity: f64,
    /// Half-width of the square outside which influence is below the skip threshold.
    pub radius: f64,
    pub source_index: usize,
    /// Covered pixel rectangle `[x0, y0, x1, y1)`.
    pub(crate) rect: [usize; 4],
}

/// Squared Mahalanobis radius beyond which influence is below [`MIN_ALPHA`]
/// for any opacity ≤ 1.
pub(crate) fn support_mahalanobis2() -> f64 {
    -2.0 * math::ln(MIN_ALPHA)
}

pub(crate) fn depth_order(a: &ProjectedGaussian, b: &ProjectedGaussian) -> Ordering {
    a.view_depth.total_cmp(&b.view_depth).then(a.source_index.cmp(&b.source_index))
}

/// Projects every Gaussian into `camera`.
///
/// Gaussians at or behind the near plane, with a degenerate screen
/// covariance or with no pixel inside their support are dropped. The result
/// is sorted by view depth, ties broken by source index.
pub fn project(cloud: &GaussianCloud, camera: &Camera) -> Vec<ProjectedGaussian> {
    let cam_pos = camera.position();
    let support = support_mahalanobis2();
    let mut out: Vec<ProjectedGaussian> = (0..cloud.len())
        .filter_map(|i| project_one(cloud, camera, &cam_pos, support, i))
        .collect();
    out.sort_by(depth_order);
    out
}

/// World-space covariance `R S² Rᵀ` of Gaussian `i`.
pub(crate) fn covariance3d(cloud: &GaussianCloud, i: usize) -> [[f64; 3]; 3] {
    let r = math::quat_to_mat(&math::quat_normalize(&cloud.rotations[i]));
    let s = cloud.scales(i);
    let mut cov = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            cov[a][b] = (0..3).map(|k| r[a][k] * s[k] * s[k] * r[b][k]).sum();
        }
    }
    cov
}

/// Perspective Jacobian rows of `(u, v)` with respect to camera-space position.
pub(crate) fn perspective_jacobian(camera: &Camera, p: &Vec3) -> [[f64; 3]; 2] {
    let z = p[2];
    [
        [camera.fx / z, 0.0, -camera.fx * p[0] / (z * z)],
        [0.0, camera.fy / z, -camera.fy * p[1] / (z * z)],
    ]
}

/// `J W` where `W` is the camera rotation.
pub(crate) fn jw(camera: &Camera, j: &[[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let w = &camera.rotation;
    let mut m = [[0.0; 3]; 2];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| j[r][k] * w[k][c]).sum();
        }
    }
    m
}

pub(crate) fn screen_covariance(m: &[[f64; 3]; 2], cov3: &[[f64; 3]; 3]) -> Sym2 {
    let mut t = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            t[r][c] = (0..3).map(|k| m[r][k] * cov3[k][c]).sum();
        }
    }
    let e = |r: usize, c: usize| -> f64 { (0..3).map(|k| t[r][k] * m[c][k]).sum() };
    [e(0, 0) + DILATION, e(0, 1), e(1, 1) + DILATION]
}

fn project_one(
    cloud: &GaussianCloud,
    camera: &Camera,
    cam_pos: &Vec3,
    support: f64,
    i: usize,
) -> Option<ProjectedGaussian> {
    let p = camera.world_to_camera(&cloud.centers[i]);
    if !(p[2] > NEAR_PLANE) {
        return None;
    }
    let mean2d = [camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy];
    let j = perspective_jacobian(camera, &p);
    let m = jw(camera, &j);
    let cov2d = screen_covariance(&m, &covariance3d(cloud, i));
    let conic = math::sym2_inverse(&cov2d)?;
    let (lambda_max, _) = math::sym2_eigenvalues(&cov2d);
    let radius = math::sqrt(support * lambda_max);
    if !radius.is_finite() || !mean2d.iter().all(|v| v.is_finite()) {
        return None;
    }
    // Pixel x is covered when |x + 0.5 - u| <= radius.
    let lo_x = math::ceil(mean2d[0] - radius - 0.5).max(0.0);
    let hi_x = math::floor(mean2d[0] + radius - 0.5).min(camera.width as f64 - 1.0);
    let lo_y = math::ceil(mean2d[1] - radius - 0.5).max(0.0);
    let hi_y = math::floor(mean2d[1] + radius - 0.5).min(camera.height as f64 - 1.0);
    if hi_x < lo_x || hi_y < lo_y {
        return None;
    }
    let dir = math::sub(&cloud.centers[i], cam_pos);
    let dir = math::scale(&dir, 1.0 / math::norm(&dir));
    Some(ProjectedGaussian {
        mean2d,
        cov2d,
        conic,
        view_depth: p[2],
        eval_color: sh::eval(cloud.color_block(i), &dir),
        opacity: cloud.opacity(i),
        radius,
        source_index: i,
        rect: [lo_x as usize, lo_y as usize, hi_x as usize + 1, hi_y as usize + 1],
    })
}
