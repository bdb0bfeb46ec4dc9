//! Unoptimized per-pixel compositor that scans every projected splat for
//! every pixel. Kept as the oracle for the tiled renderer.

use super::project::ProjectedGaussian;
use super::{Frame, RenderSettings, DEPTH_NORMALIZE_MIN_ALPHA, MAX_ALPHA, MIN_ALPHA, MIN_TRANSMITTANCE};
use crate::math;
use crate::scene::{Camera, GaussianCloud, ID_DIM};

fn influence(p: &ProjectedGaussian, x: f64, y: f64, opacity: f64) -> f64 {
    let dx = x - p.mean2d[0];
    let dy = y - p.mean2d[1];
    let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
    (opacity * math::exp(-0.5 * q)).min(MAX_ALPHA)
}

/// Composites `projected` (already depth-sorted) without tiling.
pub fn composite_naive(
    projected: &[ProjectedGaussian],
    camera: &Camera,
    cloud: &GaussianCloud,
    settings: &RenderSettings,
) -> Frame {
    let mut frame = Frame::blank(camera.width, camera.height, settings.background_depth);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (sx, sy) = (x as f64 + 0.5, y as f64 + 0.5);

            let mut t = 1.0;
            let mut color = [0.0; 3];
            let mut id = [0.0; ID_DIM];
            let mut depth = 0.0;
            for p in projected {
                let a = influence(p, sx, sy, p.opacity);
                if a < MIN_ALPHA {
                    continue;
                }
                let next = t * (1.0 - a);
                if next < MIN_TRANSMITTANCE {
                    break;
                }
                let w = a * t;
                for ch in 0..3 {
                    color[ch] += w * p.eval_color[ch];
                }
                if settings.identity {
                    for (d, v) in id.iter_mut().enumerate() {
                        *v += w * cloud.identity_codes[p.source_index][d];
                    }
                }
                depth += w * p.view_depth;
                t = next;
            }
            let accum = 1.0 - t;
            frame.color.pixel_mut(x, y).copy_from_slice(&color);
            frame.id_feature.pixel_mut(x, y).copy_from_slice(&id);
            frame.accum_alpha.set(x, y, accum);
            if accum > DEPTH_NORMALIZE_MIN_ALPHA {
                frame.soft_depth.set(x, y, depth / accum);
            }

            if settings.hard_depth {
                let mut t = 1.0;
                let mut depth = 0.0;
                for p in projected {
                    let a = influence(p, sx, sy, settings.hard_omega);
                    if a < MIN_ALPHA {
                        continue;
                    }
                    let next = t * (1.0 - a);
                    if next < MIN_TRANSMITTANCE {
                        break;
                    }
                    depth += a * t * p.view_depth;
                    t = next;
                }
                if 1.0 - t > DEPTH_NORMALIZE_MIN_ALPHA {
                    frame.hard_depth.set(x, y, depth / (1.0 - t));
                }
            }
        }
    }
    frame
}
