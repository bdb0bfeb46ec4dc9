//! Shared fixtures and finite-difference oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsplat_core::math;
use semsplat_core::scene::{Camera, GaussianCloud, ID_DIM};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A camera at distance 3 on the -z axis looking at the origin.
pub fn test_camera(width: usize, height: usize) -> Camera {
    let f = 1.2 * width as f64;
    Camera::look_at([0.3, -0.2, -3.0], [0.0; 3], [0.0, -1.0, 0.0], f, width, height).unwrap()
}

/// Smallest relative distance, over every pixel and splat of both
/// compositing passes, between an influence and the skip threshold or
/// between a candidate transmittance and the termination threshold.
pub fn threshold_margin(cloud: &GaussianCloud, camera: &Camera, omega: f64) -> f64 {
    use semsplat_core::render::{project, MAX_ALPHA, MIN_ALPHA, MIN_TRANSMITTANCE};
    let projected = project(cloud, camera);
    let mut margin = f64::INFINITY;
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for hard in [false, true] {
                let mut t = 1.0;
                for p in &projected {
                    let (dx, dy) = (px - p.mean2d[0], py - p.mean2d[1]);
                    let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
                    let raw = if hard { omega } else { p.opacity } * (-0.5 * q).exp();
                    margin = margin.min((raw / MIN_ALPHA - 1.0).abs()).min((raw / MAX_ALPHA - 1.0).abs());
                    let a = raw.min(MAX_ALPHA);
                    if a < MIN_ALPHA {
                        continue;
                    }
                    let next = t * (1.0 - a);
                    margin = margin.min((next / MIN_TRANSMITTANCE - 1.0).abs());
                    if next < MIN_TRANSMITTANCE {
                        break;
                    }
                    t = next;
                }
            }
        }
    }
    margin
}

/// Random scene for gradient checks.
///
/// Splats are wide relative to the image and semi-transparent, and the scene
/// is redrawn until no pixel sits within 2% of the skip, clamp or
/// termination thresholds. Finite differences across those discontinuities
/// would be meaningless.
pub fn smooth_scene(seed: u64, n: usize, width: usize, height: usize, sh_degree: u8) -> (GaussianCloud, Camera) {
    for attempt in 0..1000u64 {
        let (cloud, camera) = smooth_scene_raw(seed + attempt * 7919, n, width, height, sh_degree);
        if threshold_margin(&cloud, &camera, semsplat_core::render::HARD_DEPTH_OMEGA) > 0.02 {
            return (cloud, camera);
        }
    }
    panic!("no well-conditioned scene for seed {seed}");
}

pub fn smooth_scene_raw(seed: u64, n: usize, width: usize, height: usize, sh_degree: u8) -> (GaussianCloud, Camera) {
    let camera = test_camera(width, height);
    let mut r = rng(seed);
    let base = semsplat_core::scene::init_random_cloud(n, &semsplat_core::Aabb::unit(), seed).unwrap();
    let mut cloud = base.with_sh_degree(sh_degree).unwrap();
    let size = width.min(height) as f64;
    for i in 0..n {
        let depth = 2.6 + 0.8 * r.random::<f64>();
        // Keep the projected center in the middle fifth of the image.
        let u = (r.random::<f64>() - 0.5) * 0.2 * width as f64;
        let v = (r.random::<f64>() - 0.5) * 0.2 * height as f64;
        let pc = [u * depth / camera.fx, v * depth / camera.fy, depth];
        let world = math::mat_t_vec(&camera.rotation, &math::sub(&pc, &camera.translation));
        cloud.centers[i] = world;
        for a in 0..3 {
            let sigma_px = size * (0.45 + 0.3 * r.random::<f64>());
            cloud.log_scales[i][a] = math::ln(sigma_px * depth / camera.fx);
        }
        let q = [
            1.0 + r.random::<f64>(),
            r.random::<f64>() - 0.5,
            r.random::<f64>() - 0.5,
            r.random::<f64>() - 0.5,
        ];
        cloud.rotations[i] = math::quat_normalize(&q);
        cloud.opacity_logits[i] = math::logit(0.08 + 0.35 * r.random::<f64>());
        for c in cloud.color_block_mut(i) {
            for ch in c.iter_mut() {
                *ch = r.random::<f64>() - 0.5;
            }
        }
        for d in 0..ID_DIM {
            cloud.identity_codes[i][d] = r.random::<f64>() * 2.0 - 1.0;
        }
    }
    (cloud, camera)
}

pub fn param_count(cloud: &GaussianCloud) -> usize {
    let n = cloud.len();
    n * (3 + 3 + 4 + 1 + ID_DIM) + cloud.colors.len() * 3
}

/// Parameter `k` in `GradientSet::flatten` order.
pub fn param_mut(cloud: &mut GaussianCloud, mut k: usize) -> &mut f64 {
    let n = cloud.len();
    if k < 3 * n {
        return &mut cloud.centers[k / 3][k % 3];
    }
    k -= 3 * n;
    if k < 3 * n {
        return &mut cloud.log_scales[k / 3][k % 3];
    }
    k -= 3 * n;
    if k < 4 * n {
        return &mut cloud.rotations[k / 4][k % 4];
    }
    k -= 4 * n;
    if k < n {
        return &mut cloud.opacity_logits[k];
    }
    k -= n;
    let nc = cloud.colors.len() * 3;
    if k < nc {
        return &mut cloud.colors[k / 3][k % 3];
    }
    k -= nc;
    &mut cloud.identity_codes[k / ID_DIM][k % ID_DIM]
}

/// Which parameter group flat index `k` belongs to.
pub fn param_group(cloud: &GaussianCloud, k: usize) -> &'static str {
    let n = cloud.len();
    let bounds = [
        (3 * n, "centers"),
        (6 * n, "log_scales"),
        (10 * n, "rotations"),
        (11 * n, "opacity_logits"),
        (11 * n + cloud.colors.len() * 3, "colors"),
    ];
    bounds.iter().find(|(b, _)| k < *b).map(|(_, g)| *g).unwrap_or("identity_codes")
}

/// Central differences of `f` over every parameter.
pub fn fd_gradient(cloud: &GaussianCloud, f: impl Fn(&GaussianCloud) -> f64) -> Vec<f64> {
    let mut work = cloud.clone();
    (0..param_count(cloud))
        .map(|k| {
            let x = *param_mut(&mut work, k);
            *param_mut(&mut work, k) = x + FD_STEP;
            let fp = f(&work);
            *param_mut(&mut work, k) = x - FD_STEP;
            let fm = f(&work);
            *param_mut(&mut work, k) = x;
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Central differences of a function of a plain vector.
pub fn fd_vec(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut w = x.to_vec();
    (0..x.len())
        .map(|k| {
            let v = w[k];
            w[k] = v + h;
            let fp = f(&w);
            w[k] = v - h;
            let fm = f(&w);
            w[k] = v;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Gradient agreement: relative error under `REL_TOL`, or absolute under `ABS_TOL`.
pub fn close(analytic: f64, fd: f64) -> bool {
    let diff = (analytic - fd).abs();
    diff < ABS_TOL || diff / analytic.abs().max(fd.abs()) < REL_TOL
}

/// Worst relative error over entries that fail the absolute tolerance.
pub fn worst_error(analytic: &[f64], fd: &[f64]) -> (f64, Option<usize>) {
    let mut worst = 0.0;
    let mut at = None;
    for (k, (a, f)) in analytic.iter().zip(fd).enumerate() {
        let diff = (a - f).abs();
        if diff < ABS_TOL {
            continue;
        }
        let rel = diff / a.abs().max(f.abs());
        if rel > worst {
            worst = rel;
            at = Some(k);
        }
    }
    (worst, at)
}

pub fn assert_gradients_match(label: &str, cloud: &GaussianCloud, analytic: &[f64], fd: &[f64]) {
    assert_eq!(analytic.len(), fd.len());
    for (k, (a, f)) in analytic.iter().zip(fd).enumerate() {
        assert!(
            close(*a, *f),
            "{label}: parameter {k} ({}) analytic {a:e} vs finite difference {f:e}",
            param_group(cloud, k)
        );
    }
}

pub fn random_grid(seed: u64, width: usize, height: usize, channels: usize, lo: f64, hi: f64) -> semsplat_core::Image {
    let mut r = rng(seed);
    let data = (0..width * height * channels).map(|_| lo + (hi - lo) * r.random::<f64>()).collect();
    semsplat_core::Grid::from_vec(width, height, channels, data).unwrap()
}
/// Unconstrained scene: splats of every size and opacity, some behind the
/// camera, some off screen, overlapping freely.
pub fn rough_scene(seed: u64) -> (GaussianCloud, Camera) {
    let mut r = rng(seed);
    let n = r.random_range(1..40);
    let (w, h) = (r.random_range(5..48), r.random_range(5..48));
    let camera = test_camera(w, h);
    let mut cloud = semsplat_core::scene::init_random_cloud(n, &semsplat_core::Aabb::unit(), seed)
        .unwrap()
        .with_sh_degree((seed % 4) as u8)
        .unwrap();
    for i in 0..n {
        for a in 0..3 {
            cloud.centers[i][a] = r.random_range(-1.5..1.5);
            cloud.log_scales[i][a] = r.random_range(-4.0..-0.5);
        }
        if r.random::<f64>() < 0.1 {
            cloud.centers[i][2] = -3.5;
        }
        let q = [r.random::<f64>() - 0.5, r.random::<f64>() - 0.5, r.random::<f64>() - 0.5, r.random::<f64>() - 0.5];
        cloud.rotations[i] = math::quat_normalize(&q);
        cloud.opacity_logits[i] = r.random_range(-6.0..6.0);
        for c in cloud.color_block_mut(i) {
            for v in c.iter_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        }
        for v in cloud.identity_codes[i].iter_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
    (cloud, camera)
}

pub mod suite;
