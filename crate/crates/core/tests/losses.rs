//! Finite-difference checks of every loss against its own inputs.

mod common;

use common::*;
use rand::Rng;
use semsplat_core::depth::{self, DepthRegConfig};
use semsplat_core::photometric::{self, PhotometricConfig};
use semsplat_core::semantics::{self, GroupingConfig};
use semsplat_core::{ClassHead, Grid, Image, Mask, ID_DIM};

fn random_mask(seed: u64, w: usize, h: usize, p_true: f64) -> Mask {
    let mut r = rng(seed);
    Mask::from_vec(w, h, 1, (0..w * h).map(|_| r.random::<f64>() < p_true).collect()).unwrap()
}

fn assert_vec_close(label: &str, a: &[f64], f: &[f64], rel: f64) {
    for (k, (x, y)) in a.iter().zip(f).enumerate() {
        let diff = (x - y).abs();
        assert!(diff < ABS_TOL || diff / x.abs().max(y.abs()) < rel, "{label}[{k}]: {x:e} vs {y:e}");
    }
}

#[test]
fn cross_entropy_gradients() {
    for seed in 0..5 {
        let head = ClassHead::random(3, seed);
        let f = random_grid(seed + 10, 4, 4, ID_DIM, -2.0, 2.0);
        let mut r = rng(seed + 20);
        let ids = Grid::from_vec(4, 4, 1, (0..16).map(|_| r.random_range(0..4u8)).collect()).unwrap();
        let mask = random_mask(seed, 4, 4, 0.7);
        let l = semantics::loss_2d(&f, &ids, &mask, &head).unwrap();
        let fd = fd_vec(f.data(), 1e-5, |x| {
            let g = Grid::from_vec(4, 4, ID_DIM, x.to_vec()).unwrap();
            semantics::loss_2d(&g, &ids, &mask, &head).unwrap().value
        });
        assert_vec_close("feature", l.d_feature.data(), &fd, 1e-5);
        let mut params = head.weight.clone();
        params.extend(&head.bias);
        let fd = fd_vec(&params, 1e-5, |x| {
            let h = ClassHead { weight: x[..head.weight.len()].to_vec(), bias: x[head.weight.len()..].to_vec() };
            semantics::loss_2d(&f, &ids, &mask, &h).unwrap().value
        });
        let mut analytic = l.d_head.weight.clone();
        analytic.extend(&l.d_head.bias);
        assert_vec_close("head", &analytic, &fd, 1e-5);
    }
}

#[test]
fn neighbourhood_kl_gradients() {
    for seed in 0..3 {
        let mut cloud = semsplat_core::scene::init_random_cloud(40, &semsplat_core::Aabb::unit(), seed).unwrap();
        let mut r = rng(seed);
        for e in cloud.identity_codes.iter_mut() {
            for v in e.iter_mut() {
                *v = r.random::<f64>() * 2.0 - 1.0;
            }
        }
        let head = ClassHead::random(4, seed + 1);
        let cfg = GroupingConfig { sample_m: 30, knn_k: 3, ..Default::default() };
        let l = semantics::loss_3d(&cloud, &head, &cfg, seed).unwrap();
        assert!(l.value > 0.0);
        let flat: Vec<f64> = cloud.identity_codes.iter().flatten().copied().collect();
        let fd = fd_vec(&flat, 1e-5, |x| {
            let mut c = cloud.clone();
            for (i, e) in c.identity_codes.iter_mut().enumerate() {
                e.copy_from_slice(&x[i * ID_DIM..(i + 1) * ID_DIM]);
            }
            semantics::loss_3d(&c, &head, &cfg, seed).unwrap().value
        });
        let analytic: Vec<f64> = l.d_codes.iter().flatten().copied().collect();
        assert_vec_close("codes", &analytic, &fd, 1e-5);
    }
}

#[test]
fn grouping_loss_is_linear_in_its_weights() {
    let cloud = semsplat_core::scene::init_random_cloud(30, &semsplat_core::Aabb::unit(), 3).unwrap();
    let head = ClassHead::random(2, 3);
    let f = random_grid(4, 4, 4, ID_DIM, -1.0, 1.0);
    let ids = Grid::new(4, 4, 1, 1u8);
    let mask = Mask::new(4, 4, 1, true);
    let base = GroupingConfig { lambda_2d: 1.0, lambda_3d: 1.0, sample_m: 20, knn_k: 2 };
    let l2 = semantics::loss_2d(&f, &ids, &mask, &head).unwrap().value;
    let l3 = semantics::loss_3d(&cloud, &head, &base, 9).unwrap().value;
    let g = semantics::grouping_loss(&f, &ids, &mask, &cloud, &head, &base, 9).unwrap();
    assert!((g.value - (l2 + l3)).abs() < 1e-12);
    let only2 = GroupingConfig { lambda_3d: 0.0, ..base };
    assert_eq!(semantics::grouping_loss(&f, &ids, &mask, &cloud, &head, &only2, 9).unwrap().value, l2);
    let scaled = GroupingConfig { lambda_2d: 2.5, lambda_3d: 2.5, ..base };
    let s = semantics::grouping_loss(&f, &ids, &mask, &cloud, &head, &scaled, 9).unwrap();
    assert!((s.value - 2.5 * g.value).abs() < 1e-12);
}

#[test]
fn aligned_depth_mse_gradient() {
    for seed in 0..5 {
        let d = random_grid(seed, 6, 5, 1, 1.0, 3.0);
        let prior = random_grid(seed + 100, 6, 5, 1, 0.2, 0.9);
        let mask = random_mask(seed, 6, 5, 0.6);
        for align in [false, true] {
            let l = depth::masked_depth_mse(&d, &prior, &mask, align).unwrap();
            let fd = fd_vec(d.data(), 1e-5, |x| {
                let g = Image::from_vec(6, 5, 1, x.to_vec()).unwrap();
                depth::masked_depth_mse(&g, &prior, &mask, align).unwrap().value
            });
            assert_vec_close("depth", l.adjoint.data(), &fd, 1e-6);
        }
    }
}

#[test]
fn masked_depth_matches_direct_recomputation() {
    let d = random_grid(1, 7, 7, 1, 1.0, 3.0);
    let prior = random_grid(2, 7, 7, 1, 1.0, 3.0);
    let mask = random_mask(3, 7, 7, 0.5);
    let l = depth::masked_depth_mse(&d, &prior, &mask, false).unwrap();
    let (mut s, mut n) = (0.0, 0);
    for p in 0..49 {
        if mask.data()[p] {
            s += (d.data()[p] - prior.data()[p]).powi(2);
            n += 1;
        }
    }
    assert!((l.value - s / n as f64).abs() < 1e-12);
}

#[test]
fn global_local_gradient() {
    for seed in 0..5 {
        let d = random_grid(seed, 16, 16, 1, 1.0, 4.0);
        let prior = random_grid(seed + 50, 16, 16, 1, 0.1, 1.0);
        let mask = random_mask(seed, 16, 16, 0.8);
        let l = depth::global_local_loss(&d, &prior, &mask, 0.3, 4).unwrap();
        let fd = fd_vec(d.data(), 1e-5, |x| {
            let g = Image::from_vec(16, 16, 1, x.to_vec()).unwrap();
            depth::global_local_loss(&g, &prior, &mask, 0.3, 4).unwrap().value
        });
        assert_vec_close("gl", l.adjoint.data(), &fd, 1e-4);
    }
}

#[test]
fn global_local_zero_cases() {
    let d = random_grid(8, 16, 16, 1, 1.0, 4.0);
    let mask = Mask::new(16, 16, 1, true);
    assert_eq!(depth::global_local_loss(&d, &d, &mask, 0.1, 4).unwrap().value, 0.0);
    let prior = random_grid(9, 16, 16, 1, 1.0, 4.0);
    let l0 = depth::global_local_loss(&d, &prior, &mask, 0.0, 4).unwrap();
    assert_eq!(l0.value, l0.global_term);
}

#[test]
fn normalize_global_equals_local_when_stds_agree() {
    // Four identical 2x2 patches: each patch std equals the global std.
    let pattern = [1.0, 3.0, 2.0, 6.0];
    let mut data = vec![0.0; 16];
    for py in 0..2 {
        for px in 0..2 {
            for k in 0..4 {
                let (x, y) = (px * 2 + k % 2, py * 2 + k / 2);
                data[y * 4 + x] = pattern[k];
            }
        }
    }
    let d = Image::from_vec(4, 4, 1, data).unwrap();
    let m = Mask::new(4, 4, 1, true);
    let (a, b) = (depth::normalize_local(&d, &m, 2), depth::normalize_global(&d, &m, 2));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn local_normalization_has_zero_patch_means() {
    let d = random_grid(4, 13, 11, 1, 0.0, 10.0);
    let m = random_mask(5, 13, 11, 0.7);
    let out = depth::normalize_local(&d, &m, 4);
    for y0 in (0..11).step_by(4) {
        for x0 in (0..13).step_by(4) {
            let mut s = 0.0;
            for y in y0..(y0 + 4).min(11) {
                for x in x0..(x0 + 4).min(13) {
                    if m.get(x, y) {
                        s += out.get(x, y);
                    } else {
                        assert_eq!(out.get(x, y), 0.0);
                    }
                }
            }
            assert!(s.abs() < 1e-6);
        }
    }
}

#[test]
fn color_loss_gradient() {
    for seed in 0..3 {
        let a = random_grid(seed, 32, 32, 3, 0.05, 0.95);
        let b = random_grid(seed + 7, 32, 32, 3, 0.05, 0.95);
        let mask = random_mask(seed, 32, 32, 0.75);
        let cfg = PhotometricConfig::default();
        let l = photometric::color_loss(&a, &b, &mask, &cfg).unwrap();
        let fd = fd_vec(a.data(), 1e-6, |x| {
            let g = Image::from_vec(32, 32, 3, x.to_vec()).unwrap();
            photometric::color_loss(&g, &b, &mask, &cfg).unwrap().value
        });
        assert_vec_close("color", l.adjoint.data(), &fd, 1e-4);
    }
}

/// Plain 2D-window SSIM written without separability, as an independent check.
fn ssim_reference(a: &Image, b: &Image) -> f64 {
    let (w, h, ch) = (a.width() as isize, a.height() as isize, a.channels());
    let g1: Vec<f64> = (-5..=5).map(|i: i32| (-(i * i) as f64 / 4.5).exp()).collect();
    let s: f64 = g1.iter().sum();
    let mut total = 0.0;
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut m = [0.0; 5];
                for dy in -5..=5isize {
                    for dx in -5..=5isize {
                        let (xx, yy) = (x + dx, y + dy);
                        if xx < 0 || yy < 0 || xx >= w || yy >= h {
                            continue;
                        }
                        let wt = g1[(dx + 5) as usize] * g1[(dy + 5) as usize] / (s * s);
                        let p = (yy * w + xx) as usize * ch + c;
                        let (u, v) = (a.data()[p], b.data()[p]);
                        m[0] += wt * u;
                        m[1] += wt * v;
                        m[2] += wt * u * u;
                        m[3] += wt * v * v;
                        m[4] += wt * u * v;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                let vx = m[2] - m[0] * m[0];
                let vy = m[3] - m[1] * m[1];
                let cxy = m[4] - m[0] * m[1];
                total += (2.0 * m[0] * m[1] + c1) * (2.0 * cxy + c2)
                    / ((m[0] * m[0] + m[1] * m[1] + c1) * (vx + vy + c2));
            }
        }
    }
    total / (w * h) as f64 / ch as f64
}

#[test]
fn ssim_matches_reference_on_random_pairs() {
    for seed in 0..5 {
        let a = random_grid(seed, 20, 17, 3, 0.0, 1.0);
        let b = random_grid(seed + 30, 20, 17, 3, 0.0, 1.0).map(|v| v * 0.5);
        let b = Image::from_vec(20, 17, 3, a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * x + y).collect()).unwrap();
        let got = photometric::ssim(&a, &b).unwrap();
        let want = ssim_reference(&a, &b);
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        assert!((photometric::ssim(&b, &a).unwrap() - got).abs() < 1e-9);
    }
}

#[test]
fn depth_config_defaults_validate() {
    DepthRegConfig::default().check().unwrap();
    PhotometricConfig::default().check().unwrap();
    GroupingConfig::default().check().unwrap();
}
