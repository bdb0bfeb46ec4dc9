//! Color reconstruction loss and image quality metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::grid::{Image, Mask};
use crate::math;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// PSNR reported when the mean squared error is below `1e-10`.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricConfig {
    pub lambda_dssim: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub dynamic_range: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self { lambda_dssim: 0.2, ssim_window: 11, ssim_sigma: 1.5, dynamic_range: 1.0 }
    }
}

impl PhotometricConfig {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::Config(alloc::format!("lambda_dssim {} outside [0, 1]", self.lambda_dssim)));
        }
        if self.ssim_window == 0 || self.ssim_window % 2 == 0 || !(self.ssim_sigma > 0.0) || !(self.dynamic_range > 0.0) {
            return Err(Error::Config("SSIM window must be odd and positive with positive sigma and range".into()));
        }
        Ok(())
    }
}

/// Normalized 1D Gaussian taps.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            math::exp(-(d * d) / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= s;
    }
    taps
}

/// Separable zero-padded "same" filtering of a single-channel plane.
fn blur(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xi = x as isize + k as isize - r as isize;
                if xi >= 0 && (xi as usize) < w {
                    s += t * row[xi as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yi = y as isize + k as isize - r as isize;
                if yi >= 0 && (yi as usize) < h {
                    s += t * tmp[yi as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    let ch = img.channels();
    img.data().iter().skip(c).step_by(ch).copied().collect()
}

/// Per-channel SSIM map and, when `weights` is given, the gradient of
/// `Σ weights · ssim_map` with respect to `a`.
struct SsimEval {
    /// `Σ weights · (1 − ssim_map)` over all channels. Accumulating the
    /// deficit keeps identical images at exactly zero.
    weighted_deficit: f64,
    grad: Option<Image>,
}

fn ssim_eval(a: &Image, b: &Image, weights: &[f64], config: &PhotometricConfig, with_grad: bool) -> SsimEval {
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let taps = gaussian_taps(config.ssim_window, config.ssim_sigma);
    let c1 = SSIM_C1 * config.dynamic_range * config.dynamic_range;
    let c2 = SSIM_C2 * config.dynamic_range * config.dynamic_range;
    let mut total = 0.0;
    let mut grad = with_grad.then(|| Image::new(w, h, ch, 0.0));
    for c in 0..ch {
        let x = channel_plane(a, c);
        let y = channel_plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, w, h, &taps), blur(&y, w, h, &taps));
        let (mxx, myy, mxy) = (blur(&xx, w, h, &taps), blur(&yy, w, h, &taps), blur(&xy, w, h, &taps));
        let mut d_mx = vec![0.0; w * h];
        let mut d_mxx = vec![0.0; w * h];
        let mut d_mxy = vec![0.0; w * h];
        for p in 0..w * h {
            let wt = weights[p];
            if wt == 0.0 {
                continue;
            }
            let (ux, uy) = (mx[p], my[p]);
            let sxx = mxx[p] - ux * ux;
            let syy = myy[p] - uy * uy;
            let sxy = mxy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + c1;
            let a2 = 2.0 * sxy + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = sxx + syy + c2;
            let s = a1 * a2 / (b1 * b2);
            total += wt * (1.0 - s);
            if with_grad {
                d_mx[p] = wt * s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
                d_mxx[p] = -wt * s / b2;
                d_mxy[p] = wt * s * 2.0 / a2;
            }
        }
        if let Some(g) = grad.as_mut() {
            // The symmetric window makes the adjoint of the blur a blur.
            let (gx, gxx, gxy) = (blur(&d_mx, w, h, &taps), blur(&d_mxx, w, h, &taps), blur(&d_mxy, w, h, &taps));
            for p in 0..w * h {
                g.data_mut()[p * ch + c] = gx[p] + 2.0 * x[p] * gxx[p] + y[p] * gxy[p];
            }
        }
    }
    SsimEval { weighted_deficit: total, grad }
}

/// Mean SSIM over every pixel and channel of two same-shape images.
pub fn ssim_with(a: &Image, b: &Image, config: &PhotometricConfig) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(contract!("ssim inputs disagree in shape"));
    }
    let n = a.data().len();
    if n == 0 {
        return Ok(1.0);
    }
    let weights = vec![1.0; a.pixel_count()];
    Ok(1.0 - ssim_eval(a, b, &weights, config, false).weighted_deficit / n as f64)
}

/// [`ssim_with`] under the default window and constants.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, &PhotometricConfig::default())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(contract!("mse inputs disagree in shape"));
    }
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { 10.0 * math::log10(1.0 / m) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorLoss {
    pub value: f64,
    pub l1: f64,
    pub dssim: f64,
    /// Gradient with respect to the rendered image.
    pub adjoint: Image,
}

/// `L1 + λ · (1 − SSIM) / 2` over the pixels where `mask` is set.
///
/// L1 is the mean absolute error over masked pixels and channels. SSIM runs on
/// both images with unmasked pixels zeroed, and its map is averaged over the
/// masked pixels.
pub fn color_loss(rendered: &Image, target: &Image, mask: &Mask, config: &PhotometricConfig) -> Result<ColorLoss> {
    config.check()?;
    if !rendered.same_shape(target) || !rendered.same_extent(mask) {
        return Err(contract!("color loss inputs disagree in shape"));
    }
    let ch = rendered.channels();
    let mut adjoint = Image::new(rendered.width(), rendered.height(), ch, 0.0);
    let n = mask.data().iter().filter(|m| **m).count();
    if n == 0 {
        return Ok(ColorLoss { value: 0.0, l1: 0.0, dssim: 0.0, adjoint });
    }
    let inv = 1.0 / (n * ch) as f64;
    let mut l1 = 0.0;
    for p in 0..rendered.pixel_count() {
        if !mask.data()[p] {
            continue;
        }
        for c in 0..ch {
            let k = p * ch + c;
            let r = rendered.data()[k] - target.data()[k];
            l1 += r.abs();
            adjoint.data_mut()[k] = if r > 0.0 {
                inv
            } else if r < 0.0 {
                -inv
            } else {
                0.0
            };
        }
    }
    l1 *= inv;
    let mut dssim = 0.0;
    if config.lambda_dssim > 0.0 {
        let zero_out = |img: &Image| {
            let mut out = img.clone();
            for p in 0..img.pixel_count() {
                if !mask.data()[p] {
                    out.at_mut(p).fill(0.0);
                }
            }
            out
        };
        let (rz, tz) = (zero_out(rendered), zero_out(target));
        let weights: Vec<f64> = mask.data().iter().map(|&m| if m { inv } else { 0.0 }).collect();
        let eval = ssim_eval(&rz, &tz, &weights, config, true);
        dssim = eval.weighted_deficit / 2.0;
        let g = eval.grad.expect("gradient requested");
        let scale = -config.lambda_dssim / 2.0;
        for p in 0..rendered.pixel_count() {
            if mask.data()[p] {
                for c in 0..ch {
                    adjoint.data_mut()[p * ch + c] += scale * g.data()[p * ch + c];
                }
            }
        }
    }
    Ok(ColorLoss { value: l1 + config.lambda_dssim * dssim, l1, dssim, adjoint })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, offset: f64) -> Image {
        let data = (0..w * h * 3).map(|i| (i as f64 * 0.37 + offset).sin() * 0.4 + 0.5).collect();
        Image::from_vec(w, h, 3, data).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = ramp(12, 9, 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let l = color_loss(&a, &a, &Mask::new(12, 9, 1, true), &PhotometricConfig::default()).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn psnr_of_known_mse() {
        let a = Image::new(4, 4, 3, 0.5);
        let b = Image::new(4, 4, 3, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn constant_offset_l1() {
        let a = Image::new(5, 5, 3, 0.3);
        let b = a.map(|v| v + 0.1);
        let cfg = PhotometricConfig { lambda_dssim: 0.0, ..Default::default() };
        let l = color_loss(&a, &b, &Mask::new(5, 5, 1, true), &cfg).unwrap();
        assert!((l.value - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let (a, b) = (ramp(10, 10, 0.0), ramp(10, 10, 1.3));
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((s1 - s2).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&s1));
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(t[i], t[10 - i]);
        }
    }

    #[test]
    fn empty_mask_color_loss_is_zero() {
        let (a, b) = (ramp(4, 4, 0.0), ramp(4, 4, 2.0));
        let l = color_loss(&a, &b, &Mask::new(4, 4, 1, false), &PhotometricConfig::default()).unwrap();
        assert_eq!(l.value, 0.0);
    }
}
