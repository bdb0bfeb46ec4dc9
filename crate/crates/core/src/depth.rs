//! Depth regularization against a relative depth prior.
//!
//! Two families of terms. The soft-hard pair compares rendered soft and hard
//! depth with the prior after a least-squares scale-and-shift alignment over
//! the target region; the caller backpropagates the hard term to centers only
//! and the soft term to opacities only. The global-local term compares
//! patch-normalized versions of both maps, which makes it insensitive to any
//! positive affine change of the prior.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::grid::{Image, Mask};
use crate::math;
use crate::render::Frame;
use crate::scene::ViewBundle;

/// Floor on standard deviations used by the patch normalizations.
pub const STD_FLOOR: f64 = 1e-6;

/// Which rendered depth map the global-local term reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthSource {
    #[default]
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRegConfig {
    pub lambda_sh: f64,
    pub lambda_gl: f64,
    /// Weight of the local-normalization term inside the global-local loss.
    pub gamma: f64,
    pub patch_size: usize,
    pub hard_override_omega: f64,
    /// Fit scale and shift of the prior before the soft and hard terms.
    pub align_prior: bool,
    pub gl_source: DepthSource,
}

impl Default for DepthRegConfig {
    fn default() -> Self {
        Self {
            lambda_sh: 1.0,
            lambda_gl: 1.0,
            gamma: 0.1,
            patch_size: 8,
            hard_override_omega: crate::render::HARD_DEPTH_OMEGA,
            align_prior: true,
            gl_source: DepthSource::Soft,
        }
    }
}

impl DepthRegConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lambda_sh >= 0.0 && self.lambda_gl >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config("depth weights must be non-negative".into()));
        }
        if self.patch_size < 2 {
            return Err(Error::Config("patch_size must be at least 2".into()));
        }
        if !(self.hard_override_omega > 0.0 && self.hard_override_omega <= 1.0) {
            return Err(Error::Config("hard_override_omega must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Target region: floating mask set and a non-background instance id.
pub fn target_region(view: &ViewBundle) -> Mask {
    let data = view.floating_mask.data().iter().zip(view.id_mask.data()).map(|(&m, &id)| m && id > 0).collect();
    Mask::from_vec(view.floating_mask.width(), view.floating_mask.height(), 1, data).expect("shape")
}

/// Least-squares `(a, b)` minimizing `Σ (a·prior + b − depth)²` over `mask`.
///
/// With fewer than two pixels or a constant prior the scale is undetermined;
/// the fit then keeps `a = 1` and only matches means.
pub fn fit_scale_shift(depth: &Image, prior: &Image, mask: &Mask) -> (f64, f64) {
    let mut n = 0.0;
    let (mut sx, mut sy) = (0.0, 0.0);
    for p in 0..mask.pixel_count() {
        if mask.data()[p] {
            n += 1.0;
            sx += prior.data()[p];
            sy += depth.data()[p];
        }
    }
    if n == 0.0 {
        return (1.0, 0.0);
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for p in 0..mask.pixel_count() {
        if mask.data()[p] {
            let dx = prior.data()[p] - mx;
            sxx += dx * dx;
            sxy += dx * (depth.data()[p] - my);
        }
    }
    if sxx <= 1e-12 * n * (mx * mx).max(1.0) {
        return (1.0, my - mx);
    }
    let a = sxy / sxx;
    (a, my - a * mx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthTermLoss {
    pub value: f64,
    /// Gradient with respect to the rendered depth map.
    pub adjoint: Image,
    pub scale: f64,
    pub shift: f64,
}

/// Masked mean squared error between `depth` and the (optionally aligned)
/// prior.
///
/// The alignment is itself the minimizer of this error, so the gradient of
/// the aligned loss is the plain residual gradient.
pub fn masked_depth_mse(depth: &Image, prior: &Image, mask: &Mask, align: bool) -> Result<DepthTermLoss> {
    if !depth.same_shape(prior) || !depth.same_extent(mask) || depth.channels() != 1 {
        return Err(contract!("depth loss inputs disagree in shape"));
    }
    let mut adjoint = Image::new(depth.width(), depth.height(), 1, 0.0);
    let n = mask.data().iter().filter(|m| **m).count();
    let (scale, shift) = if align { fit_scale_shift(depth, prior, mask) } else { (1.0, 0.0) };
    if n == 0 {
        return Ok(DepthTermLoss { value: 0.0, adjoint, scale, shift });
    }
    let inv_n = 1.0 / n as f64;
    let mut sum = 0.0;
    for p in 0..depth.pixel_count() {
        if mask.data()[p] {
            let r = depth.data()[p] - (scale * prior.data()[p] + shift);
            sum += r * r;
            adjoint.data_mut()[p] = 2.0 * r * inv_n;
        }
    }
    Ok(DepthTermLoss { value: sum * inv_n, adjoint, scale, shift })
}

/// Hard depth against the prior over the target region. Backpropagate the
/// adjoint to centers only.
pub fn hard_depth_loss(frame: &Frame, view: &ViewBundle, align: bool) -> Result<DepthTermLoss> {
    masked_depth_mse(&frame.hard_depth, &view.prior_depth, &target_region(view), align)
}

/// Soft depth against the prior over the target region. Backpropagate the
/// adjoint to opacities only.
pub fn soft_depth_loss(frame: &Frame, view: &ViewBundle, align: bool) -> Result<DepthTermLoss> {
    masked_depth_mse(&frame.soft_depth, &view.prior_depth, &target_region(view), align)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftHardLoss {
    pub value: f64,
    pub hard: DepthTermLoss,
    pub soft: DepthTermLoss,
}

pub fn soft_hard_loss(frame: &Frame, view: &ViewBundle, align: bool) -> Result<SoftHardLoss> {
    let hard = hard_depth_loss(frame, view, align)?;
    let soft = soft_depth_loss(frame, view, align)?;
    Ok(SoftHardLoss { value: hard.value + soft.value, hard, soft })
}

/// Masked pixel indices of every `patch × patch` block, edge blocks truncated.
fn patches(mask: &Mask, patch: usize) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::new();
    for y0 in (0..h).step_by(patch) {
        for x0 in (0..w).step_by(patch) {
            let mut idx = Vec::new();
            for y in y0..(y0 + patch).min(h) {
                for x in x0..(x0 + patch).min(w) {
                    let p = y * w + x;
                    if mask.data()[p] {
                        idx.push(p);
                    }
                }
            }
            if !idx.is_empty() {
                out.push(idx);
            }
        }
    }
    out
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut s) = (0.0, 0.0);
    for v in values.clone() {
        n += 1.0;
        s += v;
    }
    let mean = s / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, math::sqrt(var))
}

/// Statistics of one normalization, kept for the backward pass.
struct Normalized {
    out: Image,
    /// Per patch: masked pixel indices, mean, unfloored std.
    patches: Vec<(Vec<usize>, f64, f64)>,
    global_mean: f64,
    global_std: f64,
}

fn normalize(depth: &Image, mask: &Mask, patch: usize, global: bool) -> Normalized {
    let mut out = Image::new(depth.width(), depth.height(), 1, 0.0);
    let d = depth.data();
    let all: Vec<usize> = (0..d.len()).filter(|&p| mask.data()[p]).collect();
    let (global_mean, global_std) =
        if all.is_empty() { (0.0, 0.0) } else { mean_std(all.iter().map(|&p| d[p])) };
    let mut stats = Vec::new();
    for idx in patches(mask, patch) {
        let (mean, std) = mean_std(idx.iter().map(|&p| d[p]));
        let divisor = if global { global_std } else { std }.max(STD_FLOOR);
        for &p in &idx {
            out.data_mut()[p] = (d[p] - mean) / divisor;
        }
        stats.push((idx, mean, std));
    }
    Normalized { out, patches: stats, global_mean, global_std }
}

/// Per-patch standardization: subtract each patch's masked mean and divide by
/// its masked population std (floored at [`STD_FLOOR`]). Unmasked pixels are 0.
pub fn normalize_local(depth: &Image, mask: &Mask, patch: usize) -> Image {
    normalize(depth, mask, patch, false).out
}

/// Like [`normalize_local`] but every patch is divided by the masked std of
/// the whole map.
pub fn normalize_global(depth: &Image, mask: &Mask, patch: usize) -> Image {
    normalize(depth, mask, patch, true).out
}

/// Pulls `g = dL/d(normalized)` back to the unnormalized map.
fn normalize_backward(depth: &Image, norm: &Normalized, g: &[f64], global: bool, into: &mut [f64]) {
    let d = depth.data();
    let y = norm.out.data();
    let n_global = norm.patches.iter().map(|(idx, _, _)| idx.len()).sum::<usize>() as f64;
    let gs = norm.global_std.max(STD_FLOOR);
    let mut g_dot_y_global = 0.0;
    for (idx, _, std) in &norm.patches {
        let m = idx.len() as f64;
        let g_mean = idx.iter().map(|&p| g[p]).sum::<f64>() / m;
        if global {
            for &p in idx {
                into[p] += (g[p] - g_mean) / gs;
                g_dot_y_global += g[p] * y[p];
            }
        } else {
            let s = std.max(STD_FLOOR);
            let gy_mean = if *std > STD_FLOOR { idx.iter().map(|&p| g[p] * y[p]).sum::<f64>() / m } else { 0.0 };
            for &p in idx {
                into[p] += (g[p] - g_mean - y[p] * gy_mean) / s;
            }
        }
    }
    if global && norm.global_std > STD_FLOOR {
        let k = g_dot_y_global / gs / (n_global * norm.global_std);
        for (idx, _, _) in &norm.patches {
            for &p in idx {
                into[p] -= k * (d[p] - norm.global_mean);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLocalLoss {
    pub value: f64,
    pub global_term: f64,
    pub local_term: f64,
    /// Gradient with respect to the rendered depth map.
    pub adjoint: Image,
}

/// `MSE(GN(D), GN(D̃)) + γ · MSE(LN(D), LN(D̃))` over `mask`, with gradients
/// through both normalizations of the rendered map.
pub fn global_local_loss(
    rendered: &Image,
    prior: &Image,
    mask: &Mask,
    gamma: f64,
    patch: usize,
) -> Result<GlobalLocalLoss> {
    if !rendered.same_shape(prior) || !rendered.same_extent(mask) || rendered.channels() != 1 {
        return Err(contract!("global-local loss inputs disagree in shape"));
    }
    if patch < 2 {
        return Err(Error::Config("patch_size must be at least 2".into()));
    }
    let mut adjoint = Image::new(rendered.width(), rendered.height(), 1, 0.0);
    let n = mask.data().iter().filter(|m| **m).count();
    if n == 0 {
        return Ok(GlobalLocalLoss { value: 0.0, global_term: 0.0, local_term: 0.0, adjoint });
    }
    let inv_n = 1.0 / n as f64;
    let mut terms = [0.0; 2];
    for (t, global) in [(0, true), (1, false)] {
        let weight = if global { 1.0 } else { gamma };
        if !global && gamma == 0.0 {
            continue;
        }
        let a = normalize(rendered, mask, patch, global);
        let b = normalize(prior, mask, patch, global);
        let mut g = vec![0.0; rendered.pixel_count()];
        let mut sum = 0.0;
        for p in 0..g.len() {
            if mask.data()[p] {
                let r = a.out.data()[p] - b.out.data()[p];
                sum += r * r;
                g[p] = 2.0 * weight * r * inv_n;
            }
        }
        terms[t] = sum * inv_n;
        normalize_backward(rendered, &a, &g, global, adjoint.data_mut());
    }
    Ok(GlobalLocalLoss {
        value: terms[0] + gamma * terms[1],
        global_term: terms[0],
        local_term: terms[1],
        adjoint,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleLoss {
    pub value: f64,
    pub l_hard: f64,
    pub l_soft: f64,
    pub l_gl: f64,
    /// Weighted adjoint on hard depth from the hard term (centers only).
    pub hard_adjoint: Image,
    /// Weighted adjoint on soft depth from the soft term (opacities only).
    pub soft_adjoint: Image,
    /// Weighted adjoint of the global-local term on the map named by
    /// `gl_source` (unrestricted).
    pub gl_adjoint: Image,
    pub gl_source: DepthSource,
}

/// `λ_SH · (L_hard + L_soft) + λ_GL · L_GL`. Terms with zero weight are
/// skipped and reported as 0.
pub fn multi_scale_depth_loss(frame: &Frame, view: &ViewBundle, config: &DepthRegConfig) -> Result<MultiScaleLoss> {
    config.check()?;
    let (w, h) = (frame.soft_depth.width(), frame.soft_depth.height());
    let zero = Image::new(w, h, 1, 0.0);
    let mut out = MultiScaleLoss {
        value: 0.0,
        l_hard: 0.0,
        l_soft: 0.0,
        l_gl: 0.0,
        hard_adjoint: zero.clone(),
        soft_adjoint: zero.clone(),
        gl_adjoint: zero,
        gl_source: config.gl_source,
    };
    let region = target_region(view);
    if config.lambda_sh > 0.0 {
        let sh = soft_hard_loss(frame, view, config.align_prior)?;
        out.l_hard = sh.hard.value;
        out.l_soft = sh.soft.value;
        out.value += config.lambda_sh * sh.value;
        out.hard_adjoint = sh.hard.adjoint.map(|g| g * config.lambda_sh);
        out.soft_adjoint = sh.soft.adjoint.map(|g| g * config.lambda_sh);
    }
    if config.lambda_gl > 0.0 {
        let rendered = match config.gl_source {
            DepthSource::Soft => &frame.soft_depth,
            DepthSource::Hard => &frame.hard_depth,
        };
        let gl = global_local_loss(rendered, &view.prior_depth, &region, config.gamma, config.patch_size)?;
        out.l_gl = gl.value;
        out.value += config.lambda_gl * gl.value;
        out.gl_adjoint = gl.adjoint.map(|g| g * config.lambda_gl);
    }
    Ok(out)
}
