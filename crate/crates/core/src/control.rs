//! Semantic-gated densification and pruning, plus floating-mask construction.
//!
//! Only Gaussians classified as a target instance with enough confidence
//! (the ROI) accumulate screen-space gradient statistics and may be cloned or
//! split. Pruning removes transparent and oversized Gaussians and, after a
//! warm-up, everything outside the ROI.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{IdMask, Mask};
use crate::math::{self, Vec3};
use crate::render::GradientSet;
use crate::scene::{ClassHead, GaussianCloud};
use crate::semantics::gaussian_class;

/// Scale divisor applied to split children.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
pub const SPLIT_CHILDREN: usize = 2;
/// Largest allowed screen radius as a fraction of the larger image side.
pub const MAX_SCREEN_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlConfig {
    pub densify_interval: u64,
    pub densify_from: u64,
    pub densify_until: u64,
    pub grad_threshold: f64,
    /// Clone below this fraction of the scene extent, split above.
    pub split_scale_threshold: f64,
    pub roi_prob_threshold: f64,
    pub semantic_prune_from: u64,
    pub opacity_prune_eps: f64,
    pub mask_dilation_px: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            densify_interval: 100,
            densify_from: 500,
            densify_until: 7500,
            grad_threshold: 2e-4,
            split_scale_threshold: 0.01,
            roi_prob_threshold: 0.6,
            semantic_prune_from: 1500,
            opacity_prune_eps: 0.005,
            mask_dilation_px: 12,
        }
    }
}

impl ControlConfig {
    /// Validates the schedule against the run length.
    pub fn check(&self, total_iterations: u64) -> Result<()> {
        if self.densify_interval == 0 {
            return Err(Error::Config("densify_interval must be positive".into()));
        }
        if self.densify_from >= self.densify_until || self.densify_until > total_iterations {
            return Err(Error::Config(alloc::format!(
                "need densify_from < densify_until <= iterations, got {} / {} / {}",
                self.densify_from,
                self.densify_until,
                total_iterations
            )));
        }
        if !(self.roi_prob_threshold > 0.0 && self.roi_prob_threshold < 1.0) {
            return Err(Error::Config("roi_prob_threshold must lie in (0, 1)".into()));
        }
        if !(self.grad_threshold >= 0.0 && self.split_scale_threshold > 0.0 && self.opacity_prune_eps >= 0.0) {
            return Err(Error::Config("control thresholds must be non-negative".into()));
        }
        Ok(())
    }

    /// Whether densification and pruning run after `iteration` completed steps.
    pub fn is_control_step(&self, iteration: u64) -> bool {
        iteration >= self.densify_from && iteration < self.densify_until && iteration % self.densify_interval == 0
    }
}

/// ROI membership: a non-background argmax class with probability at least `threshold`.
pub fn roi_membership(cloud: &GaussianCloud, head: &ClassHead, threshold: f64) -> Vec<bool> {
    gaussian_class(cloud, head).into_iter().map(|(c, p)| c > 0 && p >= threshold).collect()
}

/// Per-Gaussian statistics gathered between control steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyStats {
    /// Sum of screen-space positional gradient norms over counted views.
    pub grad2d_sum: Vec<f64>,
    pub seen_count: Vec<u32>,
    /// Sum of world-space center gradients, used as the clone direction.
    pub grad3d_sum: Vec<Vec3>,
    /// Largest screen radius seen, as a fraction of the larger image side.
    pub max_screen_fraction: Vec<f64>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad2d_sum: vec![0.0; n],
            seen_count: vec![0; n],
            grad3d_sum: vec![[0.0; 3]; n],
            max_screen_fraction: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.seen_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen_count.is_empty()
    }

    /// Mean screen-space gradient norm per Gaussian (0 when never counted).
    pub fn mean_grad2d(&self) -> Vec<f64> {
        self.grad2d_sum
            .iter()
            .zip(&self.seen_count)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    /// Adds one view's gradients. Gradient statistics change only for ROI
    /// members visible in the view; screen size is tracked for everyone.
    pub fn accumulate(&mut self, grads: &GradientSet, roi: &[bool], image_extent: usize) -> Result<()> {
        if grads.len() != self.len() || roi.len() != self.len() {
            return Err(crate::error::contract!(
                "statistics for {} Gaussians, gradients for {}, ROI for {}",
                self.len(),
                grads.len(),
                roi.len()
            ));
        }
        let extent = image_extent.max(1) as f64;
        for i in 0..self.len() {
            if !grads.visible[i] {
                continue;
            }
            self.max_screen_fraction[i] = self.max_screen_fraction[i].max(grads.radius_px[i] / extent);
            if roi[i] {
                self.grad2d_sum[i] += grads.screen_grad[i];
                self.seen_count[i] += 1;
                self.grad3d_sum[i] = math::add(&self.grad3d_sum[i], &grads.centers[i]);
            }
        }
        Ok(())
    }

    /// Carries statistics through a structural edit; new Gaussians start empty.
    pub fn remap(&self, map: &Remap) -> Self {
        let mut out = Self::new(map.len());
        for (new, src) in map.source.iter().enumerate() {
            if let Some(old) = *src {
                out.grad2d_sum[new] = self.grad2d_sum[old];
                out.seen_count[new] = self.seen_count[old];
                out.grad3d_sum[new] = self.grad3d_sum[old];
                out.max_screen_fraction[new] = self.max_screen_fraction[old];
            }
        }
        out
    }
}

/// Where each Gaussian of an edited cloud came from. `None` marks a newly
/// created Gaussian whose optimizer state starts at zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Remap {
    pub source: Vec<Option<usize>>,
}

impl Remap {
    pub fn identity(n: usize) -> Self {
        Self { source: (0..n).map(Some).collect() }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// The combined map of `self` followed by `next`.
    pub fn then(&self, next: &Remap) -> Remap {
        Remap { source: next.source.iter().map(|s| s.and_then(|i| self.source[i])).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensifyOutcome {
    pub cloud: GaussianCloud,
    pub map: Remap,
    pub cloned: usize,
    pub split: usize,
}

/// Clones or splits ROI Gaussians whose mean screen gradient exceeds the
/// threshold.
///
/// Small Gaussians are duplicated; the copy is moved one max-scale against
/// the accumulated center gradient. Large ones are replaced by two children
/// drawn from the parent distribution with scales divided by 1.6. Survivors
/// keep their order, clones follow, then split children.
pub fn densify(
    cloud: &GaussianCloud,
    stats: &DensifyStats,
    roi: &[bool],
    config: &ControlConfig,
    scene_extent: f64,
    seed: u64,
) -> Result<DensifyOutcome> {
    let n = cloud.len();
    if stats.len() != n || roi.len() != n {
        return Err(crate::error::contract!("densify inputs disagree on Gaussian count"));
    }
    let mean = stats.mean_grad2d();
    let split_limit = config.split_scale_threshold * scene_extent;
    let mut keep = Vec::with_capacity(n);
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    for i in 0..n {
        let selected = roi[i] && mean[i] > config.grad_threshold;
        if selected && cloud.max_scale(i) > split_limit {
            splits.push(i);
        } else {
            keep.push(i);
            if selected {
                clones.push(i);
            }
        }
    }
    let mut out = cloud.select(&keep);
    let mut source: Vec<Option<usize>> = keep.iter().map(|&i| Some(i)).collect();
    for &i in &clones {
        let mut g = cloud.gaussian(i);
        let dir = stats.grad3d_sum[i];
        let len = math::norm(&dir);
        if len > 0.0 {
            g.center = math::sub(&g.center, &math::scale(&dir, cloud.max_scale(i) / len));
        }
        out.push(g)?;
        source.push(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shrink = math::ln(SPLIT_SCALE_DIVISOR);
    for &i in &splits {
        let parent = cloud.gaussian(i);
        let rot = math::quat_to_mat(&math::quat_normalize(&parent.rotation));
        let scales = cloud.scales(i);
        for _ in 0..SPLIT_CHILDREN {
            let z: Vec3 = core::array::from_fn(|a| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * scales[a]
            });
            let mut child = parent.clone();
            child.center = math::add(&parent.center, &math::mat_vec(&rot, &z));
            child.log_scale = core::array::from_fn(|a| parent.log_scale[a] - shrink);
            out.push(child)?;
            source.push(None);
        }
    }
    Ok(DensifyOutcome { cloud: out, map: Remap { source }, cloned: clones.len(), split: splits.len() })
}

/// Why a Gaussian is removed, if it is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneReason {
    Transparent,
    Oversized,
    OutsideRoi,
}

/// The prune predicate for one Gaussian.
pub fn prune_reason(
    opacity: f64,
    max_screen_fraction: f64,
    in_roi: bool,
    semantic: bool,
    iteration: u64,
    config: &ControlConfig,
) -> Option<PruneReason> {
    if opacity < config.opacity_prune_eps {
        Some(PruneReason::Transparent)
    } else if max_screen_fraction > MAX_SCREEN_FRACTION {
        Some(PruneReason::Oversized)
    } else if semantic && iteration >= config.semantic_prune_from && !in_roi {
        Some(PruneReason::OutsideRoi)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub cloud: GaussianCloud,
    pub map: Remap,
    pub removed: usize,
}

/// Removes every Gaussian matching [`prune_reason`]. Survivors keep their order.
/// `semantic = false` disables the ROI rule.
pub fn prune(
    cloud: &GaussianCloud,
    roi: &[bool],
    stats: &DensifyStats,
    config: &ControlConfig,
    iteration: u64,
    semantic: bool,
) -> Result<PruneOutcome> {
    let n = cloud.len();
    if stats.len() != n || roi.len() != n {
        return Err(crate::error::contract!("prune inputs disagree on Gaussian count"));
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| {
            prune_reason(cloud.opacity(i), stats.max_screen_fraction[i], roi[i], semantic, iteration, config).is_none()
        })
        .collect();
    Ok(PruneOutcome {
        cloud: cloud.select(&keep),
        removed: n - keep.len(),
        map: Remap { source: keep.into_iter().map(Some).collect() },
    })
}

/// Dilation of all target pixels (`id > 0`) by a Euclidean disc of radius
/// `radius` pixels.
pub fn build_floating_mask(id_mask: &IdMask, radius: usize) -> Mask {
    let (w, h) = (id_mask.width(), id_mask.height());
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut out = Mask::new(w, h, 1, false);
    for y in 0..h {
        for x in 0..w {
            if id_mask.get(x, y) == 0 {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (xx, yy) = (x as isize + dx, y as isize + dy);
                if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                    out.set(xx as usize, yy as usize, true);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::init_random_cloud;
    use crate::Aabb;

    fn stats_with(n: usize, grad: f64) -> DensifyStats {
        let mut s = DensifyStats::new(n);
        for i in 0..n {
            s.grad2d_sum[i] = grad;
            s.seen_count[i] = 1;
            s.grad3d_sum[i] = [1.0, 0.0, 0.0];
        }
        s
    }

    #[test]
    fn below_threshold_leaves_cloud_unchanged() {
        let cloud = init_random_cloud(10, &Aabb::unit(), 1).unwrap();
        let out = densify(&cloud, &stats_with(10, 1e-5), &[true; 10], &ControlConfig::default(), 1.0, 0).unwrap();
        assert_eq!(out.cloud, cloud);
        assert_eq!(out.map, Remap::identity(10));
    }

    #[test]
    fn small_gaussian_is_cloned() {
        let mut cloud = init_random_cloud(3, &Aabb::unit(), 1).unwrap();
        cloud.log_scales = vec![[math::ln(1e-3); 3]; 3];
        let mut roi = [false; 3];
        roi[1] = true;
        let out = densify(&cloud, &stats_with(3, 1.0), &roi, &ControlConfig::default(), 1.0, 0).unwrap();
        assert_eq!(out.cloud.len(), 4);
        assert_eq!(out.cloud.identity_codes[3], cloud.identity_codes[1]);
        assert_eq!(out.map.source, vec![Some(0), Some(1), Some(2), None]);
        // Moved against the accumulated gradient by one max-scale.
        assert!((out.cloud.centers[3][0] - (cloud.centers[1][0] - 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn large_gaussian_is_split() {
        let mut cloud = init_random_cloud(2, &Aabb::unit(), 1).unwrap();
        cloud.log_scales[0] = [math::ln(0.2); 3];
        cloud.log_scales[1] = [math::ln(1e-4); 3];
        let out = densify(&cloud, &stats_with(2, 1.0), &[true, false], &ControlConfig::default(), 1.0, 4).unwrap();
        assert_eq!(out.cloud.len(), 3);
        assert_eq!(out.split, 1);
        for c in 1..3 {
            for a in 0..3 {
                assert!((out.cloud.scales(c)[a] - 0.2 / 1.6).abs() < 1e-12);
            }
            assert_eq!(out.cloud.identity_codes[c], cloud.identity_codes[0]);
        }
        assert_eq!(out.map.source, vec![Some(1), None, None]);
        let again = densify(&cloud, &stats_with(2, 1.0), &[true, false], &ControlConfig::default(), 1.0, 4).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn prune_removes_transparent() {
        let mut cloud = init_random_cloud(4, &Aabb::unit(), 1).unwrap();
        cloud.opacity_logits[2] = math::logit(0.001);
        let out = prune(&cloud, &[true; 4], &DensifyStats::new(4), &ControlConfig::default(), 0, true).unwrap();
        assert_eq!(out.removed, 1);
        assert_eq!(out.map.source, vec![Some(0), Some(1), Some(3)]);
        let nothing = prune(&cloud, &[true; 4], &DensifyStats::new(4), &ControlConfig::default(), 0, true)
            .map(|o| prune(&o.cloud, &[true; 3], &DensifyStats::new(3), &ControlConfig::default(), 0, true).unwrap())
            .unwrap();
        assert_eq!(nothing.removed, 0);
    }

    #[test]
    fn semantic_rule_waits_for_warmup() {
        let cloud = init_random_cloud(4, &Aabb::unit(), 1).unwrap();
        let roi = [true, false, true, false];
        let cfg = ControlConfig::default();
        assert_eq!(prune(&cloud, &roi, &DensifyStats::new(4), &cfg, 1499, true).unwrap().removed, 0);
        assert_eq!(prune(&cloud, &roi, &DensifyStats::new(4), &cfg, 1500, true).unwrap().removed, 2);
        assert_eq!(prune(&cloud, &roi, &DensifyStats::new(4), &cfg, 1500, false).unwrap().removed, 0);
    }

    #[test]
    fn single_pixel_dilates_to_plus() {
        let mut ids = IdMask::new(5, 5, 1, 0);
        ids.set(2, 2, 3);
        let m = build_floating_mask(&ids, 1);
        let on: Vec<(usize, usize)> = (0..25).filter(|p| m.data()[*p]).map(|p| (p % 5, p / 5)).collect();
        assert_eq!(on, vec![(2, 1), (1, 2), (2, 2), (3, 2), (2, 3)]);
        assert!(build_floating_mask(&IdMask::new(5, 5, 1, 0), 3).data().iter().all(|v| !v));
    }

    #[test]
    fn accumulate_counts_only_visible_roi() {
        let cloud = init_random_cloud(3, &Aabb::unit(), 1).unwrap();
        let mut s = DensifyStats::new(3);
        let mut g = GradientSet::zeros(&cloud);
        g.visible = vec![true, true, false];
        g.screen_grad = vec![0.5, 0.25, 9.0];
        g.radius_px = vec![10.0, 20.0, 30.0];
        s.accumulate(&g, &[false, true, true], 100).unwrap();
        assert_eq!(s.seen_count, vec![0, 1, 0]);
        assert_eq!(s.mean_grad2d(), vec![0.0, 0.25, 0.0]);
        assert_eq!(s.max_screen_fraction, vec![0.1, 0.2, 0.0]);
    }
}
