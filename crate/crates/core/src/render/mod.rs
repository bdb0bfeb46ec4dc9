//! Differentiable splat renderer.
//!
//! [`project`] turns the cloud into depth-sorted screen-space splats,
//! [`composite`] blends them front to back per 16×16 tile into color,
//! identity feature, soft depth, hard depth and accumulated alpha, and
//! [`backward`] pulls per-pixel adjoints back onto every Gaussian parameter.
//! [`reference`] holds the naive per-pixel loop used as the test oracle.

mod backward;
mod project;
mod raster;
pub mod reference;

use alloc::vec;
use alloc::vec::Vec;

use crate::grid::{Grid, Image};
use crate::math::Vec3;
use crate::scene::{GaussianCloud, IdCode, ID_DIM};

pub use backward::backward;
pub use project::{project, ProjectedGaussian};
pub use raster::composite;

/// Low-pass dilation added to every projected covariance, in px².
pub const DILATION: f64 = 0.3;
/// Gaussians with camera-space depth at or below this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Upper clamp on per-pixel influence.
pub const MAX_ALPHA: f64 = 0.99;
/// Influences below this are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance would fall below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Depth maps are divided by accumulated alpha only above this.
pub const DEPTH_NORMALIZE_MIN_ALPHA: f64 = 1e-3;
/// Default opacity override for the hard depth pass.
pub const HARD_DEPTH_OMEGA: f64 = 0.95;
pub const TILE_SIZE: usize = 16;

/// Settings that affect compositing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Depth written where accumulated alpha is negligible.
    pub background_depth: f64,
    /// Opacity used for every splat in the hard depth pass.
    pub hard_omega: f64,
    /// Skip the identity channel (zeros) when false.
    pub identity: bool,
    /// Skip the hard depth pass (background depth) when false.
    pub hard_depth: bool,
}

impl RenderSettings {
    pub fn new(background_depth: f64) -> Self {
        Self { background_depth, hard_omega: HARD_DEPTH_OMEGA, identity: true, hard_depth: true }
    }
}

/// The rendered channels of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub color: Image,
    pub id_feature: Grid<f64>,
    pub soft_depth: Image,
    pub hard_depth: Image,
    pub accum_alpha: Image,
}

impl Frame {
    pub(crate) fn blank(width: usize, height: usize, background_depth: f64) -> Self {
        Self {
            color: Image::new(width, height, 3, 0.0),
            id_feature: Grid::new(width, height, ID_DIM, 0.0),
            soft_depth: Image::new(width, height, 1, background_depth),
            hard_depth: Image::new(width, height, 1, background_depth),
            accum_alpha: Image::new(width, height, 1, 0.0),
        }
    }
}

/// Per-pixel record of a compositing pass, enough to replay it backwards.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct PassRecord {
    /// Exclusive bound on the tile-list positions that contributed.
    pub end: Vec<u32>,
    pub final_t: Vec<f64>,
    /// Unnormalized depth sum `Σ wᵢ zᵢ`.
    pub depth_sum: Vec<f64>,
}

/// Saved compositing state for [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardState {
    pub(crate) projected: Vec<ProjectedGaussian>,
    pub(crate) tiles: Vec<Vec<u32>>,
    pub(crate) tiles_x: usize,
    pub(crate) main: PassRecord,
    pub(crate) hard: PassRecord,
    pub(crate) settings: RenderSettings,
    pub(crate) cloud_len: usize,
    pub(crate) width: usize,
    pub(crate) height: usize,
}

impl BackwardState {
    pub fn projected(&self) -> &[ProjectedGaussian] {
        &self.projected
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub frame: Frame,
    pub state: BackwardState,
}

/// Which Gaussian parameters a gradient contribution may reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMask(u8);

impl ParamMask {
    pub const CENTERS: Self = Self(1);
    pub const LOG_SCALES: Self = Self(2);
    pub const ROTATIONS: Self = Self(4);
    pub const OPACITIES: Self = Self(8);
    pub const COLORS: Self = Self(16);
    pub const IDENTITY: Self = Self(32);
    pub const ALL: Self = Self(63);
    pub const NONE: Self = Self(0);

    pub const fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub const fn contains(self, other: Self) -> bool {
        self.0 & other.0 == other.0
    }
}

/// Pixel-space adjoints of the rendered channels, all optional.
#[derive(Debug, Clone, Copy, Default)]
pub struct Adjoints<'a> {
    pub color: Option<&'a Image>,
    pub id_feature: Option<&'a Grid<f64>>,
    pub soft_depth: Option<&'a Image>,
    pub hard_depth: Option<&'a Image>,
    pub accum_alpha: Option<&'a Image>,
}

/// Adjoints whose parameter gradients are restricted to `mask`.
#[derive(Debug, Clone, Copy)]
pub struct AdjointGroup<'a> {
    pub mask: ParamMask,
    pub adjoints: Adjoints<'a>,
}

/// Per-Gaussian parameter gradients of one backward pass, plus the
/// screen-space statistics densification needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub centers: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub identity_codes: Vec<IdCode>,
    /// Norm of the positional gradient in normalized device units.
    pub screen_grad: Vec<f64>,
    /// Whether the Gaussian survived projection in this view.
    pub visible: Vec<bool>,
    /// Screen-space radius in pixels (0 when not visible).
    pub radius_px: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            centers: vec![[0.0; 3]; n],
            log_scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            colors: vec![[0.0; 3]; cloud.colors.len()],
            identity_codes: vec![[0.0; ID_DIM]; n],
            screen_grad: vec![0.0; n],
            visible: vec![false; n],
            radius_px: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// `self += s · other` on every parameter gradient; screen statistics are
    /// merged by summing gradients and or-ing visibility.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        fn axpy<const K: usize>(a: &mut [[f64; K]], b: &[[f64; K]], s: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..K {
                    x[k] += s * y[k];
                }
            }
        }
        axpy(&mut self.centers, &other.centers, s);
        axpy(&mut self.log_scales, &other.log_scales, s);
        axpy(&mut self.rotations, &other.rotations, s);
        axpy(&mut self.colors, &other.colors, s);
        axpy(&mut self.identity_codes, &other.identity_codes, s);
        for (x, y) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *x += s * y;
        }
        for (x, y) in self.visible.iter_mut().zip(&other.visible) {
            *x |= *y;
        }
        for (x, y) in self.radius_px.iter_mut().zip(&other.radius_px) {
            *x = x.max(*y);
        }
    }

    /// Flattens every parameter gradient in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.centers.iter().flatten());
        out.extend(self.log_scales.iter().flatten());
        out.extend(self.rotations.iter().flatten());
        out.extend(self.opacity_logits.iter());
        out.extend(self.colors.iter().flatten());
        out.extend(self.identity_codes.iter().flatten());
        out
    }
}

/// Runs `f` for every tile index, in parallel when the `parallel` feature is on.
/// Results come back in tile order either way.
pub(crate) fn map_tiles<R: Send>(count: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Convenience: project and composite in one call.
pub fn render(cloud: &GaussianCloud, camera: &crate::scene::Camera, settings: &RenderSettings) -> RenderOutput {
    let projected = project(cloud, camera);
    composite(projected, camera, cloud, settings).expect("project output is sorted")
}

#[cfg(test)]
mod tests;
