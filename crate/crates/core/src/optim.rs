//! Total training loss and the Adam update.

use alloc::vec;
use alloc::vec::Vec;

use crate::control::Remap;
use crate::depth::{self, DepthRegConfig, DepthSource};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::math;
use crate::photometric::{self, PhotometricConfig};
use crate::render::{self, AdjointGroup, Adjoints, GradientSet, ParamMask, RenderOutput, RenderSettings};
use crate::scene::{Camera, ClassHead, GaussianCloud, ViewBundle, ID_DIM};
use crate::semantics::{self, GroupingConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    /// Initial center rate, multiplied by the spatial scale.
    pub centers: f64,
    /// Factor the center rate reaches at the last iteration.
    pub centers_final_factor: f64,
    pub log_scales: f64,
    pub rotations: f64,
    pub opacity_logits: f64,
    pub colors: f64,
    pub identity_codes: f64,
    pub class_head: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            centers: 1.6e-4,
            centers_final_factor: 0.01,
            log_scales: 5e-3,
            rotations: 1e-3,
            opacity_logits: 5e-2,
            colors: 2.5e-3,
            identity_codes: 2.5e-3,
            class_head: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_iterations: u64,
    /// Scene extent; center rates are expressed per unit of it.
    pub spatial_lr_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            total_iterations: 10_000,
            spatial_lr_scale: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn check(&self) -> Result<()> {
        let l = &self.lr;
        let rates = [l.centers, l.log_scales, l.rotations, l.opacity_logits, l.colors, l.identity_codes, l.class_head];
        if rates.iter().any(|r| !(*r > 0.0)) || !(l.centers_final_factor > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        if !(self.eps > 0.0 && self.spatial_lr_scale > 0.0) {
            return Err(Error::Config("eps and spatial_lr_scale must be positive".into()));
        }
        Ok(())
    }

    /// Center learning rate after `iteration` steps: log-linear decay from
    /// the initial rate to `centers_final_factor` times it.
    pub fn center_lr(&self, iteration: u64) -> f64 {
        let t = if self.total_iterations == 0 {
            1.0
        } else {
            (iteration as f64 / self.total_iterations as f64).clamp(0.0, 1.0)
        };
        self.lr.centers * self.spatial_lr_scale * math::exp(t * math::ln(self.lr.centers_final_factor))
    }
}

/// Weights and sub-configurations of the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_id: f64,
    pub lambda_d: f64,
    pub photometric: PhotometricConfig,
    pub grouping: GroupingConfig,
    pub depth: DepthRegConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_id: 1.0,
            lambda_d: 0.1,
            photometric: PhotometricConfig::default(),
            grouping: GroupingConfig::default(),
            depth: DepthRegConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lambda_id >= 0.0 && self.lambda_d >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.photometric.check()?;
        self.grouping.check()?;
        self.depth.check()
    }

    pub fn identity_active(&self) -> bool {
        self.lambda_id > 0.0 && (self.grouping.lambda_2d > 0.0 || self.grouping.lambda_3d > 0.0)
    }

    pub fn hard_depth_needed(&self) -> bool {
        self.lambda_d > 0.0
            && (self.depth.lambda_sh > 0.0 || (self.depth.lambda_gl > 0.0 && self.depth.gl_source == DepthSource::Hard))
    }

    /// Render settings for a training step with this loss.
    pub fn render_settings(&self, background_depth: f64) -> RenderSettings {
        RenderSettings {
            background_depth,
            hard_omega: self.depth.hard_override_omega,
            identity: self.identity_active(),
            hard_depth: self.hard_depth_needed(),
        }
    }
}

/// Every loss term of one step. Terms whose weight is zero are not evaluated
/// and read 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub l_color: f64,
    pub l_2d: f64,
    pub l_3d: f64,
    pub l_hard: f64,
    pub l_soft: f64,
    pub l_gl: f64,
    pub total: f64,
}

impl LossTerms {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l_color", self.l_color),
            ("l_2d", self.l_2d),
            ("l_3d", self.l_3d),
            ("l_hard", self.l_hard),
            ("l_soft", self.l_soft),
            ("l_gl", self.l_gl),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub terms: LossTerms,
    pub grads: GradientSet,
    pub head_grad: ClassHead,
    pub output: RenderOutput,
}

/// Renders `view` once and evaluates `L_color + λ_id · L_id + λ_D · L_D`.
///
/// Each term is backpropagated under its own parameter restriction: the hard
/// depth term reaches centers only, the soft depth term opacities only, and
/// everything else reaches every parameter. The identity term uses the whole
/// frame; color and depth use the view's floating mask.
pub fn total_loss(
    view: &ViewBundle,
    camera: &Camera,
    cloud: &GaussianCloud,
    head: &ClassHead,
    config: &LossConfig,
    background_depth: f64,
    seed: u64,
) -> Result<TotalLoss> {
    let settings = config.render_settings(background_depth);
    let output = render::render(cloud, camera, &settings);
    let frame = &output.frame;
    let mut terms = LossTerms::default();

    let color = photometric::color_loss(&frame.color, &view.image, &view.floating_mask, &config.photometric)?;
    terms.l_color = color.value;

    let mut head_grad = ClassHead::zeros(head.instance_count());
    let mut id_adjoint: Option<Grid<f64>> = None;
    let mut code_grads: Option<Vec<[f64; ID_DIM]>> = None;
    if config.identity_active() {
        let full = Mask::new(camera.width, camera.height, 1, true);
        let g = semantics::grouping_loss(&frame.id_feature, &view.id_mask, &full, cloud, head, &config.grouping, seed)?;
        terms.l_2d = g.l_2d;
        terms.l_3d = g.l_3d;
        let s = config.lambda_id;
        id_adjoint = Some(g.d_feature.map(|v| v * s));
        for (a, b) in head_grad.weight.iter_mut().zip(&g.d_head.weight) {
            *a = s * b;
        }
        for (a, b) in head_grad.bias.iter_mut().zip(&g.d_head.bias) {
            *a = s * b;
        }
        code_grads = Some(g.d_codes);
    }

    let mut depth_loss = None;
    if config.lambda_d > 0.0 {
        let d = depth::multi_scale_depth_loss(frame, view, &config.depth)?;
        terms.l_hard = d.l_hard;
        terms.l_soft = d.l_soft;
        terms.l_gl = d.l_gl;
        depth_loss = Some(d);
    }
    terms.total = terms.l_color
        + config.lambda_id * (config.grouping.lambda_2d * terms.l_2d + config.grouping.lambda_3d * terms.l_3d)
        + config.lambda_d
            * (config.depth.lambda_sh * (terms.l_hard + terms.l_soft) + config.depth.lambda_gl * terms.l_gl);

    let scaled_depth = depth_loss.as_ref().map(|d| {
        let s = config.lambda_d;
        (d.hard_adjoint.map(|v| v * s), d.soft_adjoint.map(|v| v * s), d.gl_adjoint.map(|v| v * s), d.gl_source)
    });
    let mut all = Adjoints { color: Some(&color.adjoint), id_feature: id_adjoint.as_ref(), ..Default::default() };
    let mut groups = Vec::with_capacity(3);
    if let Some((hard, soft, gl, source)) = scaled_depth.as_ref() {
        if config.depth.lambda_gl > 0.0 {
            match source {
                DepthSource::Soft => all.soft_depth = Some(gl),
                DepthSource::Hard => all.hard_depth = Some(gl),
            }
        }
        if config.depth.lambda_sh > 0.0 {
            groups.push(AdjointGroup {
                mask: ParamMask::CENTERS,
                adjoints: Adjoints { hard_depth: Some(hard), ..Default::default() },
            });
            groups.push(AdjointGroup {
                mask: ParamMask::OPACITIES,
                adjoints: Adjoints { soft_depth: Some(soft), ..Default::default() },
            });
        }
    }
    groups.insert(0, AdjointGroup { mask: ParamMask::ALL, adjoints: all });
    let mut grads = render::backward(&output, cloud, camera, &groups)?;
    if let Some(cg) = code_grads {
        for (a, b) in grads.identity_codes.iter_mut().zip(&cg) {
            for d in 0..ID_DIM {
                a[d] += config.lambda_id * b[d];
            }
        }
    }
    Ok(TotalLoss { terms, grads, head_grad, output })
}

/// First and second moments of one parameter block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// Moves moments of surviving Gaussians; `width` values per Gaussian.
    fn remap(&self, map: &Remap, width: usize) -> Self {
        let mut out = Self::zeros(map.len() * width);
        for (new, src) in map.source.iter().enumerate() {
            if let Some(old) = *src {
                out.m[new * width..(new + 1) * width].copy_from_slice(&self.m[old * width..(old + 1) * width]);
                out.v[new * width..(new + 1) * width].copy_from_slice(&self.v[old * width..(old + 1) * width]);
            }
        }
        out
    }
}

/// Adam state for every parameter block of a cloud and head.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub steps: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    pub centers: Moments,
    pub log_scales: Moments,
    pub rotations: Moments,
    pub opacity_logits: Moments,
    pub colors: Moments,
    pub identity_codes: Moments,
    pub head: Moments,
}

impl AdamState {
    pub fn new(cloud: &GaussianCloud, head: &ClassHead) -> Self {
        let n = cloud.len();
        Self {
            steps: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            centers: Moments::zeros(3 * n),
            log_scales: Moments::zeros(3 * n),
            rotations: Moments::zeros(4 * n),
            opacity_logits: Moments::zeros(n),
            colors: Moments::zeros(3 * cloud.colors.len()),
            identity_codes: Moments::zeros(ID_DIM * n),
            head: Moments::zeros(head.weight.len() + head.bias.len()),
        }
    }

    /// Carries moments through a densify or prune edit of a cloud whose
    /// color blocks hold `sh_coeffs` coefficients.
    pub fn remap(&mut self, map: &Remap, sh_coeffs: usize) {
        self.centers = self.centers.remap(map, 3);
        self.log_scales = self.log_scales.remap(map, 3);
        self.rotations = self.rotations.remap(map, 4);
        self.opacity_logits = self.opacity_logits.remap(map, 1);
        self.colors = self.colors.remap(map, 3 * sh_coeffs);
        self.identity_codes = self.identity_codes.remap(map, ID_DIM);
    }
}

struct AdamStep {
    b1: f64,
    b2: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
}

impl AdamStep {
    #[inline]
    fn apply(&self, x: &mut [f64], g: &[f64], mom: &mut Moments, lr: f64) {
        for k in 0..x.len() {
            let m = self.b1 * mom.m[k] + (1.0 - self.b1) * g[k];
            let v = self.b2 * mom.v[k] + (1.0 - self.b2) * g[k] * g[k];
            mom.m[k] = m;
            mom.v[k] = v;
            x[k] -= lr * (m / self.bc1) / (math::sqrt(v / self.bc2) + self.eps);
        }
    }
}

fn flat_mut<const K: usize>(v: &mut [[f64; K]]) -> &mut [f64] {
    v.as_flattened_mut()
}

fn flat<const K: usize>(v: &[[f64; K]]) -> &[f64] {
    v.as_flattened()
}

/// One Adam update of every parameter.
///
/// `iteration` is the index of the step (0-based) and drives the center
/// learning-rate schedule. A quaternion is renormalized only when the update
/// changed it, so parameters with zero gradient and zero moments stay
/// bit-identical.
pub fn step(
    cloud: &mut GaussianCloud,
    head: &mut ClassHead,
    grads: &GradientSet,
    head_grad: &ClassHead,
    state: &mut AdamState,
    iteration: u64,
    config: &OptimizerConfig,
) -> Result<()> {
    let n = cloud.len();
    if grads.len() != n || state.centers.m.len() != 3 * n || grads.colors.len() != cloud.colors.len() {
        return Err(crate::error::contract!("gradient or optimizer state does not match the cloud"));
    }
    if head_grad.weight.len() != head.weight.len() || state.head.m.len() != head.weight.len() + head.bias.len() {
        return Err(crate::error::contract!("head gradient or state does not match the head"));
    }
    state.steps += 1;
    state.beta1_pow *= config.beta1;
    state.beta2_pow *= config.beta2;
    let adam = AdamStep {
        b1: config.beta1,
        b2: config.beta2,
        bc1: 1.0 - state.beta1_pow,
        bc2: 1.0 - state.beta2_pow,
        eps: config.eps,
    };
    let lr = &config.lr;
    adam.apply(flat_mut(&mut cloud.centers), flat(&grads.centers), &mut state.centers, config.center_lr(iteration));
    adam.apply(flat_mut(&mut cloud.log_scales), flat(&grads.log_scales), &mut state.log_scales, lr.log_scales);
    let before = cloud.rotations.clone();
    adam.apply(flat_mut(&mut cloud.rotations), flat(&grads.rotations), &mut state.rotations, lr.rotations);
    for (q, q0) in cloud.rotations.iter_mut().zip(&before) {
        if q != q0 {
            *q = math::quat_normalize(q);
        }
    }
    adam.apply(&mut cloud.opacity_logits, &grads.opacity_logits, &mut state.opacity_logits, lr.opacity_logits);
    adam.apply(flat_mut(&mut cloud.colors), flat(&grads.colors), &mut state.colors, lr.colors);
    adam.apply(
        flat_mut(&mut cloud.identity_codes),
        flat(&grads.identity_codes),
        &mut state.identity_codes,
        lr.identity_codes,
    );
    let nw = head.weight.len();
    let mut hp: Vec<f64> = head.weight.iter().chain(&head.bias).copied().collect();
    let hg: Vec<f64> = head_grad.weight.iter().chain(&head_grad.bias).copied().collect();
    adam.apply(&mut hp, &hg, &mut state.head, lr.class_head);
    head.weight.copy_from_slice(&hp[..nw]);
    head.bias.copy_from_slice(&hp[nw..]);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::init_random_cloud;
    use crate::Aabb;

    #[test]
    fn zero_gradient_step_is_identity() {
        let mut cloud = init_random_cloud(20, &Aabb::unit(), 3).unwrap();
        let mut head = ClassHead::random(2, 1);
        let (c0, h0) = (cloud.clone(), head.clone());
        let mut st = AdamState::new(&cloud, &head);
        let g = GradientSet::zeros(&cloud);
        step(&mut cloud, &mut head, &g, &ClassHead::zeros(2), &mut st, 0, &OptimizerConfig::default()).unwrap();
        assert_eq!(cloud, c0);
        assert_eq!(head, h0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut cloud = init_random_cloud(1, &Aabb::unit(), 3).unwrap();
        let mut head = ClassHead::zeros(1);
        let mut st = AdamState::new(&cloud, &head);
        let mut g = GradientSet::zeros(&cloud);
        g.opacity_logits[0] = 3.7;
        g.log_scales[0] = [-0.2, 0.0, 1e-3];
        let before = cloud.clone();
        let cfg = OptimizerConfig::default();
        step(&mut cloud, &mut head, &g, &ClassHead::zeros(1), &mut st, 0, &cfg).unwrap();
        assert!((cloud.opacity_logits[0] - (before.opacity_logits[0] - 5e-2)).abs() < 1e-12);
        assert!((cloud.log_scales[0][0] - (before.log_scales[0][0] + 5e-3)).abs() < 1e-12);
        assert_eq!(cloud.log_scales[0][1], before.log_scales[0][1]);
        assert!((cloud.log_scales[0][2] - (before.log_scales[0][2] - 5e-3)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f = Σ (x − target)² over the opacity logits. With a constant rate
        // Adam only settles to within a fraction of the step size, so the
        // bowl uses a rate of 0.01 and minima within 0.2 of the start.
        let mut cloud = init_random_cloud(4, &Aabb::unit(), 3).unwrap();
        let mut head = ClassHead::zeros(1);
        let x0 = cloud.opacity_logits[0];
        let target = [x0 + 0.2, x0 - 0.15, x0 + 0.05, x0 - 0.01];
        let mut st = AdamState::new(&cloud, &head);
        let mut cfg = OptimizerConfig::default();
        cfg.lr.opacity_logits = 0.01;
        for it in 0..100 {
            let mut g = GradientSet::zeros(&cloud);
            for i in 0..4 {
                g.opacity_logits[i] = 2.0 * (cloud.opacity_logits[i] - target[i]);
            }
            step(&mut cloud, &mut head, &g, &ClassHead::zeros(1), &mut st, it, &cfg).unwrap();
        }
        for i in 0..4 {
            assert!((cloud.opacity_logits[i] - target[i]).abs() < 1e-3, "{i}: {}", cloud.opacity_logits[i]);
        }
    }

    #[test]
    fn center_rate_decays_to_final_factor() {
        let cfg = OptimizerConfig { total_iterations: 1000, spatial_lr_scale: 2.0, ..Default::default() };
        assert!((cfg.center_lr(0) - 3.2e-4).abs() < 1e-18);
        assert!((cfg.center_lr(1000) - 3.2e-6).abs() < 1e-18);
        assert!(cfg.center_lr(500) < cfg.center_lr(499));
    }

    #[test]
    fn remap_keeps_survivor_moments() {
        let cloud = init_random_cloud(3, &Aabb::unit(), 3).unwrap();
        let mut st = AdamState::new(&cloud, &ClassHead::zeros(1));
        st.opacity_logits.m = vec![1.0, 2.0, 3.0];
        st.remap(&Remap { source: vec![Some(2), None, Some(0)] }, 1);
        assert_eq!(st.opacity_logits.m, vec![3.0, 0.0, 1.0]);
        assert_eq!(st.colors.m.len(), 9);
    }
}
