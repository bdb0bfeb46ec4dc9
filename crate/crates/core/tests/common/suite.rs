//! Finite-difference oracle for every training loss term, evaluated through
//! the renderer on random smooth scenes.

use rand::Rng;
use semsplat_core::depth::{self, DepthRegConfig};
use semsplat_core::optim::{self, LossConfig, LossTerms};
use semsplat_core::photometric::{self, PhotometricConfig};
use semsplat_core::render::{self, AdjointGroup, Adjoints, ParamMask, RenderSettings};
use semsplat_core::semantics::{self, GroupingConfig};
use semsplat_core::{Camera, ClassHead, GaussianCloud, Grid, Mask, ViewBundle};

use super::*;

pub const BACKGROUND_DEPTH: f64 = 8.0;
pub const TERMS: [&str; 7] = ["L_color", "L_2d", "L_3d", "L_hard", "L_soft", "L_GL", "total"];

pub struct Case {
    pub cloud: GaussianCloud,
    pub camera: Camera,
    pub view: ViewBundle,
    pub head: ClassHead,
    pub config: LossConfig,
}

/// Scene `seed`: 3 to 10 Gaussians on an 8×8 to 16×16 image with random
/// supervision buffers.
pub fn case(seed: u64) -> Case {
    let mut r = rng(seed ^ 0x5eed);
    let n = r.random_range(3..=10);
    let size = r.random_range(8..=16);
    let (cloud, camera) = smooth_scene(seed, n, size, size, (seed % 2) as u8);
    let image = random_grid(seed + 1, size, size, 3, 0.0, 1.0);
    let prior_depth = random_grid(seed + 2, size, size, 1, 0.5, 2.0);
    let ids = (0..size * size)
        .map(|p| {
            let x = p % size;
            (3 * x / size) as u8
        })
        .collect();
    let id_mask = Grid::from_vec(size, size, 1, ids).unwrap();
    let floating_mask = Mask::from_vec(size, size, 1, (0..size * size).map(|_| r.random::<f64>() < 0.85).collect()).unwrap();
    let view = ViewBundle { image, id_mask, prior_depth, floating_mask };
    let config = LossConfig {
        lambda_id: 0.7,
        lambda_d: 0.3,
        photometric: PhotometricConfig::default(),
        grouping: GroupingConfig { lambda_2d: 1.0, lambda_3d: 0.5, knn_k: 2, sample_m: 12 },
        depth: DepthRegConfig { patch_size: 4, lambda_sh: 1.0, lambda_gl: 0.8, ..Default::default() },
    };
    Case { cloud, camera, view, head: ClassHead::random(2, seed), config }
}

fn settings(c: &Case) -> RenderSettings {
    c.config.render_settings(BACKGROUND_DEPTH)
}

/// Every term as a plain function of the cloud.
pub fn term_values(c: &Case, cloud: &GaussianCloud) -> [f64; 7] {
    let out = render::render(cloud, &c.camera, &settings(c));
    let f = &out.frame;
    let full = Mask::new(c.camera.width, c.camera.height, 1, true);
    let l_color = photometric::color_loss(&f.color, &c.view.image, &c.view.floating_mask, &c.config.photometric).unwrap().value;
    let l_2d = semantics::loss_2d(&f.id_feature, &c.view.id_mask, &full, &c.head).unwrap().value;
    let l_3d = semantics::loss_3d(cloud, &c.head, &c.config.grouping, 17).unwrap().value;
    let sh = depth::soft_hard_loss(f, &c.view, true).unwrap();
    let region = depth::target_region(&c.view);
    let l_gl = depth::global_local_loss(&f.soft_depth, &c.view.prior_depth, &region, c.config.depth.gamma, 4).unwrap().value;
    let total = optim::total_loss(&c.view, &c.camera, cloud, &c.head, &c.config, BACKGROUND_DEPTH, 17).unwrap().terms.total;
    [l_color, l_2d, l_3d, sh.hard.value, sh.soft.value, l_gl, total]
}

/// Analytic gradient of each single term with no parameter restriction, and
/// the training gradient of the total.
pub fn analytic(c: &Case) -> [Vec<f64>; 7] {
    let out = render::render(&c.cloud, &c.camera, &settings(c));
    let f = &out.frame;
    let full = Mask::new(c.camera.width, c.camera.height, 1, true);
    let back = |adj: Adjoints| {
        render::backward(&out, &c.cloud, &c.camera, &[AdjointGroup { mask: ParamMask::ALL, adjoints: adj }])
            .unwrap()
            .flatten()
    };
    let color = photometric::color_loss(&f.color, &c.view.image, &c.view.floating_mask, &c.config.photometric).unwrap();
    let g_color = back(Adjoints { color: Some(&color.adjoint), ..Default::default() });
    let l2 = semantics::loss_2d(&f.id_feature, &c.view.id_mask, &full, &c.head).unwrap();
    let g_2d = back(Adjoints { id_feature: Some(&l2.d_feature), ..Default::default() });
    let l3 = semantics::loss_3d(&c.cloud, &c.head, &c.config.grouping, 17).unwrap();
    let mut g3 = semsplat_core::GradientSet::zeros(&c.cloud);
    g3.identity_codes = l3.d_codes;
    let g_3d = g3.flatten();
    let sh = depth::soft_hard_loss(f, &c.view, true).unwrap();
    let g_hard = back(Adjoints { hard_depth: Some(&sh.hard.adjoint), ..Default::default() });
    let g_soft = back(Adjoints { soft_depth: Some(&sh.soft.adjoint), ..Default::default() });
    let region = depth::target_region(&c.view);
    let gl = depth::global_local_loss(&f.soft_depth, &c.view.prior_depth, &region, c.config.depth.gamma, 4).unwrap();
    let g_gl = back(Adjoints { soft_depth: Some(&gl.adjoint), ..Default::default() });
    let total = optim::total_loss(&c.view, &c.camera, &c.cloud, &c.head, &c.config, BACKGROUND_DEPTH, 17).unwrap();
    [g_color, g_2d, g_3d, g_hard, g_soft, g_gl, total.grads.flatten()]
}

/// Weight of each term in the total, per parameter group, under the freeze
/// contracts: the hard depth term only reaches centers, the soft depth term
/// only opacities.
fn admitted_weights(config: &LossConfig, group: &str) -> [f64; 6] {
    let id = config.lambda_id;
    let d = config.lambda_d;
    let sh = d * config.depth.lambda_sh;
    [
        1.0,
        id * config.grouping.lambda_2d,
        id * config.grouping.lambda_3d,
        if group == "centers" { sh } else { 0.0 },
        if group == "opacity_logits" { sh } else { 0.0 },
        d * config.depth.lambda_gl,
    ]
}

/// Per-term worst relative error (ignoring entries within the absolute
/// tolerance) of one case, plus the number of compared entries.
pub fn check_case(seed: u64) -> ([f64; 7], usize) {
    let c = case(seed);
    let a = analytic(&c);
    let mut work = c.cloud.clone();
    let np = param_count(&c.cloud);
    let mut fd = vec![[0.0; 7]; np];
    for (k, row) in fd.iter_mut().enumerate() {
        let x = *param_mut(&mut work, k);
        *param_mut(&mut work, k) = x + FD_STEP;
        let fp = term_values(&c, &work);
        *param_mut(&mut work, k) = x - FD_STEP;
        let fm = term_values(&c, &work);
        *param_mut(&mut work, k) = x;
        for t in 0..7 {
            row[t] = (fp[t] - fm[t]) / (2.0 * FD_STEP);
        }
    }
    let mut worst = [0.0f64; 7];
    for k in 0..np {
        let group = param_group(&c.cloud, k);
        let w = admitted_weights(&c.config, group);
        let total_fd: f64 = (0..6).map(|t| w[t] * fd[k][t]).sum();
        for t in 0..7 {
            let want = if t == 6 { total_fd } else { fd[k][t] };
            let diff = (a[t][k] - want).abs();
            if diff >= ABS_TOL {
                worst[t] = worst[t].max(diff / a[t][k].abs().max(want.abs()));
            }
        }
    }
    (worst, np)
}

/// Total loss value as seen by the trainer equals the weighted sum of terms.
pub fn total_is_weighted_sum(seed: u64) -> f64 {
    let c = case(seed);
    let v = term_values(&c, &c.cloud);
    let w = admitted_weights(&c.config, "");
    let sum = v[0] + w[1] * v[1] + w[2] * v[2] + c.config.lambda_d * c.config.depth.lambda_sh * (v[3] + v[4]) + w[5] * v[5];
    (sum - v[6]).abs()
}

pub fn terms_of(c: &Case) -> LossTerms {
    optim::total_loss(&c.view, &c.camera, &c.cloud, &c.head, &c.config, BACKGROUND_DEPTH, 17).unwrap().terms
}
