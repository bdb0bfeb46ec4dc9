use alloc::vec;
use alloc::vec::Vec;

use super::project::{covariance3d, jw, perspective_jacobian, ProjectedGaussian};
use super::raster::{falloff, tile_bounds};
use super::{
    map_tiles, AdjointGroup, Adjoints, GradientSet, ParamMask, RenderOutput, DEPTH_NORMALIZE_MIN_ALPHA, MAX_ALPHA,
    MIN_ALPHA,
};
use crate::error::{contract, Result};
use crate::grid::Grid;
use crate::math::{self, Mat3};
use crate::scene::{Camera, GaussianCloud, ID_DIM};
use crate::sh;

/// Gradient with respect to one splat's screen-space quantities.
#[derive(Debug, Clone, Copy)]
struct SplatGrad {
    mean2d: [f64; 2],
    /// With respect to the `(a, b, c)` parameters of the conic.
    conic: [f64; 3],
    /// With respect to the activated opacity.
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    id: [f64; ID_DIM],
}

impl SplatGrad {
    const ZERO: Self =
        Self { mean2d: [0.0; 2], conic: [0.0; 3], opacity: 0.0, color: [0.0; 3], depth: 0.0, id: [0.0; ID_DIM] };

    fn add(&mut self, o: &Self) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
        for k in 0..ID_DIM {
            self.id[k] += o.id[k];
        }
    }

    /// Chain rule through the falloff `g = exp(-½ dᵀ Q d)`.
    #[inline]
    fn add_falloff(&mut self, p: &ProjectedGaussian, g: f64, dx: f64, dy: f64, d_g: f64) {
        let d_q = -0.5 * g * d_g;
        let [a, b, c] = p.conic;
        self.mean2d[0] += -2.0 * (a * dx + b * dy) * d_q;
        self.mean2d[1] += -2.0 * (b * dx + c * dy) * d_q;
        self.conic[0] += dx * dx * d_q;
        self.conic[1] += 2.0 * dx * dy * d_q;
        self.conic[2] += dy * dy * d_q;
    }
}

fn check_shape<T>(name: &str, grid: Option<&Grid<T>>, w: usize, h: usize, c: usize) -> Result<()> {
    match grid {
        Some(g) if g.width() != w || g.height() != h || g.channels() != c => Err(contract!(
            "{name} adjoint is {}x{}x{}, render is {w}x{h}x{c}",
            g.width(),
            g.height(),
            g.channels()
        )),
        _ => Ok(()),
    }
}

/// Pixel-level adjoint values of one group.
struct PixelAdjoint {
    color: [f64; 3],
    id: [f64; ID_DIM],
    soft: f64,
    alpha: f64,
    hard: f64,
}

fn pixel_adjoint(adj: &Adjoints<'_>, p: usize) -> PixelAdjoint {
    let mut out = PixelAdjoint { color: [0.0; 3], id: [0.0; ID_DIM], soft: 0.0, alpha: 0.0, hard: 0.0 };
    if let Some(c) = adj.color {
        out.color.copy_from_slice(c.at(p));
    }
    if let Some(e) = adj.id_feature {
        out.id.copy_from_slice(e.at(p));
    }
    if let Some(d) = adj.soft_depth {
        out.soft = d.data()[p];
    }
    if let Some(a) = adj.accum_alpha {
        out.alpha = a.data()[p];
    }
    if let Some(d) = adj.hard_depth {
        out.hard = d.data()[p];
    }
    out
}

/// Exact gradients of `Σ_pixels Σ_channels adjoint · channel` with respect to
/// every Gaussian parameter.
///
/// Each group's contribution only reaches the parameters in its mask; the
/// other parameters receive exactly zero from that group. The result also
/// records, per Gaussian, visibility, screen radius and the norm of the
/// positional screen gradient (from groups that may move centers), in
/// normalized device units.
pub fn backward(
    output: &RenderOutput,
    cloud: &GaussianCloud,
    camera: &Camera,
    groups: &[AdjointGroup<'_>],
) -> Result<GradientSet> {
    let state = &output.state;
    let (w, h) = (state.width, state.height);
    if cloud.len() != state.cloud_len {
        return Err(contract!("render was made for {} gaussians, got {}", state.cloud_len, cloud.len()));
    }
    if camera.width != w || camera.height != h {
        return Err(contract!("camera is {}x{}, render is {w}x{h}", camera.width, camera.height));
    }
    for g in groups {
        let a = &g.adjoints;
        check_shape("color", a.color, w, h, 3)?;
        check_shape("identity", a.id_feature, w, h, ID_DIM)?;
        check_shape("soft depth", a.soft_depth, w, h, 1)?;
        check_shape("hard depth", a.hard_depth, w, h, 1)?;
        check_shape("alpha", a.accum_alpha, w, h, 1)?;
    }

    let n_groups = groups.len();
    let projected = &state.projected;
    let codes = &cloud.identity_codes;
    let frame = &output.frame;
    let settings = &state.settings;

    let per_tile: Vec<Vec<SplatGrad>> = map_tiles(state.tiles.len(), |t| {
        let list = &state.tiles[t];
        let mut acc = vec![SplatGrad::ZERO; list.len() * n_groups];
        if list.is_empty() {
            return acc;
        }
        let [x0, y0, x1, y1] = tile_bounds(t, state.tiles_x, w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                let pix = y * w + x;
                let (sx, sy) = (x as f64 + 0.5, y as f64 + 0.5);
                for (gi, group) in groups.iter().enumerate() {
                    let adj = pixel_adjoint(&group.adjoints, pix);
                    let any_main = adj.color.iter().chain(adj.id.iter()).any(|v| *v != 0.0)
                        || adj.soft != 0.0
                        || adj.alpha != 0.0;
                    if any_main {
                        let final_t = state.main.final_t[pix];
                        let accum = 1.0 - final_t;
                        let (d_sum, mut d_accum) = (0.0, adj.alpha);
                        let d_sum = if accum > DEPTH_NORMALIZE_MIN_ALPHA {
                            d_accum -= adj.soft * frame.soft_depth.data()[pix] / accum;
                            adj.soft / accum
                        } else {
                            d_sum
                        };
                        let mut t_after = final_t;
                        let mut suffix = 0.0;
                        for pos in (0..state.main.end[pix] as usize).rev() {
                            let p = &projected[list[pos] as usize];
                            let (g, dx, dy) = falloff(p, sx, sy);
                            let raw = p.opacity * g;
                            let a = raw.min(MAX_ALPHA);
                            if a < MIN_ALPHA {
                                continue;
                            }
                            let t_before = t_after / (1.0 - a);
                            let weight = a * t_before;
                            let mut gf = adj.color[0] * p.eval_color[0]
                                + adj.color[1] * p.eval_color[1]
                                + adj.color[2] * p.eval_color[2]
                                + d_sum * p.view_depth
                                + d_accum;
                            if settings.identity {
                                let e = &codes[p.source_index];
                                gf += (0..ID_DIM).map(|d| adj.id[d] * e[d]).sum::<f64>();
                            }
                            let d_a = t_before * gf - suffix / (1.0 - a);
                            suffix += weight * gf;
                            t_after = t_before;

                            let sg = &mut acc[pos * n_groups + gi];
                            for ch in 0..3 {
                                sg.color[ch] += weight * adj.color[ch];
                            }
                            if settings.identity {
                                for d in 0..ID_DIM {
                                    sg.id[d] += weight * adj.id[d];
                                }
                            }
                            sg.depth += weight * d_sum;
                            if raw <= MAX_ALPHA {
                                sg.opacity += d_a * g;
                                sg.add_falloff(p, g, dx, dy, d_a * p.opacity);
                            }
                        }
                    }

                    if adj.hard != 0.0 && settings.hard_depth {
                        let final_t = state.hard.final_t[pix];
                        let accum = 1.0 - final_t;
                        if accum > DEPTH_NORMALIZE_MIN_ALPHA {
                            let d_sum = adj.hard / accum;
                            let d_accum = -adj.hard * frame.hard_depth.data()[pix] / accum;
                            let omega = settings.hard_omega;
                            let mut t_after = final_t;
                            let mut suffix = 0.0;
                            for pos in (0..state.hard.end[pix] as usize).rev() {
                                let p = &projected[list[pos] as usize];
                                let (g, dx, dy) = falloff(p, sx, sy);
                                let raw = omega * g;
                                let a = raw.min(MAX_ALPHA);
                                if a < MIN_ALPHA {
                                    continue;
                                }
                                let t_before = t_after / (1.0 - a);
                                let weight = a * t_before;
                                let gf = d_sum * p.view_depth + d_accum;
                                let d_a = t_before * gf - suffix / (1.0 - a);
                                suffix += weight * gf;
                                t_after = t_before;
                                let sg = &mut acc[pos * n_groups + gi];
                                sg.depth += weight * d_sum;
                                if raw <= MAX_ALPHA {
                                    sg.add_falloff(p, g, dx, dy, d_a * omega);
                                }
                            }
                        }
                    }
                }
            }
        }
        acc
    });

    // Fixed tile order keeps the reduction independent of thread count.
    let mut splat_grads = vec![SplatGrad::ZERO; projected.len() * n_groups];
    for (t, acc) in per_tile.iter().enumerate() {
        for (pos, &k) in state.tiles[t].iter().enumerate() {
            for gi in 0..n_groups {
                splat_grads[k as usize * n_groups + gi].add(&acc[pos * n_groups + gi]);
            }
        }
    }

    let mut out = GradientSet::zeros(cloud);
    let cam_pos = camera.position();
    for (k, p) in projected.iter().enumerate() {
        let i = p.source_index;
        out.visible[i] = true;
        out.radius_px[i] = p.radius;
        let mut screen = [0.0; 2];
        for (gi, group) in groups.iter().enumerate() {
            let sg = &splat_grads[k * n_groups + gi];
            if group.mask.contains(ParamMask::CENTERS) {
                screen[0] += sg.mean2d[0];
                screen[1] += sg.mean2d[1];
            }
            splat_to_params(cloud, camera, &cam_pos, p, sg, group.mask, &mut out);
        }
        let sx = screen[0] * 0.5 * w as f64;
        let sy = screen[1] * 0.5 * h as f64;
        out.screen_grad[i] = math::sqrt(sx * sx + sy * sy);
    }
    Ok(out)
}

/// Pulls one splat's screen-space gradient back onto its Gaussian's parameters.
fn splat_to_params(
    cloud: &GaussianCloud,
    camera: &Camera,
    cam_pos: &[f64; 3],
    p: &ProjectedGaussian,
    sg: &SplatGrad,
    mask: ParamMask,
    out: &mut GradientSet,
) {
    let i = p.source_index;
    let fx = camera.fx;
    let fy = camera.fy;
    let pc = camera.world_to_camera(&cloud.centers[i]);
    let (x, y, z) = (pc[0], pc[1], pc[2]);

    // Conic → screen covariance: dΣ = -Q G Q with G the symmetric matrix gradient.
    let q = p.conic;
    let gq = [[sg.conic[0], 0.5 * sg.conic[1]], [0.5 * sg.conic[1], sg.conic[2]]];
    let qm = [[q[0], q[1]], [q[1], q[2]]];
    let mut g_cov2 = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let mut s = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    s += qm[r][a] * gq[a][b] * qm[b][c];
                }
            }
            g_cov2[r][c] = -s;
        }
    }

    let j = perspective_jacobian(camera, &pc);
    let m = jw(camera, &j);
    let cov3 = covariance3d(cloud, i);

    if mask.contains(ParamMask::CENTERS) {
        let mut d_pc = [0.0; 3];
        d_pc[0] += sg.mean2d[0] * fx / z;
        d_pc[1] += sg.mean2d[1] * fy / z;
        d_pc[2] += -sg.mean2d[0] * fx * x / (z * z) - sg.mean2d[1] * fy * y / (z * z);
        d_pc[2] += sg.depth;

        // dM = 2 G M Σ₃, dJ = dM Wᵀ.
        let mut m_cov = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m_cov[r][c] = (0..3).map(|k| m[r][k] * cov3[k][c]).sum();
            }
        }
        let mut d_m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                d_m[r][c] = 2.0 * (0..2).map(|a| g_cov2[r][a] * m_cov[a][c]).sum::<f64>();
            }
        }
        let wr = &camera.rotation;
        let mut d_j = [[0.0; 3]; 2];
        for r in 0..2 {
            for k in 0..3 {
                d_j[r][k] = (0..3).map(|c| d_m[r][c] * wr[k][c]).sum();
            }
        }
        let z2 = z * z;
        let z3 = z2 * z;
        d_pc[0] += d_j[0][2] * (-fx / z2);
        d_pc[1] += d_j[1][2] * (-fy / z2);
        d_pc[2] += d_j[0][0] * (-fx / z2)
            + d_j[0][2] * (2.0 * fx * x / z3)
            + d_j[1][1] * (-fy / z2)
            + d_j[1][2] * (2.0 * fy * y / z3);

        let mut d_mu = math::mat_t_vec(&camera.rotation, &d_pc);
        if cloud.sh_degree() > 0 && sg.color.iter().any(|v| *v != 0.0) {
            let raw_dir = math::sub(&cloud.centers[i], cam_pos);
            let dir = math::scale(&raw_dir, 1.0 / math::norm(&raw_dir));
            let mut scratch = vec![[0.0; 3]; cloud.sh_coeff_count()];
            let d_dir = sh::eval_backward(cloud.color_block(i), &dir, &sg.color, &mut scratch);
            d_mu = math::add(&d_mu, &math::normalize_backward(&raw_dir, &d_dir));
        }
        for a in 0..3 {
            out.centers[i][a] += d_mu[a];
        }
    }

    if mask.contains(ParamMask::LOG_SCALES) || mask.contains(ParamMask::ROTATIONS) {
        // dΣ₃ = Mᵀ G M
        let mut d_cov3: Mat3 = [[0.0; 3]; 3];
        for (a, row) in d_cov3.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for r in 0..2 {
                    for c in 0..2 {
                        s += m[r][a] * g_cov2[r][c] * m[c][b];
                    }
                }
                *v = s;
            }
        }
        let q_unit = math::quat_normalize(&cloud.rotations[i]);
        let rot = math::quat_to_mat(&q_unit);
        let s = cloud.scales(i);
        // Σ₃ = L Lᵀ with L = R S, so dL = 2 dΣ₃ L.
        let mut d_l = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                d_l[a][b] = 2.0 * (0..3).map(|k| d_cov3[a][k] * rot[k][b] * s[b]).sum::<f64>();
            }
        }
        if mask.contains(ParamMask::LOG_SCALES) {
            for b in 0..3 {
                let d_s: f64 = (0..3).map(|a| rot[a][b] * d_l[a][b]).sum();
                out.log_scales[i][b] += d_s * s[b];
            }
        }
        if mask.contains(ParamMask::ROTATIONS) {
            let mut d_rot = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    d_rot[a][b] = d_l[a][b] * s[b];
                }
            }
            let d_unit = math::quat_to_mat_backward(&q_unit, &d_rot);
            let d_q = math::quat_normalize_backward(&cloud.rotations[i], &d_unit);
            for a in 0..4 {
                out.rotations[i][a] += d_q[a];
            }
        }
    }

    if mask.contains(ParamMask::OPACITIES) {
        let o = p.opacity;
        out.opacity_logits[i] += sg.opacity * o * (1.0 - o);
    }

    if mask.contains(ParamMask::COLORS) && sg.color.iter().any(|v| *v != 0.0) {
        let raw_dir = math::sub(&cloud.centers[i], cam_pos);
        let dir = math::scale(&raw_dir, 1.0 / math::norm(&raw_dir));
        let k = cloud.sh_coeff_count();
        sh::eval_backward(cloud.color_block(i), &dir, &sg.color, &mut out.colors[i * k..(i + 1) * k]);
    }

    if mask.contains(ParamMask::IDENTITY) {
        for d in 0..ID_DIM {
            out.identity_codes[i][d] += sg.id[d];
        }
    }
}
