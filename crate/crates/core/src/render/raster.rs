use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::project::{depth_order, ProjectedGaussian};
use super::{
    map_tiles, BackwardState, Frame, PassRecord, RenderOutput, RenderSettings, DEPTH_NORMALIZE_MIN_ALPHA, MAX_ALPHA,
    MIN_ALPHA, MIN_TRANSMITTANCE, TILE_SIZE,
};
use crate::error::{contract, Result};
use crate::math;
use crate::scene::{Camera, GaussianCloud, IdCode, ID_DIM};

/// Beyond this Mahalanobis distance the falloff is below 1/255 for any
/// opacity, so the splat would be skipped anyway; the margin keeps the
/// decision clear of exp rounding.
const FALLOFF_CUTOFF_Q: f64 = 2.0 * 5.541_263_545_158_426 + 1e-6;

/// Gaussian falloff `exp(-½ dᵀ Σ⁻¹ d)` at pixel center `(x, y)` plus the
/// offset `d`. Returns 0 past [`FALLOFF_CUTOFF_Q`].
#[inline]
pub(crate) fn falloff(p: &ProjectedGaussian, x: f64, y: f64) -> (f64, f64, f64) {
    let dx = x - p.mean2d[0];
    let dy = y - p.mean2d[1];
    let [a, b, c] = p.conic;
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if q > FALLOFF_CUTOFF_Q {
        return (0.0, dx, dy);
    }
    (math::exp(-0.5 * q), dx, dy)
}

pub(crate) struct Shade {
    pub color: [f64; 3],
    pub id: IdCode,
    pub main_t: f64,
    pub main_end: u32,
    pub depth_sum: f64,
    pub hard_t: f64,
    pub hard_end: u32,
    pub hard_sum: f64,
}

pub(crate) fn shade(
    x: f64,
    y: f64,
    list: &[u32],
    projected: &[ProjectedGaussian],
    codes: &[IdCode],
    settings: &RenderSettings,
) -> Shade {
    let mut out = Shade {
        color: [0.0; 3],
        id: [0.0; ID_DIM],
        main_t: 1.0,
        main_end: list.len() as u32,
        depth_sum: 0.0,
        hard_t: 1.0,
        hard_end: list.len() as u32,
        hard_sum: 0.0,
    };
    let mut main_done = false;
    let mut hard_done = !settings.hard_depth;
    if hard_done {
        out.hard_end = 0;
    }
    for (pos, &k) in list.iter().enumerate() {
        let p = &projected[k as usize];
        let (g, _, _) = falloff(p, x, y);
        if !main_done {
            let a = (p.opacity * g).min(MAX_ALPHA);
            if a >= MIN_ALPHA {
                let next_t = out.main_t * (1.0 - a);
                if next_t < MIN_TRANSMITTANCE {
                    main_done = true;
                    out.main_end = pos as u32;
                } else {
                    let w = a * out.main_t;
                    for ch in 0..3 {
                        out.color[ch] += w * p.eval_color[ch];
                    }
                    if settings.identity {
                        let e = &codes[p.source_index];
                        for d in 0..ID_DIM {
                            out.id[d] += w * e[d];
                        }
                    }
                    out.depth_sum += w * p.view_depth;
                    out.main_t = next_t;
                }
            }
        }
        if !hard_done {
            let a = (settings.hard_omega * g).min(MAX_ALPHA);
            if a >= MIN_ALPHA {
                let next_t = out.hard_t * (1.0 - a);
                if next_t < MIN_TRANSMITTANCE {
                    hard_done = true;
                    out.hard_end = pos as u32;
                } else {
                    out.hard_sum += a * out.hard_t * p.view_depth;
                    out.hard_t = next_t;
                }
            }
        }
        if main_done && hard_done {
            break;
        }
    }
    out
}

/// Normalized expected depth, or the background constant when coverage is negligible.
#[inline]
pub(crate) fn normalized_depth(depth_sum: f64, accum: f64, background: f64) -> f64 {
    if accum > DEPTH_NORMALIZE_MIN_ALPHA {
        depth_sum / accum
    } else {
        background
    }
}

pub(crate) fn tile_grid(width: usize, height: usize) -> (usize, usize) {
    (width.div_ceil(TILE_SIZE), height.div_ceil(TILE_SIZE))
}

/// Per-tile lists of projected indices, each in global depth order.
pub(crate) fn bin_tiles(projected: &[ProjectedGaussian], width: usize, height: usize) -> Vec<Vec<u32>> {
    let (tx, ty) = tile_grid(width, height);
    let mut tiles = vec![Vec::new(); tx * ty];
    for (k, p) in projected.iter().enumerate() {
        let [x0, y0, x1, y1] = p.rect;
        for ty_i in y0 / TILE_SIZE..=(y1 - 1) / TILE_SIZE {
            for tx_i in x0 / TILE_SIZE..=(x1 - 1) / TILE_SIZE {
                tiles[ty_i * tx + tx_i].push(k as u32);
            }
        }
    }
    tiles
}

/// Pixel bounds `[x0, y0, x1, y1)` of tile `t`.
pub(crate) fn tile_bounds(t: usize, tiles_x: usize, width: usize, height: usize) -> [usize; 4] {
    let (tx, ty) = (t % tiles_x, t / tiles_x);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    [x0, y0, (x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height)]
}

/// Front-to-back blends the depth-sorted splats of one view.
///
/// Per pixel the influence is `α' = min(0.99, opacity · falloff)`, skipped
/// below 1/255; weights are `α'ᵢ Tᵢ` with `Tᵢ = Π_{j<i} (1 − α'ⱼ)`, and
/// blending stops before transmittance drops under 1e-4. Soft depth is the
/// weighted depth divided by accumulated alpha. Hard depth repeats the blend
/// with every opacity replaced by `settings.hard_omega` and is normalized by
/// its own accumulated alpha. Background color is black.
pub fn composite(
    projected: Vec<ProjectedGaussian>,
    camera: &Camera,
    cloud: &GaussianCloud,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    if let Some(w) = projected.windows(2).position(|w| depth_order(&w[0], &w[1]) != Ordering::Less) {
        return Err(contract!("projected splats are not depth-sorted at position {w}"));
    }
    if let Some(p) = projected.iter().find(|p| p.source_index >= cloud.len()) {
        return Err(contract!("splat refers to gaussian {} of a {}-gaussian cloud", p.source_index, cloud.len()));
    }
    let (width, height) = (camera.width, camera.height);
    let tiles = bin_tiles(&projected, width, height);
    let (tiles_x, _) = tile_grid(width, height);
    let shaded: Vec<Vec<Shade>> = map_tiles(tiles.len(), |t| {
        let [x0, y0, x1, y1] = tile_bounds(t, tiles_x, width, height);
        let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            for x in x0..x1 {
                out.push(shade(
                    x as f64 + 0.5,
                    y as f64 + 0.5,
                    &tiles[t],
                    &projected,
                    &cloud.identity_codes,
                    settings,
                ));
            }
        }
        out
    });

    let n_pix = width * height;
    let bg = settings.background_depth;
    let mut frame = Frame::blank(width, height, bg);
    let mut main = PassRecord { end: vec![0; n_pix], final_t: vec![1.0; n_pix], depth_sum: vec![0.0; n_pix] };
    let mut hard = main.clone();
    for (t, pixels) in shaded.iter().enumerate() {
        let [x0, y0, x1, _] = tile_bounds(t, tiles_x, width, height);
        let tw = x1 - x0;
        for (k, s) in pixels.iter().enumerate() {
            let (x, y) = (x0 + k % tw, y0 + k / tw);
            let p = y * width + x;
            frame.color.at_mut(p).copy_from_slice(&s.color);
            frame.id_feature.at_mut(p).copy_from_slice(&s.id);
            let accum = 1.0 - s.main_t;
            frame.accum_alpha.data_mut()[p] = accum;
            frame.soft_depth.data_mut()[p] = normalized_depth(s.depth_sum, accum, bg);
            frame.hard_depth.data_mut()[p] = normalized_depth(s.hard_sum, 1.0 - s.hard_t, bg);
            main.end[p] = s.main_end;
            main.final_t[p] = s.main_t;
            main.depth_sum[p] = s.depth_sum;
            hard.end[p] = s.hard_end;
            hard.final_t[p] = s.hard_t;
            hard.depth_sum[p] = s.hard_sum;
        }
    }
    Ok(RenderOutput {
        frame,
        state: BackwardState {
            projected,
            tiles,
            tiles_x,
            main,
            hard,
            settings: *settings,
            cloud_len: cloud.len(),
            width,
            height,
        },
    })
}
