//! Turning rendered channels into viewable images.

use nalgebra::{DMatrix, SymmetricEigen};

use semsplat_core::{ClassHead, Grid, Image, ID_DIM};

/// Distinct display color for an instance id; 0 (background) is black.
pub fn palette(id: usize) -> [f64; 3] {
    if id == 0 {
        return [0.0; 3];
    }
    // Golden-angle hue steps with two alternating brightness levels.
    let hue = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let value = if id % 2 == 0 { 0.75 } else { 1.0 };
    let (sector, f) = (hue.floor() as u32, hue.fract());
    let (p, q, t) = (value * 0.25, value * (1.0 - 0.75 * f), value * (1.0 - 0.75 * (1.0 - f)));
    match sector {
        0 => [value, t, p],
        1 => [q, value, p],
        2 => [p, value, t],
        3 => [p, q, value],
        4 => [t, p, value],
        _ => [value, p, q],
    }
}

/// Colors every pixel by the head's most probable instance. Pixels whose
/// accumulated alpha is below `min_alpha` are shown as background.
pub fn instance_map(id_feature: &Grid<f64>, accum: &Image, head: &ClassHead, min_alpha: f64) -> Image {
    let mut out = Image::new(id_feature.width(), id_feature.height(), 3, 0.0);
    let mut logits = vec![0.0; head.class_count()];
    for p in 0..id_feature.pixel_count() {
        if accum.data()[p] < min_alpha {
            continue;
        }
        head.logits_into(id_feature.at(p), &mut logits);
        let best = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0;
        out.at_mut(p).copy_from_slice(&palette(best));
    }
    out
}

/// Projects the identity feature onto its three principal directions and
/// rescales each to [0, 1]. Each axis is oriented so that its largest
/// absolute coefficient is positive, which keeps the colors stable.
pub fn feature_pca(id_feature: &Grid<f64>) -> Image {
    let n = id_feature.pixel_count();
    let mut out = Image::new(id_feature.width(), id_feature.height(), 3, 0.0);
    if n == 0 {
        return out;
    }
    let mut mean = [0.0; ID_DIM];
    for p in 0..n {
        for (m, v) in mean.iter_mut().zip(id_feature.at(p)) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(ID_DIM, ID_DIM);
    for p in 0..n {
        let x: Vec<f64> = id_feature.at(p).iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..ID_DIM {
            for j in 0..ID_DIM {
                cov[(i, j)] += x[i] * x[j];
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..ID_DIM).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    for (c, &k) in order.iter().take(3).enumerate() {
        let mut axis: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let pivot = axis.iter().copied().fold(0.0, |best: f64, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        let proj: Vec<f64> = (0..n)
            .map(|p| id_feature.at(p).iter().zip(&mean).zip(&axis).map(|((v, m), a)| (v - m) * a).sum())
            .collect();
        let (lo, hi) = min_max(proj.iter().copied());
        for (p, v) in proj.into_iter().enumerate() {
            out.at_mut(p)[c] = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    out
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Min-max normalizes depth over pixels with coverage of at least
/// `min_alpha` (all pixels if none qualify). Returns the image and the range.
pub fn normalize_depth(depth: &Image, accum: &Image, min_alpha: f64) -> (Image, f64, f64) {
    let covered = depth.data().iter().zip(accum.data()).filter(|(_, a)| **a >= min_alpha).map(|(d, _)| *d);
    let (mut lo, mut hi) = min_max(covered);
    if lo > hi {
        (lo, hi) = min_max(depth.data().iter().copied());
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    (depth.map(|d| ((d - lo) / span).clamp(0.0, 1.0)), lo, hi)
}
