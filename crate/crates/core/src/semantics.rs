//! Identity classification and the grouping loss.
//!
//! Rendered identity features are mapped to `C + 1` class probabilities by a
//! linear layer and softmax. The 2D term is a masked cross-entropy against the
//! instance mask; the 3D term pulls each sampled Gaussian's class distribution
//! towards those of its nearest neighbours.

use alloc::vec;
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::grid::{Grid, IdMask, Mask};
use crate::knn::KdTree;
use crate::math;
use crate::scene::{ClassHead, GaussianCloud, IdCode, ID_DIM};

/// Lower bound applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupingConfig {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    /// Neighbours per sample in the 3D term.
    pub knn_k: usize,
    /// Gaussians sampled per evaluation of the 3D term.
    pub sample_m: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self { lambda_2d: 1.0, lambda_3d: 1.0, knn_k: 5, sample_m: 1000 }
    }
}

impl GroupingConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lambda_2d >= 0.0 && self.lambda_3d >= 0.0) {
            return Err(Error::Config("grouping weights must be non-negative".into()));
        }
        if self.knn_k == 0 || self.sample_m == 0 {
            return Err(Error::Config("knn_k and sample_m must be at least 1".into()));
        }
        Ok(())
    }
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = math::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Class probabilities of a single identity vector.
pub fn class_probabilities(code: &[f64], head: &ClassHead) -> Vec<f64> {
    let mut p = vec![0.0; head.class_count()];
    head.logits_into(code, &mut p);
    softmax_in_place(&mut p);
    p
}

/// Per-pixel class probabilities of an identity feature field.
pub fn classify(features: &Grid<f64>, head: &ClassHead) -> Result<Grid<f64>> {
    head.check()?;
    if features.channels() != ID_DIM {
        return Err(contract!("identity features have {} channels, expected {ID_DIM}", features.channels()));
    }
    let k = head.class_count();
    let mut out = Grid::new(features.width(), features.height(), k, 0.0);
    for p in 0..features.pixel_count() {
        let dst = out.at_mut(p);
        head.logits_into(features.at(p), dst);
        softmax_in_place(dst);
    }
    Ok(out)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, v[0]);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Per-pixel predicted class of a feature field.
pub fn predict_ids(features: &Grid<f64>, head: &ClassHead) -> Result<IdMask> {
    let probs = classify(features, head)?;
    let data = (0..probs.pixel_count()).map(|p| argmax(probs.at(p)).0.min(255) as u8).collect();
    Ok(Grid::from_vec(probs.width(), probs.height(), 1, data).expect("shape"))
}

/// Argmax class and its probability for every Gaussian's identity code.
pub fn gaussian_class(cloud: &GaussianCloud, head: &ClassHead) -> Vec<(usize, f64)> {
    let mut p = vec![0.0; head.class_count()];
    cloud
        .identity_codes
        .iter()
        .map(|e| {
            head.logits_into(e, &mut p);
            softmax_in_place(&mut p);
            argmax(&p)
        })
        .collect()
}

/// Pulls a probability-space gradient back through softmax and the linear
/// layer, adding the result to `d_code` (and to `d_head` when given).
fn softmax_linear_backward(
    code: &[f64],
    probs: &[f64],
    d_probs: &[f64],
    head: &ClassHead,
    d_code: &mut [f64],
    d_head: Option<&mut ClassHead>,
    scratch: &mut Vec<f64>,
) {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, g)| p * g).sum();
    scratch.clear();
    scratch.extend(probs.iter().zip(d_probs).map(|(p, g)| p * (g - dot)));
    logit_backward(code, scratch, head, d_code, d_head);
}

fn logit_backward(code: &[f64], d_logits: &[f64], head: &ClassHead, d_code: &mut [f64], d_head: Option<&mut ClassHead>) {
    let k = head.class_count();
    for (d, dc) in d_code.iter_mut().enumerate().take(ID_DIM) {
        let row = &head.weight[d * k..(d + 1) * k];
        *dc += row.iter().zip(d_logits).map(|(w, g)| w * g).sum::<f64>();
    }
    if let Some(dh) = d_head {
        for (d, &e) in code.iter().enumerate().take(ID_DIM) {
            let row = &mut dh.weight[d * k..(d + 1) * k];
            for (w, g) in row.iter_mut().zip(d_logits) {
                *w += e * g;
            }
        }
        for (b, g) in dh.bias.iter_mut().zip(d_logits) {
            *b += g;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loss2d {
    pub value: f64,
    /// Gradient with respect to the identity feature field.
    pub d_feature: Grid<f64>,
    /// Gradient with respect to the head, in the head's own layout.
    pub d_head: ClassHead,
}

/// Mean cross-entropy between classified features and the instance mask over
/// the pixels where `mask` is set.
pub fn loss_2d(id_feature: &Grid<f64>, id_mask: &IdMask, mask: &Mask, head: &ClassHead) -> Result<Loss2d> {
    head.check()?;
    if id_feature.channels() != ID_DIM || !id_feature.same_extent(id_mask) || !id_feature.same_extent(mask) {
        return Err(contract!("identity loss inputs disagree in shape"));
    }
    let k = head.class_count();
    let mut d_feature = Grid::new(id_feature.width(), id_feature.height(), ID_DIM, 0.0);
    let mut d_head = ClassHead::zeros(head.instance_count());
    let n = mask.data().iter().filter(|m| **m).count();
    if n == 0 {
        return Ok(Loss2d { value: 0.0, d_feature, d_head });
    }
    let inv_n = 1.0 / n as f64;
    let mut probs = vec![0.0; k];
    let floor = -math::ln(PROB_FLOOR);
    let (mut mean, mut seen) = (0.0, 0.0);
    for p in 0..id_feature.pixel_count() {
        if !mask.data()[p] {
            continue;
        }
        let label = id_mask.data()[p] as usize;
        if label >= k {
            return Err(contract!("label {label} exceeds the head's {k} classes"));
        }
        let e = id_feature.at(p);
        head.logits_into(e, &mut probs);
        // -ln softmax_y taken as logsumexp(z) - z_y, then softmax in place.
        let z_y = probs[label];
        let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = probs.iter().map(|z| math::exp(z - max)).sum();
        let nll = (max + math::ln(total) - z_y).min(floor);
        softmax_in_place(&mut probs);
        let py = probs[label];
        // Running mean: exact when every pixel carries the same loss.
        seen += 1.0;
        mean += (nll - mean) / seen;
        if py > PROB_FLOOR {
            // d(-ln p_y)/d logit = p - onehot(y)
            for (c, v) in probs.iter_mut().enumerate() {
                *v = (*v - if c == label { 1.0 } else { 0.0 }) * inv_n;
            }
            logit_backward(e, &probs, head, d_feature.at_mut(p), Some(&mut d_head));
        }
    }
    Ok(Loss2d { value: mean, d_feature, d_head })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loss3d {
    pub value: f64,
    pub d_codes: Vec<IdCode>,
}

/// Floored KL divergence `Σ p (ln p − ln q)` of two class distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a * (math::ln(a.max(PROB_FLOOR)) - math::ln(b.max(PROB_FLOOR)))).sum()
}

/// The `m` sample indices drawn for one evaluation of the 3D term.
pub fn sample_indices(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| rng.random_range(0..n)).collect()
}

/// Neighbourhood consistency of identity codes.
///
/// Draws `sample_m` Gaussians uniformly with replacement, finds each one's
/// `knn_k` nearest centers (itself excluded, ties by index) and averages
/// `KL(F(e_j) ‖ F(e_i))` over all pairs. The head is held constant.
pub fn loss_3d(cloud: &GaussianCloud, head: &ClassHead, config: &GroupingConfig, seed: u64) -> Result<Loss3d> {
    head.check()?;
    config.check()?;
    let n = cloud.len();
    let k_nn = config.knn_k;
    if n <= k_nn {
        return Err(Error::Config(format!("3D grouping needs more than {k_nn} Gaussians, cloud has {n}")));
    }
    let c = head.class_count();
    let probs: Vec<Vec<f64>> = cloud.identity_codes.iter().map(|e| class_probabilities(e, head)).collect();
    let mut d_probs = vec![vec![0.0; c]; n];
    let tree = KdTree::build(&cloud.centers);
    let pairs = (config.sample_m * k_nn) as f64;
    let mut total = 0.0;
    for j in sample_indices(n, config.sample_m, seed) {
        let p = &probs[j];
        for nb in tree.nearest_to_point(j, k_nn) {
            let i = nb.index;
            let q = &probs[i];
            total += kl_divergence(p, q);
            for cls in 0..c {
                let lp = math::ln(p[cls].max(PROB_FLOOR));
                let lq = math::ln(q[cls].max(PROB_FLOOR));
                let own = if p[cls] > PROB_FLOOR { 1.0 } else { 0.0 };
                d_probs[j][cls] += (lp - lq + own) / pairs;
                if q[cls] > PROB_FLOOR {
                    d_probs[i][cls] -= p[cls] / q[cls] / pairs;
                }
            }
        }
    }
    let mut d_codes = vec![[0.0; ID_DIM]; n];
    let mut scratch = Vec::with_capacity(c);
    for i in 0..n {
        if d_probs[i].iter().any(|g| *g != 0.0) {
            softmax_linear_backward(
                &cloud.identity_codes[i],
                &probs[i],
                &d_probs[i],
                head,
                &mut d_codes[i],
                None,
                &mut scratch,
            );
        }
    }
    Ok(Loss3d { value: total / pairs, d_codes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingLoss {
    pub value: f64,
    pub l_2d: f64,
    pub l_3d: f64,
    pub d_feature: Grid<f64>,
    pub d_head: ClassHead,
    pub d_codes: Vec<IdCode>,
}

/// `λ_2d · L_2d + λ_3d · L_3d` with combined gradients. A term whose weight
/// is zero is not evaluated and reported as 0.
pub fn grouping_loss(
    id_feature: &Grid<f64>,
    id_mask: &IdMask,
    mask: &Mask,
    cloud: &GaussianCloud,
    head: &ClassHead,
    config: &GroupingConfig,
    seed: u64,
) -> Result<GroupingLoss> {
    config.check()?;
    let mut out = GroupingLoss {
        value: 0.0,
        l_2d: 0.0,
        l_3d: 0.0,
        d_feature: Grid::new(id_feature.width(), id_feature.height(), ID_DIM, 0.0),
        d_head: ClassHead::zeros(head.instance_count()),
        d_codes: vec![[0.0; ID_DIM]; cloud.len()],
    };
    if config.lambda_2d > 0.0 {
        let l = loss_2d(id_feature, id_mask, mask, head)?;
        out.l_2d = l.value;
        out.value += config.lambda_2d * l.value;
        out.d_feature = l.d_feature.map(|g| g * config.lambda_2d);
        for (a, b) in out.d_head.weight.iter_mut().zip(&l.d_head.weight) {
            *a = config.lambda_2d * b;
        }
        for (a, b) in out.d_head.bias.iter_mut().zip(&l.d_head.bias) {
            *a = config.lambda_2d * b;
        }
    }
    if config.lambda_3d > 0.0 {
        let l = loss_3d(cloud, head, config, seed)?;
        out.l_3d = l.value;
        out.value += config.lambda_3d * l.value;
        for (a, b) in out.d_codes.iter_mut().zip(&l.d_codes) {
            for d in 0..ID_DIM {
                a[d] = config.lambda_3d * b[d];
            }
        }
    }
    Ok(out)
}
