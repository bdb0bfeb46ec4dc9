//! Scene, camera, view and classifier types shared by every stage of the
//! pipeline, together with their invariant checks and the random scene
//! initializer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{IdMask, Image, Mask};
use crate::knn::KdTree;
use crate::math::{self, Mat3, Quat, Vec3};
use crate::sh;

/// Length of the per-Gaussian identity code.
pub const ID_DIM: usize = 16;
pub type IdCode = [f64; ID_DIM];

/// Opacity given to freshly initialized Gaussians.
pub const INIT_OPACITY: f64 = 0.1;
/// Standard deviation of freshly initialized identity codes.
pub const INIT_CODE_STD: f64 = 0.01;

/// The optimizable scene: one entry per Gaussian in each array.
///
/// Scales are stored as logs and opacities as logits so that unconstrained
/// updates keep them in range. `colors` holds `sh_coeff_count()` RGB
/// coefficient triples per Gaussian, contiguous per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub centers: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub identity_codes: Vec<IdCode>,
    sh_degree: u8,
}

/// One Gaussian's parameters, detached from a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub center: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub opacity_logit: f64,
    pub color: Vec<[f64; 3]>,
    pub identity: IdCode,
}

impl GaussianCloud {
    pub fn empty(sh_degree: u8) -> Result<Self> {
        if sh_degree > sh::MAX_DEGREE {
            return Err(Error::Parameter(format!("spherical harmonic degree {sh_degree} exceeds {}", sh::MAX_DEGREE)));
        }
        Ok(Self {
            centers: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            colors: Vec::new(),
            identity_codes: Vec::new(),
            sh_degree,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn sh_degree(&self) -> u8 {
        self.sh_degree
    }

    pub fn sh_coeff_count(&self) -> usize {
        sh::coeff_count(self.sh_degree)
    }

    pub fn color_block(&self, i: usize) -> &[[f64; 3]] {
        let k = self.sh_coeff_count();
        &self.colors[i * k..(i + 1) * k]
    }

    pub fn color_block_mut(&mut self, i: usize) -> &mut [[f64; 3]] {
        let k = self.sh_coeff_count();
        &mut self.colors[i * k..(i + 1) * k]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        math::sigmoid(self.opacity_logits[i])
    }

    pub fn scales(&self, i: usize) -> Vec3 {
        let s = self.log_scales[i];
        [math::exp(s[0]), math::exp(s[1]), math::exp(s[2])]
    }

    pub fn max_scale(&self, i: usize) -> f64 {
        let s = self.scales(i);
        s[0].max(s[1]).max(s[2])
    }

    pub fn gaussian(&self, i: usize) -> Gaussian {
        Gaussian {
            center: self.centers[i],
            log_scale: self.log_scales[i],
            rotation: self.rotations[i],
            opacity_logit: self.opacity_logits[i],
            color: self.color_block(i).to_vec(),
            identity: self.identity_codes[i],
        }
    }

    pub fn push(&mut self, g: Gaussian) -> Result<()> {
        if g.color.len() != self.sh_coeff_count() {
            return Err(Error::Parameter(format!(
                "color block has {} coefficients, cloud expects {}",
                g.color.len(),
                self.sh_coeff_count()
            )));
        }
        self.centers.push(g.center);
        self.log_scales.push(g.log_scale);
        self.rotations.push(g.rotation);
        self.opacity_logits.push(g.opacity_logit);
        self.colors.extend_from_slice(&g.color);
        self.identity_codes.push(g.identity);
        Ok(())
    }

    /// A new cloud holding the Gaussians at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let k = self.sh_coeff_count();
        let mut colors = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            colors.extend_from_slice(self.color_block(i));
        }
        Self {
            centers: indices.iter().map(|&i| self.centers[i]).collect(),
            log_scales: indices.iter().map(|&i| self.log_scales[i]).collect(),
            rotations: indices.iter().map(|&i| self.rotations[i]).collect(),
            opacity_logits: indices.iter().map(|&i| self.opacity_logits[i]).collect(),
            colors,
            identity_codes: indices.iter().map(|&i| self.identity_codes[i]).collect(),
            sh_degree: self.sh_degree,
        }
    }

    /// The same Gaussians with color blocks resized to `degree`: existing
    /// coefficients are kept, new ones are zero.
    pub fn with_sh_degree(&self, degree: u8) -> Result<Self> {
        let mut out = Self::empty(degree)?;
        let (old_k, new_k) = (self.sh_coeff_count(), out.sh_coeff_count());
        out.centers = self.centers.clone();
        out.log_scales = self.log_scales.clone();
        out.rotations = self.rotations.clone();
        out.opacity_logits = self.opacity_logits.clone();
        out.identity_codes = self.identity_codes.clone();
        out.colors = vec![[0.0; 3]; self.len() * new_k];
        for i in 0..self.len() {
            let n = old_k.min(new_k);
            out.colors[i * new_k..i * new_k + n].copy_from_slice(&self.color_block(i)[..n]);
        }
        Ok(out)
    }

    /// Axis-aligned bounds of the centers, `None` for an empty cloud.
    pub fn bounds(&self) -> Option<Aabb> {
        let first = self.centers.first()?;
        let mut b = Aabb { min: *first, max: *first };
        for c in &self.centers {
            for a in 0..3 {
                b.min[a] = b.min[a].min(c[a]);
                b.max[a] = b.max[a].max(c[a]);
            }
        }
        Some(b)
    }

    /// Reports every invariant violation; an empty list means the cloud is valid.
    pub fn validate(&self) -> Vec<Violation> {
        validate_scene(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    LengthMismatch { field: &'static str, len: usize },
    NonUnitRotation { norm: f64 },
    NonFinite { field: &'static str },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Gaussian index, `None` for cloud-wide problems.
    pub index: Option<usize>,
    pub kind: ViolationKind,
}

impl core::fmt::Display for Violation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match (&self.index, &self.kind) {
            (_, ViolationKind::LengthMismatch { field, len }) => write!(f, "{field} has length {len}"),
            (Some(i), ViolationKind::NonUnitRotation { norm }) => {
                write!(f, "gaussian {i}: rotation norm {norm}")
            }
            (Some(i), ViolationKind::NonFinite { field }) => write!(f, "gaussian {i}: non-finite {field}"),
            (None, kind) => write!(f, "{kind:?}"),
        }
    }
}

/// Tolerance on quaternion norms.
pub const UNIT_QUAT_TOL: f64 = 1e-6;

pub fn validate_scene(cloud: &GaussianCloud) -> Vec<Violation> {
    let n = cloud.centers.len();
    let mut out = Vec::new();
    let lengths = [
        ("log_scales", cloud.log_scales.len()),
        ("rotations", cloud.rotations.len()),
        ("opacity_logits", cloud.opacity_logits.len()),
        ("colors", cloud.colors.len() / cloud.sh_coeff_count().max(1)),
        ("identity_codes", cloud.identity_codes.len()),
    ];
    let mut consistent = cloud.colors.len() % cloud.sh_coeff_count() == 0;
    for (field, len) in lengths {
        if len != n {
            consistent = false;
            out.push(Violation { index: None, kind: ViolationKind::LengthMismatch { field, len } });
        }
    }
    if !consistent {
        return out;
    }
    for i in 0..n {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let checks: [(&'static str, bool); 5] = [
            ("center", finite(&cloud.centers[i])),
            ("log_scale", finite(&cloud.log_scales[i])),
            ("opacity_logit", cloud.opacity_logits[i].is_finite()),
            ("color", cloud.color_block(i).iter().all(|c| finite(c))),
            ("identity_code", finite(&cloud.identity_codes[i])),
        ];
        for (field, ok) in checks {
            if !ok {
                out.push(Violation { index: Some(i), kind: ViolationKind::NonFinite { field } });
            }
        }
        let norm = math::quat_norm(&cloud.rotations[i]);
        if !((norm - 1.0).abs() <= UNIT_QUAT_TOL) {
            out.push(Violation { index: Some(i), kind: ViolationKind::NonUnitRotation { norm } });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn unit() -> Self {
        Self { min: [0.0; 3], max: [1.0; 3] }
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|a| !(self.max[a] > self.min[a]) || !self.min[a].is_finite() || !self.max[a].is_finite())
    }

    pub fn center(&self) -> Vec3 {
        math::scale(&math::add(&self.min, &self.max), 0.5)
    }

    pub fn diagonal(&self) -> f64 {
        math::norm(&math::sub(&self.max, &self.min))
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Number of neighbours whose mean distance sets the initial scale.
pub const INIT_SCALE_NEIGHBORS: usize = 3;

/// Uniformly scattered Gaussians inside `bounds`.
///
/// Rotations start at identity, opacity at [`INIT_OPACITY`], each scale at
/// the mean distance to the three nearest initial centers and identity codes
/// at small Gaussian noise. Colors are uniform random RGB encoded as the
/// degree-0 coefficient. Pure function of its arguments.
pub fn init_random_cloud(count: usize, bounds: &Aabb, seed: u64) -> Result<GaussianCloud> {
    if count == 0 {
        return Err(Error::Parameter("initial point count must be at least 1".into()));
    }
    if bounds.is_degenerate() {
        return Err(Error::Parameter(format!("degenerate bounding box {bounds:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec3> = (0..count)
        .map(|_| {
            let mut p = [0.0; 3];
            for (a, v) in p.iter_mut().enumerate() {
                *v = bounds.min[a] + rng.random::<f64>() * (bounds.max[a] - bounds.min[a]);
            }
            p
        })
        .collect();
    let colors: Vec<[f64; 3]> = (0..count)
        .map(|_| {
            let rgb = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            sh::rgb_to_dc(&rgb)
        })
        .collect();
    let code_dist = Normal::new(0.0, INIT_CODE_STD).expect("valid std");
    let identity_codes: Vec<IdCode> = (0..count)
        .map(|_| {
            let mut e = [0.0; ID_DIM];
            for v in e.iter_mut() {
                *v = code_dist.sample(&mut rng);
            }
            e
        })
        .collect();

    let log_scales = initial_log_scales(&centers, bounds);
    Ok(GaussianCloud {
        log_scales,
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; count],
        opacity_logits: vec![math::logit(INIT_OPACITY); count],
        colors,
        identity_codes,
        centers,
        sh_degree: 0,
    })
}

/// Log of the mean distance from each center to its nearest neighbours.
///
/// With a single point there are no neighbours; the scale then falls back to
/// one hundredth of the box diagonal.
pub fn initial_log_scales(centers: &[Vec3], bounds: &Aabb) -> Vec<Vec3> {
    let tree = KdTree::build(centers);
    (0..centers.len())
        .map(|i| {
            let nn = tree.nearest_to_point(i, INIT_SCALE_NEIGHBORS);
            let d = if nn.is_empty() {
                0.01 * bounds.diagonal()
            } else {
                nn.iter().map(|n| math::sqrt(n.dist2)).sum::<f64>() / nn.len() as f64
            };
            let s = math::ln(d.max(1e-7));
            [s, s, s]
        })
        .collect()
}

/// Pinhole camera with a world-to-camera rigid transform.
///
/// Camera space looks down +z with +y pointing down the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

pub const ROTATION_TOL: f64 = 1e-6;

impl Camera {
    /// Builds a camera after checking its invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, rotation, translation, width, height };
        cam.check()?;
        Ok(cam)
    }

    pub fn check(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parameter(format!("image size {}x{}", self.width, self.height)));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Parameter(format!("focal lengths must be positive ({}, {})", self.fx, self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::Parameter(format!("principal point ({}, {}) outside image", self.cx, self.cy)));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Parameter("non-finite translation".into()));
        }
        let r = &self.rotation;
        let rrt = math::mat_mul(r, &math::transpose(r));
        for (i, row) in rrt.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if !((v - want).abs() <= ROTATION_TOL) {
                    return Err(Error::Parameter("rotation is not orthonormal".into()));
                }
            }
        }
        if !((math::det(r) - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::Parameter("rotation determinant is not +1".into()));
        }
        Ok(())
    }

    /// A camera at `eye` looking at `target`, world `up` mapping to image up.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = math::sub(&target, &eye);
        let fnorm = math::norm(&forward);
        if !(fnorm > 0.0) {
            return Err(Error::Parameter("eye and target coincide".into()));
        }
        let z = math::scale(&forward, 1.0 / fnorm);
        // Image y points down, so the camera's x axis is forward × up.
        let xr = math::cross(&z, &up);
        let xn = math::norm(&xr);
        if !(xn > 1e-12) {
            return Err(Error::Parameter("up vector parallel to viewing direction".into()));
        }
        let x = math::scale(&xr, 1.0 / xn);
        let y = math::cross(&z, &x);
        let rotation = [x, y, z];
        let translation = math::scale(&math::mat_vec(&rotation, &eye), -1.0);
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, rotation, translation, width, height)
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        math::add(&math::mat_vec(&self.rotation, p), &self.translation)
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        math::scale(&math::mat_t_vec(&self.rotation, &self.translation), -1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Linear classifier from identity features to `C + 1` classes (class 0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHead {
    /// Row-major `ID_DIM × (C + 1)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ClassHead {
    pub fn zeros(instance_count: usize) -> Self {
        let k = instance_count + 1;
        Self { weight: vec![0.0; ID_DIM * k], bias: vec![0.0; k] }
    }

    /// Weights uniform in `±1/sqrt(ID_DIM)`, zero bias.
    pub fn random(instance_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / math::sqrt(ID_DIM as f64);
        let mut head = Self::zeros(instance_count);
        for w in head.weight.iter_mut() {
            *w = (2.0 * rng.random::<f64>() - 1.0) * bound;
        }
        head
    }

    /// Number of output classes, `C + 1`.
    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    pub fn instance_count(&self) -> usize {
        self.bias.len() - 1
    }

    pub fn check(&self) -> Result<()> {
        if self.bias.is_empty() || self.weight.len() != ID_DIM * self.bias.len() {
            return Err(Error::Parameter(format!(
                "class head has {} weights for {} classes",
                self.weight.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn w(&self, d: usize, k: usize) -> f64 {
        self.weight[d * self.bias.len() + k]
    }

    /// `Wᵀ e + b` written into `out`.
    pub fn logits_into(&self, e: &[f64], out: &mut [f64]) {
        let k = self.bias.len();
        out.copy_from_slice(&self.bias);
        for (d, &ed) in e.iter().enumerate().take(ID_DIM) {
            if ed == 0.0 {
                continue;
            }
            let row = &self.weight[d * k..(d + 1) * k];
            for (o, w) in out.iter_mut().zip(row) {
                *o += ed * w;
            }
        }
    }
}

/// One training view's supervision buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBundle {
    /// Linear RGB, 3 channels.
    pub image: Image,
    pub id_mask: IdMask,
    pub prior_depth: Image,
    pub floating_mask: Mask,
}

impl ViewBundle {
    /// Checks the view against its camera and the global instance count.
    pub fn check(&self, camera: &Camera, instance_count: usize) -> Result<()> {
        let (w, h) = (camera.width, camera.height);
        let shapes = [
            ("image", self.image.width(), self.image.height(), self.image.channels(), 3),
            ("id_mask", self.id_mask.width(), self.id_mask.height(), self.id_mask.channels(), 1),
            ("prior_depth", self.prior_depth.width(), self.prior_depth.height(), self.prior_depth.channels(), 1),
            (
                "floating_mask",
                self.floating_mask.width(),
                self.floating_mask.height(),
                self.floating_mask.channels(),
                1,
            ),
        ];
        for (name, bw, bh, bc, want_c) in shapes {
            if bw != w || bh != h || bc != want_c {
                return Err(Error::Parameter(format!(
                    "{name} is {bw}x{bh}x{bc}, camera expects {w}x{h}x{want_c}"
                )));
            }
        }
        if let Some((p, &id)) = self.id_mask.data().iter().enumerate().find(|(_, &id)| id as usize > instance_count) {
            return Err(Error::Parameter(format!(
                "id {id} at pixel ({}, {}) exceeds instance count {instance_count}",
                p % w,
                p / w
            )));
        }
        for (p, (&d, &m)) in self.prior_depth.data().iter().zip(self.floating_mask.data()).enumerate() {
            if m && !(d.is_finite() && d > 0.0) {
                return Err(Error::Parameter(format!("prior depth {d} at pixel ({}, {}) is not positive", p % w, p / w)));
            }
        }
        Ok(())
    }
}

/// Human-readable summary of a violation list.
pub fn describe(violations: &[Violation]) -> String {
    let mut s = String::new();
    for v in violations {
        if !s.is_empty() {
            s.push_str("; ");
        }
        s.push_str(&format!("{v}"));
    }
    s
}
