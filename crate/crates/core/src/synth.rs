//! Synthetic ground truth: labelled Gaussian blobs seen from a camera ring.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::control::build_floating_mask;
use crate::error::{Error, Result};
use crate::grid::{IdMask, Image};
use crate::math::{self, Vec3};
use crate::render::{self, RenderSettings};
use crate::scene::{Aabb, Camera, GaussianCloud, Gaussian, ViewBundle, ID_DIM};
use crate::sh;
use crate::train::{Dataset, View};

/// One labelled blob.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSpec {
    /// Instance id, 1..=255.
    pub class_id: u8,
    pub center: Vec3,
    /// Radius of the ball the blob's centers are drawn from.
    pub extent: f64,
    pub count: usize,
    /// Linear RGB in [0, 1].
    pub base_color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cloud: GaussianCloud,
    /// True instance of every Gaussian.
    pub labels: Vec<u8>,
}

impl SyntheticScene {
    pub fn instance_count(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Box around every blob, padded by half the largest blob radius.
    pub fn bounds(&self, objects: &[ObjectSpec]) -> Aabb {
        let pad = 0.5 * objects.iter().map(|o| o.extent).fold(0.0, f64::max);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for o in objects {
            for a in 0..3 {
                lo[a] = lo[a].min(o.center[a] - o.extent - pad);
                hi[a] = hi[a].max(o.center[a] + o.extent + pad);
            }
        }
        Aabb::new(lo, hi)
    }
}

/// Opacity of every ground-truth Gaussian.
pub const OBJECT_OPACITY: f64 = 0.9;
/// Half-width of the uniform per-Gaussian color jitter.
pub const COLOR_JITTER: f64 = 0.08;

/// Builds the labelled ground-truth cloud.
///
/// Centers are uniform in each object's ball. Scales are a random fraction of
/// the mean blob spacing so that every blob renders as a solid body.
pub fn make_scene(objects: &[ObjectSpec], seed: u64) -> Result<SyntheticScene> {
    if objects.is_empty() {
        return Err(Error::Parameter("scene needs at least one object".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::empty(0)?;
    let mut labels = Vec::new();
    for (k, o) in objects.iter().enumerate() {
        if o.class_id == 0 || o.count == 0 || !(o.extent > 0.0) {
            return Err(Error::Parameter(alloc::format!(
                "object {k}: need class id ≥ 1, count ≥ 1 and positive extent"
            )));
        }
        if o.base_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Parameter(alloc::format!("object {k}: base color outside [0, 1]")));
        }
        let spacing = o.extent * 1.6 / libm::cbrt(o.count as f64);
        for _ in 0..o.count {
            let offset = loop {
                let p: Vec3 = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
                if math::dot(&p, &p) <= 1.0 {
                    break math::scale(&p, o.extent);
                }
            };
            let log_scale = core::array::from_fn(|_| math::ln(spacing * rng.random_range(0.35..0.6)));
            let q: [f64; 4] = core::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let rgb = core::array::from_fn(|c| {
                (o.base_color[c] + rng.random_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0)
            });
            cloud.push(Gaussian {
                center: math::add(&o.center, &offset),
                log_scale,
                rotation: math::quat_normalize(&q),
                opacity_logit: math::logit(OBJECT_OPACITY),
                color: vec![sh::rgb_to_dc(&rgb)],
                identity: [0.0; ID_DIM],
            })?;
            labels.push(o.class_id);
        }
    }
    Ok(SyntheticScene { cloud, labels })
}

/// Cameras evenly spaced on a horizontal circle, all looking at `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingSpec {
    pub count: usize,
    pub radius: f64,
    /// Angle above the horizontal plane, radians.
    pub elevation: f64,
    pub target: Vec3,
    /// Focal length in pixels.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl RingSpec {
    /// World `+z` is up.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        if self.count == 0 || !(self.radius > 0.0) {
            return Err(Error::Parameter("ring needs at least one camera and a positive radius".into()));
        }
        (0..self.count)
            .map(|k| {
                let theta = 2.0 * core::f64::consts::PI * k as f64 / self.count as f64;
                let (ce, se) = (math::cos(self.elevation), math::sin(self.elevation));
                let dir = [ce * math::cos(theta), ce * math::sin(theta), se];
                let eye = math::add(&self.target, &math::scale(&dir, self.radius));
                Camera::look_at(eye, self.target, [0.0, 0.0, 1.0], self.focal, self.width, self.height)
            })
            .collect()
    }
}

/// Seeded corruption of the exact depth, emulating a monocular estimator:
/// per-pixel multiplicative noise, then a global scale and shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthNoise {
    pub relative_sigma: f64,
    pub scale: f64,
    pub shift: f64,
}

impl Default for DepthNoise {
    fn default() -> Self {
        Self { relative_sigma: 0.05, scale: 0.5, shift: 0.3 }
    }
}

/// Rendered supervision plus the exact depth kept for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticViews {
    pub dataset: Dataset,
    pub gt_depth: Vec<Image>,
}

/// Accumulated alpha below which a pixel is labelled background.
pub const MASK_ALPHA: f64 = 0.5;

/// Per-pixel instance with the largest compositing weight, or 0 where the
/// scene covers less than half the pixel.
pub fn id_mask(scene: &SyntheticScene, camera: &Camera) -> IdMask {
    let (w, h) = (camera.width, camera.height);
    let instances = scene.instance_count();
    let mut best = vec![(0u8, f64::NEG_INFINITY); w * h];
    let mut accum = vec![0.0; w * h];
    let mut cloud = scene.cloud.clone();
    // Instances are rendered 16 at a time as one-hot identity codes.
    for first in (1..=instances.max(1)).step_by(ID_DIM) {
        for (code, &label) in cloud.identity_codes.iter_mut().zip(&scene.labels) {
            *code = [0.0; ID_DIM];
            let l = label as usize;
            if l >= first && l < first + ID_DIM {
                code[l - first] = 1.0;
            }
        }
        let frame = render::render(&cloud, camera, &RenderSettings::new(1.0)).frame;
        for p in 0..w * h {
            accum[p] = frame.accum_alpha.data()[p];
            for (d, &v) in frame.id_feature.at(p).iter().enumerate() {
                let id = first + d;
                if id <= instances && v > best[p].1 {
                    best[p] = (id as u8, v);
                }
            }
        }
    }
    let data = (0..w * h).map(|p| if accum[p] < MASK_ALPHA { 0 } else { best[p].0 }).collect();
    IdMask::from_vec(w, h, 1, data).expect("sized above")
}

/// Renders every ring camera and assembles a dataset: even views train,
/// odd views are held out.
pub fn render_views(
    scene: &SyntheticScene,
    objects: &[ObjectSpec],
    ring: &RingSpec,
    noise: Option<DepthNoise>,
    mask_dilation_px: usize,
    seed: u64,
) -> Result<SyntheticViews> {
    let cameras = ring.cameras()?;
    let bounds = scene.bounds(objects);
    let mut dataset = Dataset {
        views: Vec::new(),
        instance_count: scene.instance_count(),
        train: (0..cameras.len()).step_by(2).collect(),
        holdout: (1..cameras.len()).step_by(2).collect(),
        bounds,
    };
    // Background depth depends only on cameras and bounds.
    dataset.views = cameras
        .iter()
        .map(|c| View {
            camera: c.clone(),
            bundle: ViewBundle {
                image: Image::new(1, 1, 3, 0.0),
                id_mask: IdMask::new(1, 1, 1, 0),
                prior_depth: Image::new(1, 1, 1, 1.0),
                floating_mask: crate::grid::Mask::new(1, 1, 1, false),
            },
        })
        .collect();
    let settings = RenderSettings { identity: false, hard_depth: false, ..RenderSettings::new(dataset.background_depth()) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gt_depth = Vec::with_capacity(cameras.len());
    for view in dataset.views.iter_mut() {
        let camera = &view.camera;
        let frame = render::render(&scene.cloud, camera, &settings).frame;
        let image = frame.color.map(|c| c.clamp(0.0, 1.0));
        let ids = id_mask(scene, camera);
        let prior = match noise {
            None => frame.soft_depth.clone(),
            Some(n) => frame.soft_depth.map(|d| {
                let z: f64 = StandardNormal.sample(&mut rng);
                n.scale * d * (1.0 + n.relative_sigma * z).max(0.1) + n.shift
            }),
        };
        view.bundle = ViewBundle {
            image,
            floating_mask: build_floating_mask(&ids, mask_dilation_px),
            id_mask: ids,
            prior_depth: prior,
        };
        gt_depth.push(frame.soft_depth);
    }
    Ok(SyntheticViews { dataset, gt_depth })
}
