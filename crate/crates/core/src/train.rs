//! The training loop: per-view loss and update, periodic densify/prune with
//! optimizer-state remapping, holdout evaluation and a metrics log.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::{self, ControlConfig, DensifyStats};
use crate::error::{Error, Result};
use crate::grid::{IdMask, Image, Mask};
use crate::math;
use crate::optim::{self, AdamState, LossConfig, LossTerms, OptimizerConfig};
use crate::photometric;
use crate::render::{self, GradientSet, RenderSettings};
use crate::scene::{init_random_cloud, Aabb, Camera, ClassHead, GaussianCloud, ViewBundle};
use crate::semantics;

/// One calibrated view with its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub bundle: ViewBundle,
}

/// Views, split lists and the region random points are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub views: Vec<View>,
    /// Number of target instances `C`; mask values lie in `0..=C`.
    pub instance_count: usize,
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
    pub bounds: Aabb,
}

impl Dataset {
    pub fn check(&self) -> Result<()> {
        if self.views.is_empty() || self.train.is_empty() {
            return Err(Error::Config("dataset has no training views".into()));
        }
        let mut seen = vec![false; self.views.len()];
        for &i in self.train.iter().chain(&self.holdout) {
            if i >= self.views.len() {
                return Err(Error::Config(alloc::format!("split refers to missing view {i}")));
            }
            if seen[i] {
                return Err(Error::Config(alloc::format!("view {i} appears twice in the splits")));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(alloc::format!("view {i} is in neither split")));
        }
        if self.bounds.is_degenerate() {
            return Err(Error::Config("degenerate scene bounds".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            v.camera.check()?;
            v.bundle.check(&v.camera, self.instance_count).map_err(|e| match e {
                Error::Contract(m) | Error::Parameter(m) | Error::Config(m) => {
                    Error::Config(alloc::format!("view {i}: {m}"))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    /// 1.1 times the largest distance of a camera from the camera centroid,
    /// or half the bounds diagonal when all cameras coincide.
    pub fn scene_extent(&self) -> f64 {
        let positions: Vec<_> = self.views.iter().map(|v| v.camera.position()).collect();
        let mut centroid = [0.0; 3];
        for p in &positions {
            centroid = math::add(&centroid, p);
        }
        centroid = math::scale(&centroid, 1.0 / positions.len().max(1) as f64);
        let radius = positions.iter().map(|p| math::norm(&math::sub(p, &centroid))).fold(0.0, f64::max);
        if radius > 0.0 {
            1.1 * radius
        } else {
            0.5 * self.bounds.diagonal()
        }
    }

    /// Depth assigned to pixels nothing covers: 1.1 times the diameter of
    /// the box enclosing the cameras and the scene bounds.
    pub fn background_depth(&self) -> f64 {
        let mut lo = self.bounds.min;
        let mut hi = self.bounds.max;
        for v in &self.views {
            let p = v.camera.position();
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        1.1 * math::norm(&math::sub(&hi, &lo))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub init_points: usize,
    pub sh_degree: u8,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub control: ControlConfig,
    /// ROI gating of densification, semantic pruning and floating masks.
    pub semantic: bool,
    /// Holdout PSNR is computed every this many iterations and at the end.
    pub holdout_interval: u64,
    /// Checkpoint events every this many iterations (0: only at the end).
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            init_points: 10_000,
            sh_degree: 0,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            control: ControlConfig::default(),
            semantic: true,
            holdout_interval: 500,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    /// Drops the identity loss and every semantic mechanism.
    pub fn without_semantics(mut self) -> Self {
        self.loss.lambda_id = 0.0;
        self.semantic = false;
        self
    }

    pub fn without_depth_reg(mut self) -> Self {
        self.loss.lambda_d = 0.0;
        self
    }

    /// The control schedule with `densify_until` clamped to the run length,
    /// or `None` when the run ends before densification would start.
    pub fn effective_control(&self) -> Option<ControlConfig> {
        let mut c = self.control;
        c.densify_until = c.densify_until.min(self.iterations);
        (c.densify_from < c.densify_until).then_some(c)
    }

    pub fn check(&self) -> Result<()> {
        if self.init_points == 0 {
            return Err(Error::Config("init_points must be positive".into()));
        }
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return Err(Error::Config(alloc::format!("sh_degree {} exceeds 3", self.sh_degree)));
        }
        if self.holdout_interval == 0 {
            return Err(Error::Config("holdout_interval must be positive".into()));
        }
        self.optimizer.check()?;
        self.loss.check()?;
        if let Some(c) = self.effective_control() {
            c.check(self.iterations)?;
        }
        Ok(())
    }
}

/// One line of the metrics log. `iter` counts completed iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub iter: u64,
    pub terms: LossTerms,
    pub n_gaussians: usize,
    pub psnr_holdout: Option<f64>,
}

/// State right after a prune, for callers that audit the survivors.
#[derive(Debug, Clone, Copy)]
pub struct PruneEvent<'a> {
    pub iteration: u64,
    pub removed: usize,
    pub semantic: bool,
    pub cloud: &'a GaussianCloud,
    pub head: &'a ClassHead,
    /// Largest screen fraction each survivor reached since the last control step.
    pub screen_fraction: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub enum TrainEvent<'a> {
    Metrics(&'a MetricsRecord),
    Densified { iteration: u64, cloned: usize, split: usize, n_gaussians: usize },
    Pruned(PruneEvent<'a>),
    Checkpoint { iteration: u64, cloud: &'a GaussianCloud, head: &'a ClassHead },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub cloud: GaussianCloud,
    pub head: ClassHead,
    pub metrics: Vec<MetricsRecord>,
    /// Number of renders used for training steps (holdout renders excluded).
    pub training_renders: u64,
}

/// Why training stopped early.
#[derive(Debug, Clone)]
pub enum TrainError {
    /// Bad configuration or dataset; nothing was trained.
    Invalid(Error),
    /// A loss or gradient became non-finite. The state is the one the
    /// failing iteration started from.
    Aborted { error: Error, iteration: u64, cloud: Box<GaussianCloud>, head: Box<ClassHead> },
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Invalid(e)
    }
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Invalid(e) => write!(f, "{e}"),
            TrainError::Aborted { error, .. } => write!(f, "training aborted: {error}"),
        }
    }
}

fn gradients_finite(g: &GradientSet, head: &ClassHead) -> bool {
    let flat = |v: &[f64]| v.iter().all(|x| x.is_finite());
    flat(g.centers.as_flattened())
        && flat(g.log_scales.as_flattened())
        && flat(g.rotations.as_flattened())
        && flat(&g.opacity_logits)
        && flat(g.colors.as_flattened())
        && flat(g.identity_codes.as_flattened())
        && flat(&head.weight)
        && flat(&head.bias)
}

/// Mean full-frame PSNR of the color channel over `indices`.
pub fn mean_psnr(dataset: &Dataset, indices: &[usize], cloud: &GaussianCloud) -> Result<Option<f64>> {
    if indices.is_empty() {
        return Ok(None);
    }
    let settings = color_only(dataset.background_depth());
    let mut sum = 0.0;
    for &i in indices {
        let v = &dataset.views[i];
        let frame = render::render(cloud, &v.camera, &settings).frame;
        sum += photometric::psnr(&frame.color, &v.bundle.image)?;
    }
    Ok(Some(sum / indices.len() as f64))
}

fn color_only(background_depth: f64) -> RenderSettings {
    RenderSettings { identity: false, hard_depth: false, ..RenderSettings::new(background_depth) }
}

/// Fraction of pixels whose predicted instance equals `truth`.
pub fn id_accuracy(id_feature: &Image, head: &ClassHead, truth: &IdMask) -> Result<f64> {
    let predicted = semantics::predict_ids(id_feature, head)?;
    if !predicted.same_shape(truth) {
        return Err(crate::error::contract!("prediction and truth disagree in shape"));
    }
    let n = truth.data().len().max(1);
    let hits = predicted.data().iter().zip(truth.data()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / n as f64)
}

/// Mean absolute difference between two depth maps over `mask` (0 when empty).
pub fn masked_depth_mae(depth: &Image, truth: &Image, mask: &Mask) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((d, t), m) in depth.data().iter().zip(truth.data()).zip(mask.data()) {
        if *m {
            sum += (d - t).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Trains a randomly initialized cloud on `dataset`.
///
/// Each iteration draws the next training view of a seeded per-epoch
/// shuffle, renders it once, evaluates the total loss and applies one Adam
/// step. After every control step the cloud is densified and then pruned,
/// and the optimizer moments follow the surviving Gaussians. Events are
/// delivered to `on_event` as they happen; the final state is always
/// announced as a checkpoint.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> core::result::Result<TrainOutcome, TrainError> {
    dataset.check()?;
    config.check()?;
    let mut optimizer = config.optimizer;
    optimizer.total_iterations = config.iterations;
    optimizer.spatial_lr_scale = dataset.scene_extent();
    let control = config.effective_control();
    let background = dataset.background_depth();
    let extent = dataset.scene_extent();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    let mut aux_rng = ChaCha8Rng::seed_from_u64(seed);
    aux_rng.set_stream(2);

    let mut cloud = init_random_cloud(config.init_points, &dataset.bounds, seed)?.with_sh_degree(config.sh_degree)?;
    let mut head = ClassHead::random(dataset.instance_count, aux_rng.next_u64());
    let mut adam = AdamState::new(&cloud, &head);
    let mut stats = DensifyStats::new(cloud.len());

    // Without semantics every loss sees the whole frame.
    let bundles: Vec<ViewBundle> = dataset
        .views
        .iter()
        .map(|v| {
            let mut b = v.bundle.clone();
            if !config.semantic {
                b.floating_mask = Mask::new(v.camera.width, v.camera.height, 1, true);
            }
            b
        })
        .collect();

    let roi_of = |cloud: &GaussianCloud, head: &ClassHead| -> Vec<bool> {
        if config.semantic {
            control::roi_membership(cloud, head, config.control.roi_prob_threshold)
        } else {
            vec![true; cloud.len()]
        }
    };

    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Vec::with_capacity(config.iterations as usize);
    let mut training_renders = 0u64;
    for it in 0..config.iterations {
        if order.is_empty() {
            order = dataset.train.clone();
            order.shuffle(&mut shuffle_rng);
            order.reverse();
        }
        let v = order.pop().expect("refilled above");
        let camera = &dataset.views[v].camera;

        let mut loss = config.loss;
        if cloud.len() <= loss.grouping.knn_k {
            loss.grouping.lambda_3d = 0.0;
        }
        let step_seed = aux_rng.next_u64();
        let tl = optim::total_loss(&bundles[v], camera, &cloud, &head, &loss, background, step_seed)?;
        training_renders += 1;
        let bad = tl.terms.first_non_finite().or_else(|| (!gradients_finite(&tl.grads, &tl.head_grad)).then_some("gradient"));
        if let Some(term) = bad {
            return Err(TrainError::Aborted {
                error: Error::NonFinite { iteration: it, term },
                iteration: it,
                cloud: Box::new(cloud),
                head: Box::new(head),
            });
        }
        let roi = roi_of(&cloud, &head);
        stats.accumulate(&tl.grads, &roi, camera.width.max(camera.height))?;
        optim::step(&mut cloud, &mut head, &tl.grads, &tl.head_grad, &mut adam, it, &optimizer)?;

        let done = it + 1;
        let psnr_holdout = if done % config.holdout_interval == 0 || done == config.iterations {
            mean_psnr(dataset, &dataset.holdout, &cloud)?
        } else {
            None
        };
        let record = MetricsRecord { iter: done, terms: tl.terms, n_gaussians: cloud.len(), psnr_holdout };
        on_event(TrainEvent::Metrics(&record));
        metrics.push(record);

        if let Some(c) = control.as_ref().filter(|c| c.is_control_step(done)) {
            let roi = roi_of(&cloud, &head);
            let dens = control::densify(&cloud, &stats, &roi, c, extent, aux_rng.next_u64())?;
            on_event(TrainEvent::Densified {
                iteration: done,
                cloned: dens.cloned,
                split: dens.split,
                n_gaussians: dens.cloud.len(),
            });
            let moved = stats.remap(&dens.map);
            let roi = roi_of(&dens.cloud, &head);
            let pruned = control::prune(&dens.cloud, &roi, &moved, c, done, config.semantic)?;
            adam.remap(&dens.map.then(&pruned.map), cloud.sh_coeff_count());
            cloud = pruned.cloud;
            let survivors = moved.remap(&pruned.map);
            on_event(TrainEvent::Pruned(PruneEvent {
                iteration: done,
                removed: pruned.removed,
                semantic: config.semantic,
                cloud: &cloud,
                head: &head,
                screen_fraction: &survivors.max_screen_fraction,
            }));
            stats = DensifyStats::new(cloud.len());
        }
        if config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && done != config.iterations {
            on_event(TrainEvent::Checkpoint { iteration: done, cloud: &cloud, head: &head });
        }
    }
    on_event(TrainEvent::Checkpoint { iteration: config.iterations, cloud: &cloud, head: &head });
    Ok(TrainOutcome { cloud, head, metrics, training_renders })
}
