//! The `semsplat` command line.
//!
//! Exit codes: 0 success, 1 file or IO failure, 2 bad arguments or
//! configuration, 3 dataset validation failure, 4 numerical abort.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use semsplat_core::photometric;
use semsplat_core::render::{self, RenderSettings};
use semsplat_core::synth::{self, DepthNoise, ObjectSpec, RingSpec};
use semsplat_core::train::{self, TrainError, TrainEvent};
use semsplat_core::{math, Camera, GaussianCloud};

use crate::checkpoint;
use crate::config::{self, CliOverrides, ConfigFile};
use crate::dataset::{self, load_dataset};
use crate::error::IoError;
use crate::manifest::CameraRecord;
use crate::{colmap, metrics, pfm, png, vis};

#[derive(Debug, Parser)]
#[command(name = "semsplat", version, about = "Targeted Gaussian splatting with identity codes and depth priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic multi-object dataset to disk.
    Synth(SynthArgs),
    /// Train on a dataset and write metrics and checkpoints.
    Train(TrainArgs),
    /// Render one channel of a checkpoint from a camera.
    Render(RenderArgs),
    /// Score a checkpoint against a dataset split.
    Eval(EvalArgs),
    /// Write a manifest skeleton from a COLMAP text reconstruction.
    Colmap(ColmapArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML scene description; the built-in two-object scene otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Corrupt the depth priors (default noise unless the scene file sets one).
    #[arg(long)]
    pub noisy_depth: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest file or the directory containing `manifest.toml`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub init_points: Option<usize>,
    #[arg(long)]
    pub no_depth_reg: bool,
    #[arg(long)]
    pub no_semantic: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads for rendering (all cores by default).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Channel {
    Color,
    /// Most probable instance per pixel, as palette colors.
    Id,
    /// Principal components of the identity feature.
    IdPca,
    DepthSoft,
    DepthHard,
    Alpha,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A camera TOML file (manifest camera fields), or `view:NAME` together
    /// with `--data`.
    #[arg(long)]
    pub camera: String,
    /// Dataset used for `view:` cameras and the background depth.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output path. Depth channels written to a `.pfm` path keep raw values.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "color")]
    pub channel: Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Holdout,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "holdout")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct ColmapArgs {
    /// Directory holding `cameras.txt` and `images.txt`.
    #[arg(long)]
    pub sparse: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub instances: usize,
    /// Image directory, relative to the manifest.
    #[arg(long, default_value = "images")]
    pub images: String,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Validation(_) => CliError::Data(e.to_string()),
            IoError::Core(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

pub type CliResult = std::result::Result<(), CliError>;

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => synth_cmd(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Render(a) => render_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Colmap(a) => colmap_cmd(&a),
    }
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    pub class_id: u8,
    pub center: [f64; 3],
    pub extent: f64,
    pub count: usize,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingRecord {
    pub count: usize,
    pub radius: f64,
    pub elevation: f64,
    #[serde(default)]
    pub target: [f64; 3],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRecord {
    pub relative_sigma: f64,
    pub scale: f64,
    pub shift: f64,
}

/// Scene description read by `synth --spec`.
///
/// ```toml
/// seed = 11
/// mask_dilation_px = 12
/// [ring]
/// count = 12
/// radius = 4.0
/// elevation = 0.35
/// focal = 80.0
/// width = 64
/// height = 64
/// [depth_noise]          # optional
/// relative_sigma = 0.05
/// scale = 0.5
/// shift = 0.3
/// [[objects]]
/// class_id = 1
/// center = [-0.55, 0.0, 0.0]
/// extent = 0.45
/// count = 200
/// color = [0.85, 0.35, 0.2]
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dilation")]
    pub mask_dilation_px: usize,
    pub ring: RingRecord,
    #[serde(default)]
    pub depth_noise: Option<NoiseRecord>,
    pub objects: Vec<ObjectRecord>,
}

fn default_dilation() -> usize {
    semsplat_core::control::ControlConfig::default().mask_dilation_px
}

impl Default for SynthSpec {
    /// Two touching blobs, orange and blue, seen by twelve 64×64 cameras.
    fn default() -> Self {
        Self {
            seed: 11,
            mask_dilation_px: default_dilation(),
            ring: RingRecord { count: 12, radius: 4.0, elevation: 0.35, target: [0.0; 3], focal: 80.0, width: 64, height: 64 },
            depth_noise: None,
            objects: vec![
                ObjectRecord { class_id: 1, center: [-0.55, 0.0, 0.0], extent: 0.45, count: 200, color: [0.85, 0.35, 0.2] },
                ObjectRecord { class_id: 2, center: [0.55, 0.1, 0.1], extent: 0.4, count: 200, color: [0.2, 0.45, 0.9] },
            ],
        }
    }
}

impl SynthSpec {
    pub fn objects(&self) -> Vec<ObjectSpec> {
        self.objects
            .iter()
            .map(|o| ObjectSpec { class_id: o.class_id, center: o.center, extent: o.extent, count: o.count, base_color: o.color })
            .collect()
    }

    pub fn ring(&self) -> RingSpec {
        let r = &self.ring;
        RingSpec {
            count: r.count,
            radius: r.radius,
            elevation: r.elevation,
            target: r.target,
            focal: r.focal,
            width: r.width,
            height: r.height,
        }
    }

    pub fn noise(&self) -> Option<DepthNoise> {
        self.depth_noise.as_ref().map(|n| DepthNoise { relative_sigma: n.relative_sigma, scale: n.scale, shift: n.shift })
    }
}

/// Renders `spec` and writes the dataset; returns the manifest path.
pub fn write_synthetic(spec: &SynthSpec, out: &Path) -> std::result::Result<PathBuf, CliError> {
    let objects = spec.objects();
    let scene = synth::make_scene(&objects, spec.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let views = synth::render_views(&scene, &objects, &spec.ring(), spec.noise(), spec.mask_dilation_px, spec.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(dataset::write_dataset(out, &views)?)
}

fn synth_cmd(a: &SynthArgs) -> CliResult {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(v) = a.views {
        spec.ring.count = v;
    }
    if let Some(r) = a.radius {
        spec.ring.radius = r;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if a.noisy_depth && spec.depth_noise.is_none() {
        let d = DepthNoise::default();
        spec.depth_noise = Some(NoiseRecord { relative_sigma: d.relative_sigma, scale: d.scale, shift: d.shift });
    }
    let manifest = write_synthetic(&spec, &a.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

// ---------------------------------------------------------------- train

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn train_cmd(a: &TrainArgs) -> CliResult {
    if let Some(n) = a.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        // Fails only if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let file = match &a.config {
        Some(p) => Some(ConfigFile::read(p).map_err(|e| CliError::Usage(e.to_string()))?),
        None => None,
    };
    let overrides = CliOverrides {
        iterations: a.iters,
        init_points: a.init_points,
        seed: a.seed,
        no_depth_reg: a.no_depth_reg,
        no_semantic: a.no_semantic,
    };
    let (config, seed) = config::resolve(file.as_ref(), &overrides).map_err(CliError::Usage)?;
    let loaded = load_dataset(&a.data, config.control.mask_dilation_px)?;
    create_dir(&a.out)?;

    let metrics_path = a.out.join("metrics.ndjson");
    let file = fs::File::create(&metrics_path).map_err(|e| CliError::Io(format!("{}: {e}", metrics_path.display())))?;
    let mut log = BufWriter::new(file);
    let mut failure: Option<CliError> = None;
    let quiet = a.quiet;
    let out = a.out.clone();
    let total = config.iterations;
    let result = train::train(&loaded.dataset, &config, seed, &mut |event| {
        if failure.is_some() {
            return;
        }
        let r = match event {
            TrainEvent::Metrics(m) => {
                if !quiet && (m.psnr_holdout.is_some() || m.iter % 100 == 0) {
                    let psnr = m.psnr_holdout.map(|p| format!(" holdout PSNR {p:.2}")).unwrap_or_default();
                    eprintln!("[{}/{total}] loss {:.5} gaussians {}{psnr}", m.iter, m.terms.total, m.n_gaussians);
                }
                metrics::write_line(&mut log, m).map_err(|e| CliError::Io(format!("{}: {e}", metrics_path.display())))
            }
            TrainEvent::Checkpoint { iteration, cloud, head } => {
                let name = if iteration == total { "final.tsgs".to_string() } else { format!("iter_{iteration:06}.tsgs") };
                checkpoint::save(&out.join(name), cloud, head, iteration).map_err(CliError::from)
            }
            TrainEvent::Pruned(p) if !quiet && p.removed > 0 => {
                eprintln!("[{}/{total}] pruned {} (semantic: {})", p.iteration, p.removed, p.semantic);
                Ok(())
            }
            _ => Ok(()),
        };
        if let Err(e) = r {
            failure = Some(e);
        }
    });
    log.flush().map_err(|e| CliError::Io(format!("{}: {e}", metrics_path.display())))?;
    if let Some(e) = failure {
        return Err(e);
    }
    match result {
        Ok(outcome) => {
            if !quiet {
                eprintln!("done: {} gaussians, {} training renders", outcome.cloud.len(), outcome.training_renders);
            }
            Ok(())
        }
        Err(TrainError::Invalid(e)) => Err(CliError::Usage(e.to_string())),
        Err(TrainError::Aborted { error, iteration, cloud, head }) => {
            let path = a.out.join("abort.tsgs");
            checkpoint::save(&path, &cloud, &head, iteration)?;
            Err(CliError::Numeric(format!("{error} at iteration {iteration}; state saved to {}", path.display())))
        }
    }
}

// ---------------------------------------------------------------- render

fn read_camera_file(path: &Path) -> std::result::Result<Camera, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let rec: CameraRecord = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    rec.to_camera().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Background depth when no dataset is given: as for a dataset whose bounds
/// are the cloud's and whose only camera is `camera`.
fn standalone_background(cloud: &GaussianCloud, camera: &Camera) -> f64 {
    let eye = camera.position();
    let (mut lo, mut hi) = (eye, eye);
    if let Some(b) = cloud.bounds() {
        for a in 0..3 {
            lo[a] = lo[a].min(b.min[a]);
            hi[a] = hi[a].max(b.max[a]);
        }
    }
    (1.1 * math::norm(&math::sub(&hi, &lo))).max(1.0)
}

fn render_cmd(a: &RenderArgs) -> CliResult {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let data = match &a.data {
        Some(p) => Some(load_dataset(p, 0)?),
        None => None,
    };
    let camera = if let Some(name) = a.camera.strip_prefix("view:") {
        let d = data.as_ref().ok_or_else(|| CliError::Usage("view: cameras need --data".into()))?;
        let i = d
            .names
            .iter()
            .position(|n| n == name)
            .or_else(|| name.parse::<usize>().ok().filter(|i| *i < d.names.len()))
            .ok_or_else(|| CliError::Usage(format!("no view named {name}")))?;
        d.dataset.views[i].camera.clone()
    } else {
        read_camera_file(Path::new(&a.camera))?
    };
    let background = match &data {
        Some(d) => d.dataset.background_depth(),
        None => standalone_background(&ckpt.cloud, &camera),
    };
    let frame = render::render(&ckpt.cloud, &camera, &RenderSettings::new(background)).frame;
    let is_pfm = a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    match a.channel {
        Channel::Color => png::write_rgb(&a.out, &frame.color.map(|c| c.clamp(0.0, 1.0)))?,
        Channel::Id => png::write_rgb_raw(
            &a.out,
            &vis::instance_map(&frame.id_feature, &frame.accum_alpha, &ckpt.head, synth::MASK_ALPHA),
        )?,
        Channel::IdPca => png::write_rgb_raw(&a.out, &vis::feature_pca(&frame.id_feature))?,
        Channel::Alpha => png::write_gray(&a.out, &frame.accum_alpha)?,
        Channel::DepthSoft | Channel::DepthHard => {
            let depth = if a.channel == Channel::DepthSoft { &frame.soft_depth } else { &frame.hard_depth };
            if is_pfm {
                pfm::write(&a.out, depth)?;
            } else {
                let (img, lo, hi) = vis::normalize_depth(depth, &frame.accum_alpha, 1e-3);
                png::write_gray(&a.out, &img)?;
                let side = a.out.with_extension("range.txt");
                fs::write(&side, format!("min {lo}\nmax {hi}\n")).map_err(|e| CliError::Io(format!("{}: {e}", side.display())))?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

/// Scores of one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewScore {
    pub psnr: f64,
    pub ssim: f64,
    pub id_accuracy: f64,
    /// Mean absolute depth error over the floating mask, when exact depth exists.
    pub depth_mae: Option<f64>,
}

pub fn evaluate(
    loaded: &dataset::LoadedDataset,
    indices: &[usize],
    cloud: &GaussianCloud,
    head: &semsplat_core::ClassHead,
) -> std::result::Result<Vec<ViewScore>, CliError> {
    let d = &loaded.dataset;
    if head.instance_count() != d.instance_count {
        return Err(CliError::Data(format!(
            "checkpoint has {} instances, dataset {}",
            head.instance_count(),
            d.instance_count
        )));
    }
    let settings = RenderSettings { hard_depth: false, ..RenderSettings::new(d.background_depth()) };
    indices
        .iter()
        .map(|&i| {
            let v = &d.views[i];
            let frame = render::render(cloud, &v.camera, &settings).frame;
            let core = |e: semsplat_core::Error| CliError::Data(e.to_string());
            let clamped = frame.color.map(|c| c.clamp(0.0, 1.0));
            Ok(ViewScore {
                psnr: photometric::psnr(&frame.color, &v.bundle.image).map_err(core)?,
                ssim: photometric::ssim(&clamped, &v.bundle.image).map_err(core)?,
                id_accuracy: train::id_accuracy(&frame.id_feature, head, &v.bundle.id_mask).map_err(core)?,
                depth_mae: loaded.gt_depth[i]
                    .as_ref()
                    .map(|gt| train::masked_depth_mae(&frame.soft_depth, gt, &v.bundle.floating_mask)),
            })
        })
        .collect()
}

fn format_score(label: &str, s: &ViewScore) -> String {
    let depth = s.depth_mae.map(|m| format!(" DepthMAE: {m:.5}")).unwrap_or_default();
    format!("{label} PSNR: {:.4} SSIM: {:.4} LPIPS: n/a IDAcc: {:.4}{depth}", s.psnr, s.ssim, s.id_accuracy)
}

fn eval_cmd(a: &EvalArgs) -> CliResult {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let loaded = load_dataset(&a.data, 0)?;
    let d = &loaded.dataset;
    let indices: Vec<usize> = match a.split {
        Split::Train => d.train.clone(),
        Split::Holdout => d.holdout.clone(),
        Split::All => (0..d.views.len()).collect(),
    };
    if indices.is_empty() {
        return Err(CliError::Data("the selected split is empty".into()));
    }
    let scores = evaluate(&loaded, &indices, &ckpt.cloud, &ckpt.head)?;
    for (&i, s) in indices.iter().zip(&scores) {
        println!("{}", format_score(&loaded.names[i], s));
    }
    let n = scores.len() as f64;
    let depth: Vec<f64> = scores.iter().filter_map(|s| s.depth_mae).collect();
    let mean = ViewScore {
        psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
        id_accuracy: scores.iter().map(|s| s.id_accuracy).sum::<f64>() / n,
        depth_mae: (depth.len() == scores.len()).then(|| depth.iter().sum::<f64>() / n),
    };
    println!("{}", format_score("mean", &mean));
    Ok(())
}

// ---------------------------------------------------------------- colmap

fn colmap_cmd(a: &ColmapArgs) -> CliResult {
    let manifest = colmap::manifest_from_colmap(&a.sparse, &a.images, a.instances)?;
    manifest.write(&a.out)?;
    println!("wrote {} with {} views", a.out.display(), manifest.views.len());
    Ok(())
}
