//! Loading and writing on-disk datasets.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use semsplat_core::control::build_floating_mask;
use semsplat_core::synth::SyntheticViews;
use semsplat_core::train::{Dataset, View};
use semsplat_core::{Camera, Image, ViewBundle};

use crate::error::{IoError, Result};
use crate::manifest::{bounds_from_cameras, BoundsRecord, CameraRecord, Manifest, ViewRecord};
use crate::{pfm, png};

/// A dataset read from disk, with the names and optional exact depths that
/// only evaluation uses.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub names: Vec<String>,
    pub gt_depth: Vec<Option<Image>>,
    pub root: PathBuf,
}

struct LoadedView {
    view: View,
    gt_depth: Option<Image>,
}

fn check_extent(errors: &mut Vec<String>, what: &Path, w: usize, h: usize, camera: &Camera) {
    if w != camera.width || h != camera.height {
        errors.push(format!(
            "{}: {w}x{h} does not match the camera's {}x{}",
            what.display(),
            camera.width,
            camera.height
        ));
    }
}

fn load_view(root: &Path, rec: &ViewRecord, instance_count: usize, dilation: usize) -> std::result::Result<LoadedView, Vec<String>> {
    let mut errors = Vec::new();
    let camera = match rec.camera.to_camera() {
        Ok(c) => Some(c),
        Err(e) => {
            errors.push(format!("camera: {e}"));
            None
        }
    };
    fn keep<T>(errors: &mut Vec<String>, r: Result<T>) -> Option<T> {
        r.map_err(|e| errors.push(e.to_string())).ok()
    }
    let image = keep(&mut errors, png::read_rgb(&root.join(&rec.image)));
    let mask = keep(&mut errors, png::read_mask(&root.join(&rec.mask)));
    let depth = keep(&mut errors, pfm::read(&root.join(&rec.depth)));
    let gt = match &rec.gt_depth {
        Some(p) => keep(&mut errors, pfm::read(&root.join(p))),
        None => None,
    };
    let (Some(camera), Some(image), Some(mask), Some(depth)) = (camera, image, mask, depth) else {
        return Err(errors);
    };
    check_extent(&mut errors, &rec.image, image.width(), image.height(), &camera);
    check_extent(&mut errors, &rec.mask, mask.width(), mask.height(), &camera);
    check_extent(&mut errors, &rec.depth, depth.width(), depth.height(), &camera);
    if let (Some(p), Some(g)) = (&rec.gt_depth, &gt) {
        check_extent(&mut errors, p, g.width(), g.height(), &camera);
    }
    if let Some(bad) = mask.data().iter().copied().find(|v| *v as usize > instance_count) {
        errors.push(format!("{}: instance id {bad} exceeds instance_count {instance_count}", rec.mask.display()));
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    let floating_mask = build_floating_mask(&mask, dilation);
    if let Some(p) = floating_mask
        .data()
        .iter()
        .zip(depth.data())
        .position(|(m, d)| *m && !(d.is_finite() && *d > 0.0))
    {
        errors.push(format!(
            "{}: depth {} at pixel ({}, {}) inside the floating mask is not positive",
            rec.depth.display(),
            depth.data()[p],
            p % depth.width(),
            p / depth.width()
        ));
        return Err(errors);
    }
    Ok(LoadedView {
        view: View { camera, bundle: ViewBundle { image, id_mask: mask, prior_depth: depth, floating_mask } },
        gt_depth: gt,
    })
}

/// Reads and validates a dataset. Floating masks are built with a disc of
/// radius `mask_dilation_px`. Every problem found is reported, each prefixed
/// with the view it concerns.
pub fn load_dataset(manifest_path: &Path, mask_dilation_px: usize) -> Result<LoadedDataset> {
    let manifest_path = if manifest_path.is_dir() { manifest_path.join("manifest.toml") } else { manifest_path.to_path_buf() };
    let manifest = Manifest::read(&manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut errors = Vec::new();
    if manifest.views.is_empty() {
        errors.push("manifest lists no views".to_string());
    }
    if manifest.instance_count > 255 {
        errors.push(format!("instance_count {} exceeds the 8-bit mask range", manifest.instance_count));
    }
    let mut seen = vec![0u32; manifest.views.len()];
    for &i in manifest.train.iter().chain(&manifest.holdout) {
        match seen.get_mut(i) {
            Some(s) => *s += 1,
            None => errors.push(format!("split lists refer to missing view {i}")),
        }
    }
    for (i, s) in seen.iter().enumerate() {
        match s {
            0 => errors.push(format!("view {} is in neither split", manifest.view_name(i))),
            1 => {}
            _ => errors.push(format!("view {} appears in more than one split entry", manifest.view_name(i))),
        }
    }

    let loaded: Vec<_> = manifest
        .views
        .par_iter()
        .map(|rec| load_view(&root, rec, manifest.instance_count, mask_dilation_px))
        .collect();
    let mut views = Vec::with_capacity(loaded.len());
    let mut gt_depth = Vec::with_capacity(loaded.len());
    for (i, r) in loaded.into_iter().enumerate() {
        match r {
            Ok(v) => {
                views.push(v.view);
                gt_depth.push(v.gt_depth);
            }
            Err(es) => errors.extend(es.into_iter().map(|e| format!("view {}: {e}", manifest.view_name(i)))),
        }
    }
    if !errors.is_empty() {
        return Err(IoError::Validation(errors));
    }
    let cameras: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    let bounds = match manifest.bounds {
        Some(b) => b.into(),
        None => bounds_from_cameras(&cameras)
            .ok_or_else(|| IoError::Validation(vec!["no bounds given and the cameras do not converge".into()]))?,
    };
    let dataset = Dataset {
        views,
        instance_count: manifest.instance_count,
        train: manifest.train.clone(),
        holdout: manifest.holdout.clone(),
        bounds,
    };
    dataset.check().map_err(|e| IoError::Validation(vec![e.to_string()]))?;
    let names = (0..manifest.views.len()).map(|i| manifest.view_name(i)).collect();
    Ok(LoadedDataset { dataset, names, gt_depth, root })
}

/// Writes `views` under `dir` (images, masks, depth priors, exact depths and
/// `manifest.toml`) and returns the manifest path.
pub fn write_dataset(dir: &Path, views: &SyntheticViews) -> Result<PathBuf> {
    for sub in ["images", "masks", "depth", "gt_depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| IoError::io(&p, e))?;
    }
    let d = &views.dataset;
    let mut records = Vec::with_capacity(d.views.len());
    for (i, (v, gt)) in d.views.iter().zip(&views.gt_depth).enumerate() {
        let name = format!("{i:03}");
        let rec = ViewRecord {
            name: Some(name.clone()),
            image: PathBuf::from(format!("images/{name}.png")),
            mask: PathBuf::from(format!("masks/{name}.png")),
            depth: PathBuf::from(format!("depth/{name}.pfm")),
            gt_depth: Some(PathBuf::from(format!("gt_depth/{name}.pfm"))),
            camera: CameraRecord::from_camera(&v.camera),
        };
        png::write_rgb(&dir.join(&rec.image), &v.bundle.image)?;
        png::write_mask(&dir.join(&rec.mask), &v.bundle.id_mask)?;
        pfm::write(&dir.join(&rec.depth), &v.bundle.prior_depth)?;
        pfm::write(&dir.join(rec.gt_depth.as_ref().expect("set above")), gt)?;
        records.push(rec);
    }
    let manifest = Manifest {
        instance_count: d.instance_count,
        train: d.train.clone(),
        holdout: d.holdout.clone(),
        bounds: Some(BoundsRecord { min: d.bounds.min, max: d.bounds.max }),
        views: records,
    };
    let path = dir.join("manifest.toml");
    manifest.write(&path)?;
    Ok(path)
}
