//! Training configuration files.
//!
//! A config file is a flat TOML table whose keys override the defaults of
//! [`TrainConfig`]. Unknown keys are rejected. Example:
//!
//! ```toml
//! iterations = 3000
//! lambda_d = 0.05
//! densify_until = 2500
//! gl_source = "hard"
//! ```

use std::path::Path;

use serde::Deserialize;

use semsplat_core::depth::DepthSource;
use semsplat_core::train::TrainConfig;

use crate::error::{IoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlSource {
    Soft,
    Hard,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub iterations: Option<u64>,
    pub init_points: Option<usize>,
    pub sh_degree: Option<u8>,
    pub semantic: Option<bool>,
    pub holdout_interval: Option<u64>,
    pub checkpoint_interval: Option<u64>,

    pub lr_centers: Option<f64>,
    pub lr_centers_final_factor: Option<f64>,
    pub lr_log_scales: Option<f64>,
    pub lr_rotations: Option<f64>,
    pub lr_opacity: Option<f64>,
    pub lr_colors: Option<f64>,
    pub lr_identity_codes: Option<f64>,
    pub lr_class_head: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,

    pub lambda_id: Option<f64>,
    pub lambda_d: Option<f64>,
    pub lambda_dssim: Option<f64>,
    pub ssim_window: Option<usize>,
    pub ssim_sigma: Option<f64>,
    pub lambda_2d: Option<f64>,
    pub lambda_3d: Option<f64>,
    pub knn_k: Option<usize>,
    pub sample_m: Option<usize>,
    pub lambda_sh: Option<f64>,
    pub lambda_gl: Option<f64>,
    pub gamma: Option<f64>,
    pub patch_size: Option<usize>,
    pub hard_override_omega: Option<f64>,
    pub align_prior: Option<bool>,
    pub gl_source: Option<GlSource>,

    pub densify_interval: Option<u64>,
    pub densify_from: Option<u64>,
    pub densify_until: Option<u64>,
    pub grad_threshold: Option<f64>,
    pub split_scale_threshold: Option<f64>,
    pub roi_prob_threshold: Option<f64>,
    pub semantic_prune_from: Option<u64>,
    pub opacity_prune_eps: Option<f64>,
    pub mask_dilation_px: Option<usize>,
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Self::parse(&text).map_err(|m| IoError::format(path, m))
    }

    /// Writes every present key over `config`.
    pub fn apply(&self, config: &mut TrainConfig) {
        set(&mut config.iterations, self.iterations);
        set(&mut config.init_points, self.init_points);
        set(&mut config.sh_degree, self.sh_degree);
        set(&mut config.semantic, self.semantic);
        set(&mut config.holdout_interval, self.holdout_interval);
        set(&mut config.checkpoint_interval, self.checkpoint_interval);

        let o = &mut config.optimizer;
        set(&mut o.lr.centers, self.lr_centers);
        set(&mut o.lr.centers_final_factor, self.lr_centers_final_factor);
        set(&mut o.lr.log_scales, self.lr_log_scales);
        set(&mut o.lr.rotations, self.lr_rotations);
        set(&mut o.lr.opacity_logits, self.lr_opacity);
        set(&mut o.lr.colors, self.lr_colors);
        set(&mut o.lr.identity_codes, self.lr_identity_codes);
        set(&mut o.lr.class_head, self.lr_class_head);
        set(&mut o.beta1, self.beta1);
        set(&mut o.beta2, self.beta2);
        set(&mut o.eps, self.adam_eps);

        let l = &mut config.loss;
        set(&mut l.lambda_id, self.lambda_id);
        set(&mut l.lambda_d, self.lambda_d);
        set(&mut l.photometric.lambda_dssim, self.lambda_dssim);
        set(&mut l.photometric.ssim_window, self.ssim_window);
        set(&mut l.photometric.ssim_sigma, self.ssim_sigma);
        set(&mut l.grouping.lambda_2d, self.lambda_2d);
        set(&mut l.grouping.lambda_3d, self.lambda_3d);
        set(&mut l.grouping.knn_k, self.knn_k);
        set(&mut l.grouping.sample_m, self.sample_m);
        set(&mut l.depth.lambda_sh, self.lambda_sh);
        set(&mut l.depth.lambda_gl, self.lambda_gl);
        set(&mut l.depth.gamma, self.gamma);
        set(&mut l.depth.patch_size, self.patch_size);
        set(&mut l.depth.hard_override_omega, self.hard_override_omega);
        set(&mut l.depth.align_prior, self.align_prior);
        if let Some(s) = self.gl_source {
            l.depth.gl_source = match s {
                GlSource::Soft => DepthSource::Soft,
                GlSource::Hard => DepthSource::Hard,
            };
        }

        let c = &mut config.control;
        set(&mut c.densify_interval, self.densify_interval);
        set(&mut c.densify_from, self.densify_from);
        set(&mut c.densify_until, self.densify_until);
        set(&mut c.grad_threshold, self.grad_threshold);
        set(&mut c.split_scale_threshold, self.split_scale_threshold);
        set(&mut c.roi_prob_threshold, self.roi_prob_threshold);
        set(&mut c.semantic_prune_from, self.semantic_prune_from);
        set(&mut c.opacity_prune_eps, self.opacity_prune_eps);
        set(&mut c.mask_dilation_px, self.mask_dilation_px);
    }
}

/// Options that may come either from the command line or from a file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CliOverrides {
    pub iterations: Option<u64>,
    pub init_points: Option<usize>,
    pub seed: Option<u64>,
    pub no_depth_reg: bool,
    pub no_semantic: bool,
}

pub const DEFAULT_SEED: u64 = 0;

/// Combines defaults, the file and the command line. Setting the same
/// option in both places is an error, as is a flag that contradicts a key.
pub fn resolve(file: Option<&ConfigFile>, cli: &CliOverrides) -> std::result::Result<(TrainConfig, u64), String> {
    let empty = ConfigFile::default();
    let file = file.unwrap_or(&empty);
    let mut conflicts = Vec::new();
    let mut clash = |flag: &str, key: &str, both: bool| {
        if both {
            conflicts.push(format!("{flag} conflicts with `{key}` in the config file"));
        }
    };
    clash("--iters", "iterations", cli.iterations.is_some() && file.iterations.is_some());
    clash("--init-points", "init_points", cli.init_points.is_some() && file.init_points.is_some());
    clash("--seed", "seed", cli.seed.is_some() && file.seed.is_some());
    clash("--no-depth-reg", "lambda_d", cli.no_depth_reg && file.lambda_d.is_some());
    clash("--no-semantic", "lambda_id", cli.no_semantic && file.lambda_id.is_some());
    clash("--no-semantic", "semantic", cli.no_semantic && file.semantic.is_some());
    if !conflicts.is_empty() {
        return Err(conflicts.join("; "));
    }

    let mut config = TrainConfig::default();
    file.apply(&mut config);
    set(&mut config.iterations, cli.iterations);
    set(&mut config.init_points, cli.init_points);
    if cli.no_depth_reg {
        config = config.without_depth_reg();
    }
    if cli.no_semantic {
        config = config.without_semantics();
    }
    config.check().map_err(|e| e.to_string())?;
    Ok((config, cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_keys_override_defaults() {
        let file = ConfigFile::parse("iterations = 900\nlambda_d = 0.5\ngl_source = \"hard\"\ndensify_until = 800").unwrap();
        let (c, seed) = resolve(Some(&file), &CliOverrides::default()).unwrap();
        assert_eq!(c.iterations, 900);
        assert_eq!(c.loss.lambda_d, 0.5);
        assert_eq!(c.loss.depth.gl_source, DepthSource::Hard);
        assert_eq!(c.control.densify_until, 800);
        assert_eq!(seed, DEFAULT_SEED);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ConfigFile::parse("iteratons = 3").unwrap_err();
        assert!(err.contains("iteratons"), "{err}");
    }

    #[test]
    fn a_flag_and_a_key_for_the_same_setting_conflict() {
        let file = ConfigFile::parse("iterations = 10\nlambda_id = 2.0").unwrap();
        let cli = CliOverrides { iterations: Some(5), no_semantic: true, ..Default::default() };
        let err = resolve(Some(&file), &cli).unwrap_err();
        assert!(err.contains("--iters") && err.contains("lambda_id"), "{err}");
    }

    #[test]
    fn ablation_flags_zero_their_weights() {
        let cli = CliOverrides { no_depth_reg: true, no_semantic: true, seed: Some(4), ..Default::default() };
        let (c, seed) = resolve(None, &cli).unwrap();
        assert_eq!(c.loss.lambda_d, 0.0);
        assert_eq!(c.loss.lambda_id, 0.0);
        assert!(!c.semantic);
        assert_eq!(seed, 4);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let file = ConfigFile::parse("lambda_dssim = 1.5").unwrap();
        assert!(resolve(Some(&file), &CliOverrides::default()).is_err());
    }
}
