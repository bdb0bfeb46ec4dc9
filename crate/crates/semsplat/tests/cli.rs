//! The command-line binary, run as a subprocess.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn semsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semsplat")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SPEC: &str = r#"
seed = 3
mask_dilation_px = 2
[ring]
count = 4
radius = 3.5
elevation = 0.3
focal = 22.0
width = 20
height = 16
[[objects]]
class_id = 1
center = [0.0, 0.0, 0.0]
extent = 0.5
count = 40
color = [0.7, 0.6, 0.2]
"#;

const CONFIG: &str = "iterations = 30\ninit_points = 120\nholdout_interval = 10\ncheckpoint_interval = 10\n\
densify_from = 10\ndensify_until = 25\ndensify_interval = 5\nsemantic_prune_from = 20\nmask_dilation_px = 2\nsample_m = 30\n";

fn synth(dir: &Path) -> String {
    let spec = dir.join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let data = dir.join("data");
    let o = semsplat(&["synth", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data.to_str().unwrap().to_owned()
}

#[test]
fn synth_train_render_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let config = dir.path().join("train.toml");
    fs::write(&config, CONFIG).unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let o = semsplat(&["train", "--data", &data, "--out", run_s, "--config", config.to_str().unwrap(), "--threads", "1", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let log = fs::read_to_string(run.join("metrics.ndjson")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 30);
    assert_eq!(lines[9]["iter"], 10);
    assert!(lines[9]["psnr_holdout"].is_f64());
    assert!(lines[8].get("psnr_holdout").is_none());
    for key in ["l_color", "l_2d", "l_3d", "l_hard", "l_soft", "l_gl", "total", "n_gaussians"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    for name in ["iter_000010.tsgs", "iter_000020.tsgs", "final.tsgs"] {
        assert!(run.join(name).is_file(), "{name}");
    }

    let ckpt = run.join("final.tsgs");
    let ckpt_s = ckpt.to_str().unwrap();
    for (channel, file) in [("color", "c.png"), ("id", "id.png"), ("id-pca", "pca.png"), ("alpha", "a.png"), ("depth-soft", "d.png"), ("depth-hard", "h.pfm")] {
        let out = dir.path().join(file);
        let o = semsplat(&["render", "--checkpoint", ckpt_s, "--data", &data, "--camera", "view:001", "--channel", channel, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{channel}: {}", stderr(&o));
        assert!(out.is_file());
    }
    assert!(dir.path().join("d.range.txt").is_file());
    let depth = semsplat::pfm::read(&dir.path().join("h.pfm")).unwrap();
    assert_eq!((depth.width(), depth.height()), (20, 16));

    // A camera file works without a dataset.
    let cam = dir.path().join("cam.toml");
    let manifest = semsplat::manifest::Manifest::read(&Path::new(&data).join("manifest.toml")).unwrap();
    fs::write(&cam, toml::to_string(&manifest.views[0].camera).unwrap()).unwrap();
    let o = semsplat(&["render", "--checkpoint", ckpt_s, "--camera", cam.to_str().unwrap(), "--out", dir.path().join("x.png").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = semsplat(&["eval", "--checkpoint", ckpt_s, "--data", &data]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert!(lines[0].starts_with("001 PSNR: ") && lines[0].contains("LPIPS: n/a") && lines[0].contains("DepthMAE"));
    assert!(lines[2].starts_with("mean PSNR: "));
}

#[test]
fn conflicting_or_malformed_arguments_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let config = dir.path().join("c.toml");
    fs::write(&config, "iterations = 5\n").unwrap();
    let out = dir.path().join("run");
    let o = semsplat(&["train", "--data", &data, "--out", out.to_str().unwrap(), "--config", config.to_str().unwrap(), "--iters", "3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--iters"), "{}", stderr(&o));

    fs::write(&config, "iterashuns = 5\n").unwrap();
    let o = semsplat(&["train", "--data", &data, "--out", out.to_str().unwrap(), "--config", config.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    assert_eq!(code(&semsplat(&["train", "--bogus"])), 2);
    assert_eq!(code(&semsplat(&["render", "--checkpoint", "x", "--camera", "y", "--out", "z", "--channel", "normals"])), 2);
}

#[test]
fn invalid_data_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    fs::remove_file(Path::new(&data).join("masks/002.png")).unwrap();
    let out = dir.path().join("run");
    let o = semsplat(&["train", "--data", &data, "--out", out.to_str().unwrap(), "--iters", "2"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("view 002"), "{}", stderr(&o));
}

#[test]
fn a_diverging_run_exits_with_four_and_saves_its_state() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let config = dir.path().join("c.toml");
    // Valid weights whose product with the identity loss overflows.
    fs::write(&config, "iterations = 20\ninit_points = 50\nlambda_id = 1e308\nlambda_2d = 4.0\n").unwrap();
    let out = dir.path().join("run");
    let o = semsplat(&["train", "--data", &data, "--out", out.to_str().unwrap(), "--config", config.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let ck = semsplat::checkpoint::load(&out.join("abort.tsgs")).unwrap();
    assert_eq!(ck.iteration, 0);
    assert!(stderr(&o).contains("iteration 0"), "{}", stderr(&o));
}

#[test]
fn colmap_text_becomes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cameras.txt"), "1 PINHOLE 20 16 22 22 10 8\n").unwrap();
    fs::write(dir.path().join("images.txt"), "1 1 0 0 0 0 0 3.5 1 a.png\n\n2 1 0 0 0 0.1 0 3.5 1 b.png\n\n").unwrap();
    let out = dir.path().join("manifest.toml");
    let o = semsplat(&["colmap", "--sparse", dir.path().to_str().unwrap(), "--out", out.to_str().unwrap(), "--instances", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = semsplat::manifest::Manifest::read(&out).unwrap();
    assert_eq!(m.views.len(), 2);
    assert_eq!(m.views[1].camera.translation, [0.1, 0.0, 3.5]);
}
