use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use narcan_cli::config::FlowConfig;
use narcan_cli::*;
use narcan_core::editing::BlendMode;
use narcan_core::frames_io::{export_canonical, import_canonical, load_frames, RasterCanvas};
use narcan_core::metrics::psnr_sequence;
use ndarray::Array3;

const FAST: &str = r#"
log_every = 50
[train]
total_iters = ITERS
TRAIN_EXTRA
batch_pixels = 512
lr_homography = 1e-3
lr_canonical = 1e-2
lr_decay = 0.1
prior_raster_long_side = 32
prior_batch_pixels = 256
[train.fields]
pe_freqs_spatial = 3
pe_freqs_time = 2
pe_freqs_canonical = 5
layers_g = [16, 16]
layers_f = [48, 48, 48]
"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_narcan"));
    cmd.env_remove(narcan_core::prior::PRIOR_URL_ENV);
    cmd
}

/// Writes a fixture plus a config; `train` lands in `[train]`, `extra` is
/// appended. Returns the config path.
fn project(dir: &Path, scene: &str, frames: usize, size: usize, iters: usize, train: &str, extra: &str) -> PathBuf {
    cmd_synthetic(scene, frames, size, 1, &dir.join("scene")).unwrap();
    let fast = FAST.replace("ITERS", &iters.to_string()).replace("TRAIN_EXTRA", train);
    let text = format!("frames_dir = \"scene/frames\"\noutput_dir = \"out\"\nseed = 5\n{fast}{extra}");
    let path = dir.join("narcan.toml");
    fs::write(&path, text).unwrap();
    path
}

const NO_PRIOR: &str = "[schedule]\npreset = \"none\"\n[prior]\nbackend = \"none\"\n";

#[test]
fn fit_writes_checkpoint_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path(), "homography", 6, 24, 60, "", "[schedule]\npreset = \"custom\"\nprior_start_iter = 20\nphases = [{ iter_start = 20, iter_end = 60, noise_strength = 0.3, update_every = 10 }]\n");
    let out = cmd_fit(&cfg, &FitOverrides::default()).unwrap();
    assert_eq!(out.segments, 1);
    assert_eq!(out.prior_updates, 4);
    for f in ["manifest.json", "homography.bin", "residual.bin", "canonical.bin", "report.jsonl"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
    let report = fs::read_to_string(dir.path().join("out/report.jsonl")).unwrap();
    assert!(report.lines().last().unwrap().starts_with("{\"summary\""));
}

#[test]
fn fit_with_three_segments_writes_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path(), "two_shot", 24, 16, 20, "", NO_PRIOR);
    let overrides = FitOverrides {
        k: Some(3),
        overlap: Some(3),
        ..Default::default()
    };
    let out = cmd_fit(&cfg, &overrides).unwrap();
    assert_eq!(out.segments, 3);
    let root = dir.path().join("out");
    for i in 0..3 {
        let seg = root.join(format!("segment_{i:02}"));
        assert!(seg.join("canonical.bin").is_file());
        assert!(seg.join("report.jsonl").is_file());
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(root.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["plan"]["k"], 3);
    assert_eq!(manifest["segments"].as_array().unwrap().len(), 3);
}

#[test]
fn refit_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path(), "hybrid", 5, 16, 40, "", "[prior]\nbackend = \"mock_blur\"\n[schedule]\npreset = \"per_step\"\nprior_start_iter = 20\n");
    let files = ["manifest.json", "homography.bin", "residual.bin", "canonical.bin", "report.jsonl"];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = FitOverrides {
            output_dir: Some(out.clone()),
            ..Default::default()
        };
        cmd_fit(&cfg, &o).unwrap();
    }
    for f in files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_frames_dir_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("narcan.toml");
    fs::write(&cfg, "frames_dir = \"nowhere\"\noutput_dir = \"out\"\n").unwrap();
    let out = bin().args(["fit", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn unreachable_backend_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(
        dir.path(),
        "homography",
        4,
        16,
        30,
        "",
        "[schedule]\npreset = \"per_step\"\nprior_start_iter = 10\n[prior]\nbackend = \"http\"\nurl = \"http://127.0.0.1:9\"\n",
    );
    let out = bin().args(["fit", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["ablate", "--config", "x.toml", "--variant", "no_canvas"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["plan", "--synthetic", "spiral", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["metrics", "--video"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn render_export_and_edit_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path(), "homography", 8, 32, 600, "use_residual = false", NO_PRIOR);
    cmd_fit(&cfg, &FitOverrides::default()).unwrap();
    let ckpt = dir.path().join("out");
    let input = load_frames(&dir.path().join("scene/frames"), "*.png").unwrap();

    let recon_dir = dir.path().join("recon");
    cmd_render(&ckpt, &EditSource::None, &recon_dir).unwrap();
    let recon = load_frames(&recon_dir, "*.png").unwrap();
    let psnr = psnr_sequence(&recon, &input).unwrap();
    assert!(psnr >= 35.0, "reconstruction {psnr:.2} dB");

    let canon = dir.path().join("canon/c.png");
    cmd_export_canonical(&ckpt, &canon, &ExportOptions::default()).unwrap();
    let via_canvas = dir.path().join("via_canvas");
    cmd_render(&ckpt, &EditSource::Files(vec![canon.clone()]), &via_canvas).unwrap();
    let same = psnr_sequence(&load_frames(&via_canvas, "*.png").unwrap(), &recon).unwrap();
    assert!(same >= 35.0, "unedited canonical render {same:.2} dB from reconstruction");

    // red square overlay in the middle of the canonical
    let base = import_canonical(&canon, None).unwrap();
    let (h, w) = (base.height(), base.width());
    let layer = Array3::from_shape_fn((h, w, 4), |(y, x, c)| {
        let inside = (h * 2 / 5..h * 3 / 5).contains(&y) && (w * 2 / 5..w * 3 / 5).contains(&x);
        match (inside, c) {
            (true, 0) | (true, 3) => 1.0,
            _ => 0.0,
        }
    });
    let edit_path = dir.path().join("edited.png");
    let edit_canvas = RasterCanvas::new(layer, base.origin(), base.scale()).unwrap();
    export_canonical(&edit_canvas, &edit_path).unwrap();
    fs::remove_file(dir.path().join("edited.canonical.json")).unwrap();
    let edits = dir.path().join("edits");
    cmd_import_edit(&canon, &edit_path, &edits, BlendMode::AlphaOver, true).unwrap();
    let edited_dir = dir.path().join("edited_frames");
    let r = cmd_render(&ckpt, &EditSource::Directory(edits), &edited_dir).unwrap();
    assert!(r.edited);
    let edited = load_frames(&edited_dir, "*.png").unwrap();
    for t in 0..edited.len() {
        let red = edited
            .frame(t)
            .pixels()
            .outer_iter()
            .flat_map(|row| row.outer_iter().map(|p| (p[0], p[1], p[2])).collect::<Vec<_>>())
            .filter(|&(r, g, b)| r > 0.9 && g < 0.1 && b < 0.1)
            .count();
        assert!(red > 0, "frame {t} lacks the edit");
    }
}

#[test]
fn grid_export_splits_back_per_segment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path(), "pan", 12, 16, 20, "", NO_PRIOR);
    let o = FitOverrides {
        k: Some(2),
        overlap: Some(4),
        ..Default::default()
    };
    cmd_fit(&cfg, &o).unwrap();
    let ckpt = dir.path().join("out");
    let grid = dir.path().join("grid.png");
    let exp = cmd_export_canonical(&ckpt, &grid, &ExportOptions { grid: true, ..Default::default() }).unwrap();
    assert!(exp.grid_manifest.unwrap().is_file());
    let edits = dir.path().join("edits");
    let imported = cmd_import_edit(&grid, &grid, &edits, BlendMode::AlphaOver, false).unwrap();
    assert_eq!(imported.files.len(), 2);
    let out = cmd_render(&ckpt, &EditSource::Directory(edits), &dir.path().join("frames")).unwrap();
    assert_eq!(out.frames, 12);
}

#[test]
fn metrics_of_static_video_and_self_comparison() {
    let dir = tempfile::tempdir().unwrap();
    cmd_synthetic("homography", 4, 24, 2, &dir.path().join("scene")).unwrap();
    let frames = load_frames(&dir.path().join("scene/frames"), "*.png").unwrap();
    let still = narcan_core::frames_io::FrameSequence::new(vec![frames.frame(0).clone(); 4]).unwrap();
    let still_dir = dir.path().join("still");
    narcan_core::frames_io::save_frames(&still, &still_dir).unwrap();
    let csv = dir.path().join("m.csv");
    let report = cmd_metrics(&still_dir, Some(&still_dir), &FlowConfig::default(), Some(&csv)).unwrap();
    assert_eq!(report.short_warp, 0.0);
    assert_eq!(report.long_warp, 0.0);
    assert_eq!(report.interp_error, 0.0);
    assert_eq!(report.psnr, Some(99.0));
    assert!((report.ssim.unwrap() - 1.0).abs() < 1e-12);
    assert!(fs::read_to_string(csv).unwrap().lines().count() > 4);
}

#[test]
fn propagated_mask_follows_the_pan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path(), "pan", 6, 24, 400, "use_residual = false", NO_PRIOR);
    cmd_fit(&cfg, &FitOverrides::default()).unwrap();
    let ckpt = dir.path().join("out");
    let canon = dir.path().join("c.png");
    cmd_export_canonical(&ckpt, &canon, &ExportOptions::default()).unwrap();
    let spec = import_canonical(&canon, None).unwrap().spec();
    let disk = Array3::from_shape_fn((spec.height, spec.width, 1), |(y, x, _)| {
        let (u, v) = spec.coord(x, y);
        if (u - 0.5).powi(2) + (v - 0.5).powi(2) < 0.15 * 0.15 {
            1.0
        } else {
            0.0
        }
    });
    let mask_path = dir.path().join("disk.png");
    export_canonical(&RasterCanvas::from_spec(&spec, disk).unwrap(), &mask_path).unwrap();
    let out = cmd_propagate_mask(&ckpt, &[mask_path], &dir.path().join("masks")).unwrap();
    assert_eq!(out.frames, 6);
    let area = std::f64::consts::PI * 0.15 * 0.15;
    assert!((out.coverage[0] - area).abs() < 0.02, "{:?}", out.coverage);
}

#[test]
fn ablation_rows_report_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path(), "hybrid", 4, 16, 30, "", NO_PRIOR);
    let gt = dir.path().join("scene/gt_canonical.png");
    let row = cmd_ablate(&cfg, AblationVariant::NoResidual, Some(&gt)).unwrap();
    assert_eq!(row.variant, AblationVariant::NoResidual);
    assert!(row.canonical.is_file());
    assert!(row.psnr > 0.0 && row.canonical_psnr.is_some());
    assert!(dir.path().join("out/ablate_no_residual/manifest.json").is_file());
}
