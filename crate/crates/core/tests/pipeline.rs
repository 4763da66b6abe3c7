use narcan_core::editing::render_edited_video;
use narcan_core::fields::checkpoint::quantize_to_f32;
use narcan_core::fields::FieldConfig;
use narcan_core::frames_io::CanvasSpec;
use narcan_core::metrics::psnr_sequence;
use narcan_core::separation::{load_model_set, plan_segments, render_sequence, save_model_set, train_segments};
use narcan_core::synthetic::homography_scene;
use narcan_core::training::{PriorSchedule, TrainConfig};
use narcan_core::{Error, EXIT_USER};

fn small(iters: usize) -> TrainConfig {
    TrainConfig {
        total_iters: iters,
        batch_pixels: 512,
        lr_homography: 1e-3,
        lr_canonical: 1e-2,
        lr_decay: 0.1,
        use_residual: false,
        use_prior: false,
        fields: FieldConfig {
            pe_freqs_spatial: 2,
            pe_freqs_time: 1,
            pe_freqs_canonical: 5,
            layers_g: vec![16],
            layers_f: vec![48; 3],
        },
        ..TrainConfig::default()
    }
}

#[test]
fn segmented_fit_survives_save_and_load() {
    let scene = homography_scene(12, 24, 3);
    let plan = plan_segments(12, 2, 4).unwrap();
    let (mut set, reports) = train_segments(&scene.frames, &plan, &small(300), &PriorSchedule::empty(), None).unwrap();
    assert_eq!(reports.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    save_model_set(&set, dir.path(), serde_json::Map::new()).unwrap();
    assert!(dir.path().join("segment_01").is_dir());
    let loaded = load_model_set(dir.path()).unwrap();

    set.models.iter_mut().for_each(quantize_to_f32);
    assert_eq!(loaded, set);
    let psnr = psnr_sequence(&render_sequence(&loaded).unwrap(), &scene.frames).unwrap();
    assert!(psnr > 25.0, "reconstruction {psnr:.2} dB");
}

#[test]
fn unedited_canonical_reproduces_the_render() {
    let scene = homography_scene(8, 24, 5);
    let plan = plan_segments(8, 1, 0).unwrap();
    let (set, _) = train_segments(&scene.frames, &plan, &small(300), &PriorSchedule::empty(), None).unwrap();
    let model = &set.models[0];
    let spec = CanvasSpec::covering(model.canonical_bounds(0.05).unwrap(), 256);
    let canvas = model.render_canonical_raster(&spec).unwrap();

    let plain = render_sequence(&set).unwrap();
    let edited = render_edited_video(&set, &[canvas]).unwrap();
    let psnr = psnr_sequence(&plain, &edited).unwrap();
    assert!(psnr > 35.0, "resampled render {psnr:.2} dB");
}

#[test]
fn user_errors_map_to_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing: Error = load_model_set(&dir.path().join("absent")).unwrap_err().into();
    assert_eq!(missing.exit_code(), EXIT_USER);
    let infeasible: Error = plan_segments(10, 5, 8).unwrap_err().into();
    assert_eq!(infeasible.exit_code(), EXIT_USER);
}
