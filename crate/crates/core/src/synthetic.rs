//! Generated videos with known ground truth: an analytic canonical texture,
//! a known per-frame homography, an optional sinusoidal non-rigid warp, and
//! disk masks. They serve as oracles for fitting, editing, and metrics.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fields::homography::{project, HomographyTrajectory};
use crate::frames_io::{
    export_canonical, frame_file_name, normalized_time, pixel_center, save_frames, CanvasSpec, FrameSequence, FramesError,
    RasterCanvas, RgbImage,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Blob {
    center: (f64, f64),
    sigma: f64,
    color: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Wave {
    freq: (f64, f64),
    phase: f64,
    amp: [f64; 3],
}

/// Smooth color function on the whole plane: a base color, a few
/// low-frequency plane waves, and Gaussian blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalTexture {
    base: [f64; 3],
    waves: Vec<Wave>,
    blobs: Vec<Blob>,
}

impl CanonicalTexture {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)];
        let waves = (0..3)
            .map(|_| {
                let angle = rng.random_range(0.0..PI);
                let f = rng.random_range(1.0..3.0);
                Wave {
                    freq: (f * angle.cos(), f * angle.sin()),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp: [rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12)],
                }
            })
            .collect();
        let blobs = (0..7)
            .map(|_| Blob {
                center: (rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2)),
                sigma: rng.random_range(0.06..0.16),
                color: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
            })
            .collect();
        Self { base, waves, blobs }
    }

    pub fn eval(&self, u: f64, v: f64) -> [f64; 3] {
        let mut rgb = self.base;
        for w in &self.waves {
            let s = (2.0 * PI * (w.freq.0 * u + w.freq.1 * v) + w.phase).sin();
            for c in 0..3 {
                rgb[c] += w.amp[c] * s;
            }
        }
        for b in &self.blobs {
            let d2 = (u - b.center.0).powi(2) + (v - b.center.1).powi(2);
            let g = (-d2 / (2.0 * b.sigma * b.sigma)).exp();
            for c in 0..3 {
                rgb[c] += b.color[c] * g;
            }
        }
        rgb.map(|x| x.clamp(0.02, 0.98))
    }

    pub fn raster(&self, spec: &CanvasSpec) -> RasterCanvas {
        let pixels = Array3::from_shape_fn((spec.height, spec.width, 3), |(y, x, c)| {
            let (u, v) = spec.coord(x, y);
            self.eval(u, v)[c]
        });
        RasterCanvas::from_spec(spec, pixels).expect("texture values are finite")
    }
}

/// Non-rigid warp `g(u, v, t) = a·(sin(2π(f·v + t)), sin(2π(f·u + t)))`
/// with amplitude given in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineWarp {
    pub amplitude_px: f64,
    pub spatial_freq: f64,
}

impl SineWarp {
    pub fn offset(&self, u: f64, v: f64, t_norm: f64, height: usize, width: usize) -> (f64, f64) {
        let phase = 2.0 * PI * t_norm;
        (
            self.amplitude_px / width as f64 * (2.0 * PI * self.spatial_freq * v + phase).sin(),
            self.amplitude_px / height as f64 * (2.0 * PI * self.spatial_freq * u + phase).sin(),
        )
    }
}

/// A disk in canonical coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: (f64, f64),
    pub radius: f64,
}

impl Disk {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        (u - self.center.0).powi(2) + (v - self.center.1).powi(2) <= self.radius * self.radius
    }
}

/// One shot: frames `[start, end)` come from this texture under this motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub start: usize,
    pub end: usize,
    pub texture: CanonicalTexture,
}

/// A generated video together with everything that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub frames: FrameSequence,
    /// Frame→canonical homographies used by the generator.
    pub homography: HomographyTrajectory,
    pub warp: Option<SineWarp>,
    pub shots: Vec<Shot>,
    pub disk: Disk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub name: String,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub homographies: Vec<[f64; 8]>,
    pub warp: Option<SineWarp>,
    pub disk: Disk,
    pub shots: Vec<(usize, usize)>,
}

impl SyntheticScene {
    fn generate(
        frame_count: usize,
        size: usize,
        homography: HomographyTrajectory,
        warp: Option<SineWarp>,
        shots: Vec<Shot>,
    ) -> Self {
        let disk = Disk {
            center: (0.5, 0.5),
            radius: 0.15,
        };
        let mut scene = Self {
            frames: FrameSequence::new(vec![RgbImage::filled(size, size, [0.0; 3]).expect("size"); 2]).expect("placeholder"),
            homography,
            warp,
            shots,
            disk,
        };
        let frames = (0..frame_count)
            .map(|t| {
                let texture = &scene.shot_of(t).texture;
                RgbImage::from_fn(size, size, |x, y| {
                    let (u, v) = scene.deform(pixel_center(x, size), pixel_center(y, size), t, frame_count, size);
                    texture.eval(u, v)
                })
                .expect("texture values lie in [0, 1]")
            })
            .collect();
        scene.frames = FrameSequence::new(frames).expect("generated frames agree in size");
        scene
    }

    fn shot_of(&self, t: usize) -> &Shot {
        self.shots.iter().find(|s| s.start <= t && t < s.end).expect("shots cover every frame")
    }

    fn deform(&self, u: f64, v: f64, t: usize, frame_count: usize, size: usize) -> (f64, f64) {
        let (hu, hv) = project(&self.homography.row(t), u, v).expect("generator homographies are regular");
        match self.warp {
            Some(w) => {
                let (du, dv) = w.offset(u, v, normalized_time(t, frame_count), size, size);
                (hu + du, hv + dv)
            }
            None => (hu, hv),
        }
    }

    /// Ground-truth canonical position of pixel `(x, y)` in frame `t`.
    pub fn canonical_position(&self, x: usize, y: usize, t: usize) -> (f64, f64) {
        let (h, w) = (self.frames.height(), self.frames.width());
        self.deform(pixel_center(x, w), pixel_center(y, h), t, self.frames.len(), w.max(h))
    }

    /// The texture of the first shot over the frame-0 footprint `[0, 1]²`
    /// at frame resolution.
    pub fn gt_canonical(&self) -> RasterCanvas {
        self.shots[0].texture.raster(&self.frame_spec())
    }

    /// Raster geometry whose pixels coincide with frame-0 pixel centers.
    pub fn frame_spec(&self) -> CanvasSpec {
        let (h, w) = (self.frames.height(), self.frames.width());
        CanvasSpec {
            origin_u: pixel_center(0, w),
            origin_v: pixel_center(0, h),
            scale: 1.0 / w as f64,
            height: h,
            width: w,
        }
    }

    /// Per-frame ground-truth masks of the canonical disk.
    pub fn gt_masks(&self) -> Vec<Array2<bool>> {
        let (h, w) = (self.frames.height(), self.frames.width());
        (0..self.frames.len())
            .map(|t| {
                Array2::from_shape_fn((h, w), |(y, x)| {
                    let (u, v) = self.canonical_position(x, y, t);
                    self.disk.contains(u, v)
                })
            })
            .collect()
    }

    /// The disk as a one-channel canvas of the given geometry.
    pub fn disk_canvas(&self, spec: &CanvasSpec) -> RasterCanvas {
        let pixels = Array3::from_shape_fn((spec.height, spec.width, 1), |(y, x, _)| {
            let (u, v) = spec.coord(x, y);
            if self.disk.contains(u, v) {
                1.0
            } else {
                0.0
            }
        });
        RasterCanvas::from_spec(spec, pixels).expect("binary values")
    }

    pub fn meta(&self, name: &str) -> SceneMeta {
        SceneMeta {
            name: name.to_string(),
            frame_count: self.frames.len(),
            height: self.frames.height(),
            width: self.frames.width(),
            homographies: (0..self.homography.len()).map(|t| self.homography.row(t)).collect(),
            warp: self.warp,
            disk: self.disk,
            shots: self.shots.iter().map(|s| (s.start, s.end)).collect(),
        }
    }

    /// Writes `frames/`, `gt_canonical.png` (+ sidecar), `masks/`, and
    /// `scene.json` under `dir`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<(), FramesError> {
        let frames_dir = dir.join("frames");
        save_frames(&self.frames, &frames_dir)?;
        export_canonical(&self.gt_canonical(), &dir.join("gt_canonical.png"))?;
        let masks_dir = dir.join("masks");
        fs::create_dir_all(&masks_dir).map_err(|source| FramesError::IoFailure {
            path: masks_dir.clone(),
            source,
        })?;
        for (t, mask) in self.gt_masks().iter().enumerate() {
            let img = RgbImage::new(Array3::from_shape_fn((mask.nrows(), mask.ncols(), 3), |(y, x, _)| {
                if mask[[y, x]] {
                    1.0
                } else {
                    0.0
                }
            }))?;
            let bytes = crate::frames_io::png_bytes(img.view())?;
            crate::frames_io::atomic_write(&masks_dir.join(frame_file_name(t)), &bytes)?;
        }
        let disk_spec = self.frame_spec();
        crate::frames_io::export_canonical(&self.disk_canvas(&disk_spec), &dir.join("gt_disk.png"))?;
        let json = serde_json::to_vec_pretty(&self.meta(name)).expect("meta serializes");
        crate::frames_io::atomic_write(&dir.join("scene.json"), &json)
    }
}

/// Smooth camera motion: translation, mild rotation/zoom, and a touch of
/// perspective, all starting from identity at frame 0.
pub fn smooth_trajectory(frame_count: usize, magnitude: f64) -> HomographyTrajectory {
    let rows: Vec<[f64; 8]> = (0..frame_count)
        .map(|t| {
            let s = normalized_time(t, frame_count);
            let ramp = (PI * s).sin() * s + s * 0.5;
            let angle = 0.04 * magnitude * (PI * s).sin();
            let zoom = 1.0 + 0.03 * magnitude * s;
            let (c, sn) = (angle.cos() * zoom, angle.sin() * zoom);
            // rotate and zoom about the frame center, then translate
            let (tx, ty) = (0.06 * magnitude * ramp, -0.04 * magnitude * (2.0 * PI * s).sin());
            let cx = 0.5 - (c * 0.5 - sn * 0.5);
            let cy = 0.5 - (sn * 0.5 + c * 0.5);
            [c, -sn, cx + tx, sn, c, cy + ty, 0.02 * magnitude * s, -0.015 * magnitude * s]
        })
        .collect();
    let params = Array2::from_shape_fn((frame_count, 8), |(t, k)| rows[t][k]);
    HomographyTrajectory::from_params(params).expect("mild trajectories are regular")
}

/// Pure horizontal translation oscillating between ±`amplitude_px`.
pub fn oscillating_translation(frame_count: usize, size: usize, amplitude_px: f64) -> HomographyTrajectory {
    let params = Array2::from_shape_fn((frame_count, 8), |(t, k)| match k {
        0 | 4 => 1.0,
        2 => amplitude_px / size as f64 * (2.0 * PI * normalized_time(t, frame_count)).sin(),
        _ => 0.0,
    });
    HomographyTrajectory::from_params(params).expect("translations are regular")
}

/// Translation by `per_frame` normalized units per frame in `u`.
pub fn linear_translation(frame_count: usize, per_frame: f64) -> HomographyTrajectory {
    let params = Array2::from_shape_fn((frame_count, 8), |(t, k)| match k {
        0 | 4 => 1.0,
        2 => per_frame * t as f64,
        _ => 0.0,
    });
    HomographyTrajectory::from_params(params).expect("translations are regular")
}

fn single_shot(frame_count: usize, seed: u64) -> Vec<Shot> {
    vec![Shot {
        start: 0,
        end: frame_count,
        texture: CanonicalTexture::random(seed),
    }]
}

/// Known canonical under a smooth homography trajectory.
pub fn homography_scene(frame_count: usize, size: usize, seed: u64) -> SyntheticScene {
    SyntheticScene::generate(frame_count, size, smooth_trajectory(frame_count, 1.0), None, single_shot(frame_count, seed))
}

/// [`homography_scene`] plus a sinusoidal non-rigid warp.
pub fn hybrid_scene(frame_count: usize, size: usize, seed: u64, amplitude_px: f64) -> SyntheticScene {
    SyntheticScene::generate(
        frame_count,
        size,
        smooth_trajectory(frame_count, 1.0),
        Some(SineWarp {
            amplitude_px,
            spatial_freq: 2.0,
        }),
        single_shot(frame_count, seed),
    )
}

/// Large horizontal camera sway of ±`amplitude_px`.
pub fn translation_scene(frame_count: usize, size: usize, seed: u64, amplitude_px: f64) -> SyntheticScene {
    SyntheticScene::generate(
        frame_count,
        size,
        oscillating_translation(frame_count, size, amplitude_px),
        None,
        single_shot(frame_count, seed),
    )
}

/// Steady pan of `per_frame` normalized units per frame.
pub fn pan_scene(frame_count: usize, size: usize, seed: u64, per_frame: f64) -> SyntheticScene {
    SyntheticScene::generate(frame_count, size, linear_translation(frame_count, per_frame), None, single_shot(frame_count, seed))
}

/// Two shots of different content, cut halfway, under one smooth motion.
pub fn two_shot_scene(frame_count: usize, size: usize, seed: u64) -> SyntheticScene {
    let cut = frame_count / 2;
    let shots = vec![
        Shot {
            start: 0,
            end: cut,
            texture: CanonicalTexture::random(seed),
        },
        Shot {
            start: cut,
            end: frame_count,
            texture: CanonicalTexture::random(seed.wrapping_add(7919)),
        },
    ];
    SyntheticScene::generate(frame_count, size, smooth_trajectory(frame_count, 0.5), None, shots)
}

/// Names accepted by [`scene_by_name`].
pub const SCENE_NAMES: [&str; 5] = ["homography", "hybrid", "translation", "pan", "two_shot"];

/// Builds a named scene with its default motion parameters.
pub fn scene_by_name(name: &str, frame_count: usize, size: usize, seed: u64) -> Option<SyntheticScene> {
    Some(match name {
        "homography" => homography_scene(frame_count, size, seed),
        "hybrid" => hybrid_scene(frame_count, size, seed, 2.0),
        "translation" => translation_scene(frame_count, size, seed, 15.0),
        "pan" => pan_scene(frame_count, size, seed, 0.01),
        "two_shot" => two_shot_scene(frame_count, size, seed),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_zero_matches_canonical_raster() {
        let scene = homography_scene(4, 24, 1);
        let gt = scene.gt_canonical();
        for y in 0..24 {
            for x in 0..24 {
                let f = scene.frames.frame(0).get(x, y);
                for c in 0..3 {
                    assert!((f[c] - gt.pixels()[[y, x, c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pan_moves_content_by_the_stated_rate() {
        let scene = pan_scene(3, 50, 2, 0.02);
        // one pixel is 0.02, so frame 1 at x equals frame 0 at x+1
        for x in 0..49 {
            let a = scene.frames.frame(1).get(x, 10);
            let b = scene.frames.frame(0).get(x + 1, 10);
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn masks_are_disks_at_frame_zero() {
        let scene = translation_scene(5, 32, 3, 15.0);
        let masks = scene.gt_masks();
        let count = masks[0].iter().filter(|v| **v).count() as f64;
        let expected = PI * (0.15f64 * 32.0).powi(2);
        assert!((count - expected).abs() / expected < 0.1);
    }

    #[test]
    fn two_shot_changes_content_at_the_cut() {
        let scene = two_shot_scene(10, 16, 4);
        let a = scene.frames.frame(4).pixels();
        let b = scene.frames.frame(5).pixels();
        let diff = (a - b).mapv(f64::abs).mean().unwrap();
        assert!(diff > 0.02, "{diff}");
    }

    #[test]
    fn scene_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        homography_scene(3, 16, 0).write(dir.path(), "homography").unwrap();
        for f in ["frames/frame_00000.png", "gt_canonical.png", "gt_canonical.canonical.json", "masks/frame_00002.png", "scene.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }
}
