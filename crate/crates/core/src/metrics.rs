//! Fidelity (PSNR, SSIM) and temporal-consistency metrics (warping errors
//! and interpolation error) for frame sequences.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames_io::{FrameSequence, RgbImage};
use crate::separation::flow::{backward_warp, flow_between, FlowBackend, FlowError, FlowField, PairIndex};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
/// Forward-backward consistency threshold, in normalized units.
pub const OCCLUSION_THRESHOLD: f64 = 0.01;
/// Pairs whose consistency mask covers less than this fraction get flagged.
pub const MIN_COVERAGE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least {needed} frames, got {found}")]
    TooFewFrames { needed: usize, found: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

type Result<T> = std::result::Result<T, MetricsError>;

fn same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.pixels().dim() != b.pixels().dim() {
        return Err(MetricsError::ShapeMismatch(format!("{:?} vs {:?}", a.pixels().dim(), b.pixels().dim())));
    }
    Ok(())
}

fn same_length(a: &FrameSequence, b: &FrameSequence) -> Result<()> {
    if a.len() != b.len() {
        return Err(MetricsError::ShapeMismatch(format!("{} frames vs {}", a.len(), b.len())));
    }
    Ok(())
}

pub fn mse_image(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_shape(a, b)?;
    Ok((a.pixels() - b.pixels()).mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// `10·log10(1/MSE)` on the [0, 1] scale, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

pub fn psnr_image(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(psnr_from_mse(mse_image(a, b)?))
}

/// Mean of per-frame PSNR.
pub fn psnr_sequence(a: &FrameSequence, b: &FrameSequence) -> Result<f64> {
    same_length(a, b)?;
    let per: Vec<f64> = a.frames().iter().zip(b.frames()).map(|(x, y)| psnr_image(x, y)).collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filtering keeping only positions where the window fits.
fn filter_valid(img: ArrayView2<'_, f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h, w + 1 - n), |(y, x)| (0..n).map(|i| img[[y, x + i]] * k[i]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(y, x)| (0..n).map(|i| rows[[y + i, x]] * k[i]).sum::<f64>())
}

/// Mean SSIM over channels with an 11×11 Gaussian window (σ = 1.5) and the
/// usual constants for a unit dynamic range. Images smaller than the window
/// use the largest odd window that fits.
pub fn ssim_image(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_shape(a, b)?;
    let side = a.height().min(a.width()).min(11);
    let size = if side % 2 == 0 { side - 1 } else { side };
    let k = gaussian_kernel(size, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..3 {
        let x = a.pixels().index_axis(Axis(2), c).to_owned();
        let y = b.pixels().index_axis(Axis(2), c).to_owned();
        let mu_x = filter_valid(x.view(), &k);
        let mu_y = filter_valid(y.view(), &k);
        let xx = filter_valid((&x * &x).view(), &k);
        let yy = filter_valid((&y * &y).view(), &k);
        let xy = filter_valid((&x * &y).view(), &k);
        let mut sum = 0.0;
        ndarray::Zip::from(&mu_x).and(&mu_y).and(&xx).and(&yy).and(&xy).for_each(|mx, my, sxx, syy, sxy| {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        });
        total += sum / mu_x.len() as f64;
    }
    Ok(total / 3.0)
}

pub fn ssim_sequence(a: &FrameSequence, b: &FrameSequence) -> Result<f64> {
    same_length(a, b)?;
    let per: Vec<f64> = a.frames().iter().zip(b.frames()).map(|(x, y)| ssim_image(x, y)).collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Memoizes flows by frame pair so metrics sharing pairs query the backend
/// once.
pub struct FlowCache<'a> {
    backend: &'a mut dyn FlowBackend,
    flows: HashMap<PairIndex, FlowField>,
}

impl<'a> FlowCache<'a> {
    pub fn new(backend: &'a mut dyn FlowBackend) -> Self {
        Self {
            backend,
            flows: HashMap::new(),
        }
    }

    pub fn get(&mut self, video: &FrameSequence, from: usize, to: usize) -> Result<&FlowField> {
        let pair = PairIndex { from, to };
        if !self.flows.contains_key(&pair) {
            let flow = flow_between(video.frame(from), video.frame(to), pair, self.backend)?;
            self.flows.insert(pair, flow);
        }
        Ok(&self.flows[&pair])
    }
}

/// Error of one target/source pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub target: usize,
    pub source: usize,
    pub mse: f64,
    /// Fraction of target pixels kept by the occlusion mask.
    pub coverage: f64,
}

/// Masked MSE between frame `target` and frame `source` warped onto it. The
/// warp follows `flow(target → source)`; pixels fail the occlusion mask when
/// `flow(source → target)` does not bring them back within the threshold.
pub fn masked_pair_error(video: &FrameSequence, flows: &mut FlowCache<'_>, target: usize, source: usize) -> Result<PairError> {
    let fwd = flows.get(video, target, source)?.clone();
    let back = flows.get(video, source, target)?;
    let (warped, in_bounds) = backward_warp(video.frame(source).view(), &fwd)?;
    let (h, w) = (video.height(), video.width());
    let tgt = video.frame(target).pixels();
    let (mut sum, mut kept) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !in_bounds[[y, x]] {
                continue;
            }
            let (du, dv) = fwd.get(x, y).expect("in-bounds pixels have valid flow");
            let Some((bu, bv)) = back.sample(x as f64 + du * w as f64, y as f64 + dv * h as f64) else {
                continue;
            };
            if ((du + bu).powi(2) + (dv + bv).powi(2)).sqrt() >= OCCLUSION_THRESHOLD {
                continue;
            }
            for c in 0..3 {
                let d = tgt[[y, x, c]] - warped[[y, x, c]];
                sum += d * d;
            }
            kept += 1;
        }
    }
    Ok(PairError {
        target,
        source,
        mse: if kept > 0 { sum / (3 * kept) as f64 } else { 0.0 },
        coverage: kept as f64 / (h * w) as f64,
    })
}

/// Warping error over a list of pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpError {
    /// Mean masked MSE over pairs with a non-empty mask.
    pub value: f64,
    pub pairs: Vec<PairError>,
    /// False when some pair's mask covers less than [`MIN_COVERAGE`]; the
    /// value is then not representative.
    pub coverage_ok: bool,
}

fn summarize(pairs: Vec<PairError>) -> WarpError {
    let counted: Vec<f64> = pairs.iter().filter(|p| p.coverage > 0.0).map(|p| p.mse).collect();
    let value = if counted.is_empty() { 0.0 } else { counted.iter().sum::<f64>() / counted.len() as f64 };
    WarpError {
        value,
        coverage_ok: pairs.iter().all(|p| p.coverage >= MIN_COVERAGE),
        pairs,
    }
}

fn need_frames(video: &FrameSequence, needed: usize) -> Result<()> {
    if video.len() < needed {
        return Err(MetricsError::TooFewFrames { needed, found: video.len() });
    }
    Ok(())
}

/// Consecutive pairs: frame `t+1` against frame `t` warped onto it.
pub fn warp_error_short_cached(video: &FrameSequence, flows: &mut FlowCache<'_>) -> Result<WarpError> {
    need_frames(video, 2)?;
    let pairs = (0..video.len() - 1)
        .map(|t| masked_pair_error(video, flows, t + 1, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(pairs))
}

/// Anchor pairs: every frame `t ≥ 1` against frame 0 warped onto it.
pub fn warp_error_long_cached(video: &FrameSequence, flows: &mut FlowCache<'_>) -> Result<WarpError> {
    need_frames(video, 2)?;
    let pairs = (1..video.len())
        .map(|t| masked_pair_error(video, flows, t, 0))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(pairs))
}

pub fn warp_error_short(video: &FrameSequence, backend: &mut dyn FlowBackend) -> Result<WarpError> {
    warp_error_short_cached(video, &mut FlowCache::new(backend))
}

pub fn warp_error_long(video: &FrameSequence, backend: &mut dyn FlowBackend) -> Result<WarpError> {
    warp_error_long_cached(video, &mut FlowCache::new(backend))
}

/// Per interior frame, RMSE on the 0–255 scale between the frame and the
/// mean of its two neighbors warped onto it, over pixels both warps reach.
/// Frames where no pixel qualifies are skipped.
pub fn interp_error_cached(video: &FrameSequence, flows: &mut FlowCache<'_>) -> Result<(f64, Vec<Option<f64>>)> {
    need_frames(video, 3)?;
    let (h, w) = (video.height(), video.width());
    let mut per_frame = vec![None; video.len()];
    for t in 1..video.len() - 1 {
        let (prev, prev_ok) = backward_warp(video.frame(t - 1).view(), flows.get(video, t, t - 1)?)?;
        let (next, next_ok) = backward_warp(video.frame(t + 1).view(), flows.get(video, t, t + 1)?)?;
        let cur = video.frame(t).pixels();
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                if !(prev_ok[[y, x]] && next_ok[[y, x]]) {
                    continue;
                }
                for c in 0..3 {
                    let d = 255.0 * (cur[[y, x, c]] - 0.5 * (prev[[y, x, c]] + next[[y, x, c]]));
                    sum += d * d;
                }
                n += 3;
            }
        }
        if n > 0 {
            per_frame[t] = Some((sum / n as f64).sqrt());
        }
    }
    let vals: Vec<f64> = per_frame.iter().flatten().copied().collect();
    let mean = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    Ok((mean, per_frame))
}

pub fn interp_error(video: &FrameSequence, backend: &mut dyn FlowBackend) -> Result<f64> {
    Ok(interp_error_cached(video, &mut FlowCache::new(backend))?.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerFrame {
    /// Entry `t` is the pair ending at frame `t` (none for frame 0).
    pub short_warp: Vec<Option<f64>>,
    pub long_warp: Vec<Option<f64>>,
    pub interp_error: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub psnr: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ssim: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub short_warp: f64,
    pub long_warp: f64,
    pub interp_error: f64,
    /// False when some anchor pair's mask collapsed; `long_warp` is then
    /// not representative.
    pub long_coverage_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub per_frame: PerFrame,
}

impl ConsistencyReport {
    /// All three consistency metrics, plus PSNR/SSIM when `reference` is
    /// given.
    pub fn compute(video: &FrameSequence, backend: &mut dyn FlowBackend, reference: Option<&FrameSequence>) -> Result<Self> {
        need_frames(video, 3)?;
        let mut flows = FlowCache::new(backend);
        let short = warp_error_short_cached(video, &mut flows)?;
        let long = warp_error_long_cached(video, &mut flows)?;
        let (interp, interp_frames) = interp_error_cached(video, &mut flows)?;
        let by_target = |w: &WarpError| {
            let mut v = vec![None; video.len()];
            for p in &w.pairs {
                if p.coverage > 0.0 {
                    v[p.target] = Some(p.mse);
                }
            }
            v
        };
        let mut per_frame = PerFrame {
            short_warp: by_target(&short),
            long_warp: by_target(&long),
            interp_error: interp_frames,
            ..PerFrame::default()
        };
        let (mut psnr, mut ssim) = (None, None);
        if let Some(reference) = reference {
            same_length(video, reference)?;
            per_frame.psnr = video.frames().iter().zip(reference.frames()).map(|(a, b)| psnr_image(a, b)).collect::<Result<_>>()?;
            per_frame.ssim = video.frames().iter().zip(reference.frames()).map(|(a, b)| ssim_image(a, b)).collect::<Result<_>>()?;
            psnr = Some(per_frame.psnr.iter().sum::<f64>() / video.len() as f64);
            ssim = Some(per_frame.ssim.iter().sum::<f64>() / video.len() as f64);
        }
        Ok(Self {
            short_warp: short.value,
            long_warp: long.value,
            interp_error: interp,
            long_coverage_ok: long.coverage_ok,
            psnr,
            ssim,
            per_frame,
        })
    }

    /// One row per frame; empty cells where a metric does not apply.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("frame,short_warp,long_warp,interp_error,psnr,ssim\n");
        for t in 0..self.per_frame.short_warp.len() {
            out.push_str(&format!(
                "{t},{},{},{},{},{}\n",
                cell(self.per_frame.short_warp[t]),
                cell(self.per_frame.long_warp[t]),
                cell(self.per_frame.interp_error[t]),
                cell(self.per_frame.psnr.get(t).copied()),
                cell(self.per_frame.ssim.get(t).copied()),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::separation::flow::{AnalyticFlow, ZeroFlow};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, h: usize, w: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = noise(1, 16, 16);
        assert_eq!(psnr_image(&a, &a).unwrap(), PSNR_CAP);
        let zeros = RgbImage::filled(16, 16, [0.0; 3]).unwrap();
        let ones = RgbImage::filled(16, 16, [1.0; 3]).unwrap();
        assert_eq!(psnr_image(&zeros, &ones).unwrap(), 0.0);
        let half = RgbImage::filled(16, 16, [0.5; 3]).unwrap();
        let offset = RgbImage::filled(16, 16, [0.6; 3]).unwrap();
        assert!((psnr_image(&half, &offset).unwrap() - 20.0).abs() < 1e-9);
        let b = noise(2, 16, 16);
        assert_eq!(psnr_image(&a, &b).unwrap(), psnr_image(&b, &a).unwrap());
    }

    #[test]
    fn ssim_examples() {
        let a = noise(1, 24, 24);
        assert!((ssim_image(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = noise(2, 24, 24);
        let s = ssim_image(&a, &b).unwrap();
        assert!(s < 0.1 && s > -1.0);
        assert!((s - ssim_image(&b, &a).unwrap()).abs() < 1e-12);
        assert!(matches!(ssim_image(&a, &noise(3, 20, 24)), Err(MetricsError::ShapeMismatch(_))));
    }

    #[test]
    fn independent_noise_warp_error_is_twice_variance() {
        let video = FrameSequence::new(vec![noise(5, 64, 64), noise(6, 64, 64), noise(7, 64, 64)]).unwrap();
        let e = warp_error_short(&video, &mut ZeroFlow).unwrap();
        // uniform noise variance is 1/12
        assert!((e.value - 2.0 / 12.0).abs() < 0.01, "{}", e.value);
    }

    #[test]
    fn cross_fade_has_zero_interpolation_error() {
        let (a, b) = (RgbImage::filled(8, 8, [0.0, 0.2, 1.0]).unwrap(), RgbImage::filled(8, 8, [1.0, 0.6, 0.0]).unwrap());
        let frames = (0..5)
            .map(|t| {
                let s = t as f64 / 4.0;
                RgbImage::new(a.pixels() * (1.0 - s) + b.pixels() * s).unwrap()
            })
            .collect();
        let video = FrameSequence::new(frames).unwrap();
        assert!(interp_error(&video, &mut ZeroFlow).unwrap() < 1e-9);
    }

    #[test]
    fn different_scene_collapses_long_coverage() {
        let base = noise(1, 32, 32);
        let other = noise(9, 32, 32);
        let video = FrameSequence::new(vec![base.clone(), base.clone(), other.clone(), other]).unwrap();
        // flow backend that finds no consistent match across the cut
        let mut backend = AnalyticFlow::new(|p: PairIndex, _, _| {
            let same_shot = (p.from < 2) == (p.to < 2);
            if same_shot {
                Some((0.0, 0.0))
            } else {
                None
            }
        });
        let long = warp_error_long(&video, &mut backend).unwrap();
        assert!(!long.coverage_ok);
        assert_eq!(long.pairs[0].coverage, 1.0);
    }

    #[test]
    fn report_csv_has_a_row_per_frame() {
        let video = FrameSequence::new(vec![noise(1, 16, 16); 4]).unwrap();
        let report = ConsistencyReport::compute(&video, &mut ZeroFlow, Some(&video)).unwrap();
        assert_eq!(report.short_warp, 0.0);
        assert_eq!(report.psnr, Some(PSNR_CAP));
        assert_eq!(report.to_csv().lines().count(), 5);
    }
}
