//! Denoising priors that turn the current canonical raster into a target
//! image, plus the scene-adapter fine-tuning hook.
//!
//! A provider is any backend implementing [`PriorProvider`]. The free
//! functions [`generate_target`] and [`finetune`] enforce the contract every
//! provider shares: strength 0 is the identity, geometry is preserved, and
//! fine-tuning is only attempted when the provider advertises it.

mod http;
mod mock;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::frames_io::{FrameSequence, RasterCanvas};

pub use http::{HttpPrior, PRIOR_URL_ENV};
pub use mock::{FinetuneCall, MockPrior, MockPriorKind};

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("prior backend unavailable: {reason} ({retry_hint})")]
    BackendUnavailable { reason: String, retry_hint: String },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("provider `{provider}` does not support {capability}")]
    UnsupportedCapability { provider: String, capability: String },
    #[error("invalid prior input: {0}")]
    InvalidInput(String),
    #[error("prior backend error: {0}")]
    Backend(String),
}

pub type Result<T, E = PriorError> = std::result::Result<T, E>;

/// Identifier of a fine-tuned scene adapter held by a provider.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AdapterHandle(pub String);

/// Request to specialize a provider on one scene.
#[derive(Debug, Clone)]
pub struct FinetuneSpec<'a> {
    pub frames: &'a FrameSequence,
    pub special_token: String,
    pub steps: usize,
    pub rank: usize,
    pub backend_config: BTreeMap<String, String>,
}

impl FinetuneSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.special_token.is_empty() || self.special_token.chars().any(char::is_whitespace) {
            return Err(PriorError::InvalidInput(format!(
                "special token `{}` must be non-empty without whitespace",
                self.special_token
            )));
        }
        if self.steps == 0 {
            return Err(PriorError::InvalidInput("fine-tuning needs at least one step".into()));
        }
        Ok(())
    }
}

/// Prompt used for target generation when none is configured.
pub fn default_prompt(special_token: &str) -> String {
    format!("a photo of {special_token}")
}

pub trait PriorProvider {
    fn name(&self) -> &str;

    fn supports_finetune(&self) -> bool;

    /// Backends that cannot pin their sampling seed report `false`.
    fn is_deterministic(&self) -> bool {
        true
    }

    /// Backend-specific generation; callers go through [`generate_target`].
    fn generate(&mut self, canvas: &RasterCanvas, noise_strength: f64, prompt: &str, seed: u64) -> Result<RasterCanvas>;

    /// Backend-specific fine-tuning; callers go through [`finetune`].
    fn run_finetune(&mut self, spec: &FinetuneSpec<'_>) -> Result<AdapterHandle>;

    /// Adapter used by subsequent generations, if any.
    fn adapter(&self) -> Option<&AdapterHandle>;
}

/// Noises `canvas` to depth `noise_strength` and denoises it with the
/// provider. Strength 0 returns the input without calling the backend.
pub fn generate_target(
    provider: &mut dyn PriorProvider,
    canvas: &RasterCanvas,
    noise_strength: f64,
    prompt: &str,
    seed: u64,
) -> Result<RasterCanvas> {
    if canvas.channels() != 3 {
        return Err(PriorError::InvalidInput(format!(
            "prior canvases are RGB, got {} channels",
            canvas.channels()
        )));
    }
    if !(0.0..=1.0).contains(&noise_strength) {
        return Err(PriorError::InvalidInput(format!("noise strength {noise_strength} outside [0,1]")));
    }
    if noise_strength == 0.0 {
        return Ok(canvas.clone());
    }
    let mut out = provider.generate(canvas, noise_strength, prompt, seed)?;
    if !out.same_geometry(canvas) || out.channels() != 3 {
        return Err(PriorError::GeometryMismatch(format!(
            "provider `{}` returned {:?} for input {:?}",
            provider.name(),
            out.spec(),
            canvas.spec()
        )));
    }
    out.pixels_mut().mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

pub fn finetune(provider: &mut dyn PriorProvider, spec: &FinetuneSpec<'_>) -> Result<AdapterHandle> {
    if !provider.supports_finetune() {
        return Err(PriorError::UnsupportedCapability {
            provider: provider.name().to_string(),
            capability: "fine-tuning".into(),
        });
    }
    spec.validate()?;
    provider.run_finetune(spec)
}

/// Mean of squared channel differences between two canvases of identical
/// geometry and channel count.
pub fn diffusion_loss(current: &RasterCanvas, target: &RasterCanvas) -> Result<f64> {
    if !current.same_geometry(target) || current.channels() != target.channels() {
        return Err(PriorError::GeometryMismatch(format!(
            "current {:?} vs target {:?}",
            current.spec(),
            target.spec()
        )));
    }
    let n = current.pixels().len() as f64;
    Ok(current
        .pixels()
        .iter()
        .zip(target.pixels().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames_io::{CanvasSpec, RgbImage};
    use ndarray::Array3;
    use proptest::prelude::*;

    fn spec(h: usize, w: usize) -> CanvasSpec {
        CanvasSpec {
            origin_u: -0.1,
            origin_v: 0.05,
            scale: 0.01,
            height: h,
            width: w,
        }
    }

    fn patterned(h: usize, w: usize, seed: usize) -> RasterCanvas {
        let px = Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((x * 13 + y * 7 + c * 5 + seed) % 17) as f64 / 16.0);
        RasterCanvas::from_spec(&spec(h, w), px).unwrap()
    }

    #[test]
    fn identity_mock_returns_input() {
        let mut p = MockPrior::new(MockPriorKind::Identity);
        let c = patterned(10, 12, 0);
        assert_eq!(generate_target(&mut p, &c, 0.7, "x", 1).unwrap(), c);
    }

    #[test]
    fn oracle_blends_by_strength() {
        let reference = patterned(10, 12, 3);
        let c = patterned(10, 12, 0);
        let mut p = MockPrior::new(MockPriorKind::Oracle(reference.clone()));
        let out = generate_target(&mut p, &c, 0.4, "x", 1).unwrap();
        for ((o, a), b) in out.pixels().iter().zip(c.pixels()).zip(reference.pixels()) {
            assert!((o - (0.6 * a + 0.4 * b)).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_geometry_mismatch() {
        let mut p = MockPrior::new(MockPriorKind::Oracle(patterned(10, 12, 3)));
        let c = patterned(12, 12, 0);
        assert!(matches!(generate_target(&mut p, &c, 0.4, "x", 1), Err(PriorError::GeometryMismatch(_))));
    }

    #[test]
    fn zero_strength_is_identity_for_every_provider() {
        let c = patterned(9, 9, 1);
        let mut providers: Vec<Box<dyn PriorProvider>> = vec![
            Box::new(MockPrior::new(MockPriorKind::Identity)),
            Box::new(MockPrior::new(MockPriorKind::Blur { radius: 2 })),
            Box::new(MockPrior::new(MockPriorKind::Oracle(patterned(9, 9, 4)))),
            // never contacted: strength 0 short-circuits
            Box::new(HttpPrior::new("http://127.0.0.1:9")),
        ];
        for p in &mut providers {
            assert_eq!(generate_target(p.as_mut(), &c, 0.0, "x", 5).unwrap(), c);
        }
    }

    #[test]
    fn finetune_is_recorded() {
        let frames = FrameSequence::new((0..100).map(|_| RgbImage::filled(8, 8, [0.2; 3]).unwrap()).collect()).unwrap();
        let mut p = MockPrior::new(MockPriorKind::Identity).with_finetune(true);
        let spec = FinetuneSpec {
            frames: &frames,
            special_token: "sks_scene".into(),
            steps: 10,
            rank: 4,
            backend_config: BTreeMap::new(),
        };
        let handle = finetune(&mut p, &spec).unwrap();
        assert_eq!(p.adapter(), Some(&handle));
        assert_eq!(p.finetune_calls()[0].frame_count, 100);
        assert_eq!(p.finetune_calls()[0].token, "sks_scene");
    }

    #[test]
    fn finetune_requires_capability_and_valid_token() {
        let frames = FrameSequence::new((0..2).map(|_| RgbImage::filled(8, 8, [0.2; 3]).unwrap()).collect()).unwrap();
        let mut spec = FinetuneSpec {
            frames: &frames,
            special_token: "tok".into(),
            steps: 1,
            rank: 4,
            backend_config: BTreeMap::new(),
        };
        let mut p = MockPrior::new(MockPriorKind::Identity);
        assert!(matches!(finetune(&mut p, &spec), Err(PriorError::UnsupportedCapability { .. })));
        let mut p = p.with_finetune(true);
        spec.special_token = "two words".into();
        assert!(matches!(finetune(&mut p, &spec), Err(PriorError::InvalidInput(_))));
    }

    #[test]
    fn diffusion_loss_values() {
        let s = spec(8, 8);
        let zeros = RasterCanvas::filled(&s, &[0.0; 3]).unwrap();
        let ones = RasterCanvas::filled(&s, &[1.0; 3]).unwrap();
        assert_eq!(diffusion_loss(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(diffusion_loss(&zeros, &ones).unwrap(), 1.0);
        let c = patterned(8, 8, 2);
        let mut shifted = c.clone();
        shifted.pixels_mut().mapv_inplace(|v| v + 0.1);
        assert!((diffusion_loss(&c, &shifted).unwrap() - 0.01).abs() < 1e-12);
        assert!(diffusion_loss(&c, &patterned(8, 9, 2)).is_err());
    }

    proptest! {
        #[test]
        fn mocks_preserve_geometry_and_are_deterministic(h in 8usize..14, w in 8usize..14, s in 0.0..1.0f64, seed in 0u64..1000, radius in 0usize..3) {
            let c = patterned(h, w, seed as usize);
            let kinds = [
                MockPriorKind::Identity,
                MockPriorKind::Blur { radius },
                MockPriorKind::Oracle(patterned(h, w, 7)),
            ];
            for kind in kinds {
                let mut p = MockPrior::new(kind.clone());
                let a = generate_target(&mut p, &c, s, "p", seed).unwrap();
                let mut q = MockPrior::new(kind);
                let b = generate_target(&mut q, &c, s, "p", seed).unwrap();
                prop_assert!(a.same_geometry(&c));
                prop_assert_eq!(a.pixels(), b.pixels());
                prop_assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
