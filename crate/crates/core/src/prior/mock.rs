use ndarray::Array3;

use super::{AdapterHandle, FinetuneSpec, PriorError, PriorProvider, Result};
use crate::frames_io::RasterCanvas;

/// Test doubles. Each blends the input toward its own "denoised" image with
/// weight equal to the noise strength.
#[derive(Debug, Clone, PartialEq)]
pub enum MockPriorKind {
    /// Pulls toward a fixed reference raster of matching geometry.
    Oracle(RasterCanvas),
    Identity,
    /// Pulls toward a box blur of the input.
    Blur { radius: usize },
}

/// Arguments of one recorded fine-tuning call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinetuneCall {
    pub frame_count: usize,
    pub token: String,
    pub steps: usize,
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct MockPrior {
    kind: MockPriorKind,
    supports_finetune: bool,
    finetune_calls: Vec<FinetuneCall>,
    generate_calls: usize,
    adapter: Option<AdapterHandle>,
}

impl MockPrior {
    pub fn new(kind: MockPriorKind) -> Self {
        Self {
            kind,
            supports_finetune: false,
            finetune_calls: Vec::new(),
            generate_calls: 0,
            adapter: None,
        }
    }

    pub fn with_finetune(mut self, enabled: bool) -> Self {
        self.supports_finetune = enabled;
        self
    }

    pub fn kind(&self) -> &MockPriorKind {
        &self.kind
    }

    pub fn finetune_calls(&self) -> &[FinetuneCall] {
        &self.finetune_calls
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls
    }
}

fn box_blur(pixels: &Array3<f64>, radius: usize) -> Array3<f64> {
    if radius == 0 {
        return pixels.clone();
    }
    let (h, w, c) = pixels.dim();
    let r = radius as isize;
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let mut sum = 0.0;
        let mut n = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    sum += pixels[[yy as usize, xx as usize, ch]];
                    n += 1.0;
                }
            }
        }
        sum / n
    })
}

impl PriorProvider for MockPrior {
    fn name(&self) -> &str {
        match self.kind {
            MockPriorKind::Oracle(_) => "mock-oracle",
            MockPriorKind::Identity => "mock-identity",
            MockPriorKind::Blur { .. } => "mock-blur",
        }
    }

    fn supports_finetune(&self) -> bool {
        self.supports_finetune
    }

    fn generate(&mut self, canvas: &RasterCanvas, s: f64, _prompt: &str, _seed: u64) -> Result<RasterCanvas> {
        self.generate_calls += 1;
        let denoised = match &self.kind {
            MockPriorKind::Identity => return Ok(canvas.clone()),
            MockPriorKind::Oracle(reference) => {
                if !reference.same_geometry(canvas) || reference.channels() != canvas.channels() {
                    return Err(PriorError::GeometryMismatch(format!(
                        "oracle reference {:?} vs queried canvas {:?}",
                        reference.spec(),
                        canvas.spec()
                    )));
                }
                reference.pixels().clone()
            }
            MockPriorKind::Blur { radius } => box_blur(canvas.pixels(), *radius),
        };
        let mut out = canvas.clone();
        ndarray::Zip::from(out.pixels_mut())
            .and(&denoised)
            .for_each(|o, &d| *o = (1.0 - s) * *o + s * d);
        Ok(out)
    }

    fn run_finetune(&mut self, spec: &FinetuneSpec<'_>) -> Result<AdapterHandle> {
        self.finetune_calls.push(FinetuneCall {
            frame_count: spec.frames.len(),
            token: spec.special_token.clone(),
            steps: spec.steps,
            rank: spec.rank,
        });
        let handle = AdapterHandle(format!("mock-adapter-{}", self.finetune_calls.len()));
        self.adapter = Some(handle.clone());
        Ok(handle)
    }

    fn adapter(&self) -> Option<&AdapterHandle> {
        self.adapter.as_ref()
    }
}
