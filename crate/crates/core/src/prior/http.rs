//! Adapter for an external diffusion service speaking a small JSON protocol:
//!
//! * `POST /finetune {frames: [base64 PNG], token, steps, rank}` → `{adapter_id}`
//! * `POST /img2img {image: base64 PNG, strength, prompt, seed, adapter_id}` → `{image: base64 PNG}`

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{AdapterHandle, FinetuneSpec, PriorError, PriorProvider, Result};
use crate::frames_io::{decode_png, png_bytes, resize_bilinear, RasterCanvas};

/// Environment variable naming the service base URL.
pub const PRIOR_URL_ENV: &str = "NARCAN_PRIOR_URL";

#[derive(Serialize)]
struct FinetuneRequest<'a> {
    frames: Vec<String>,
    token: &'a str,
    steps: usize,
    rank: usize,
}

#[derive(Deserialize)]
struct FinetuneResponse {
    adapter_id: String,
}

#[derive(Serialize)]
struct Img2ImgRequest<'a> {
    image: String,
    strength: f64,
    prompt: &'a str,
    seed: u64,
    adapter_id: Option<&'a str>,
}

#[derive(Deserialize)]
struct Img2ImgResponse {
    image: String,
}

pub struct HttpPrior {
    base_url: String,
    agent: ureq::Agent,
    native_side: Option<usize>,
    adapter: Option<AdapterHandle>,
}

impl std::fmt::Debug for HttpPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpPrior")
            .field("base_url", &self.base_url)
            .field("native_side", &self.native_side)
            .field("adapter", &self.adapter)
            .finish()
    }
}

impl HttpPrior {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(600)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
            native_side: Some(512),
            adapter: None,
        }
    }

    /// Square side the canvas is resampled to before upload; `None` sends it as is.
    pub fn with_native_side(mut self, side: Option<usize>) -> Self {
        self.native_side = side;
        self
    }

    /// Reads the base URL from `NARCAN_PRIOR_URL`.
    pub fn from_env() -> Option<Self> {
        std::env::var(PRIOR_URL_ENV).ok().filter(|s| !s.is_empty()).map(Self::new)
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, route: &str, body: &Req) -> Result<Resp> {
        let url = format!("{}{}", self.base_url, route);
        let payload = serde_json::to_vec(body).map_err(|e| PriorError::Backend(e.to_string()))?;
        let mut response = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send(&payload[..])
            .map_err(|e| PriorError::BackendUnavailable {
                reason: format!("{url}: {e}"),
                retry_hint: format!("check that the service behind {PRIOR_URL_ENV} is running, then retry"),
            })?;
        let status = response.status();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| PriorError::Backend(format!("{url}: reading body: {e}")))?;
        if status.is_server_error() {
            return Err(PriorError::BackendUnavailable {
                reason: format!("{url} answered {status}: {text}"),
                retry_hint: "the service reported an internal error; retry later".into(),
            });
        }
        if !status.is_success() {
            return Err(PriorError::Backend(format!("{url} answered {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| PriorError::Backend(format!("{url}: malformed response: {e}")))
    }
}

impl PriorProvider for HttpPrior {
    fn name(&self) -> &str {
        "http"
    }

    fn supports_finetune(&self) -> bool {
        true
    }

    fn generate(&mut self, canvas: &RasterCanvas, s: f64, prompt: &str, seed: u64) -> Result<RasterCanvas> {
        let (h, w) = (canvas.height(), canvas.width());
        let upload = match self.native_side {
            Some(side) => resize_bilinear(canvas.pixels(), side, side),
            None => canvas.pixels().clone(),
        };
        let image = BASE64.encode(png_bytes(upload.view()).map_err(|e| PriorError::InvalidInput(e.to_string()))?);
        let resp: Img2ImgResponse = self.post(
            "/img2img",
            &Img2ImgRequest {
                image,
                strength: s,
                prompt,
                seed,
                adapter_id: self.adapter.as_ref().map(|a| a.0.as_str()),
            },
        )?;
        let bytes = BASE64
            .decode(resp.image.as_bytes())
            .map_err(|e| PriorError::Backend(format!("image is not base64: {e}")))?;
        let pixels = decode_png(&bytes, 3).map_err(PriorError::Backend)?;
        let pixels = if pixels.dim().0 == h && pixels.dim().1 == w {
            pixels
        } else {
            resize_bilinear(&pixels, h, w)
        };
        RasterCanvas::new(pixels, canvas.origin(), canvas.scale()).map_err(|e| PriorError::Backend(e.to_string()))
    }

    fn run_finetune(&mut self, spec: &FinetuneSpec<'_>) -> Result<AdapterHandle> {
        let frames = spec
            .frames
            .frames()
            .iter()
            .map(|f| png_bytes(f.view()).map(|b| BASE64.encode(b)))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| PriorError::InvalidInput(e.to_string()))?;
        let resp: FinetuneResponse = self.post(
            "/finetune",
            &FinetuneRequest {
                frames,
                token: &spec.special_token,
                steps: spec.steps,
                rank: spec.rank,
            },
        )?;
        let handle = AdapterHandle(resp.adapter_id);
        self.adapter = Some(handle.clone());
        Ok(handle)
    }

    fn adapter(&self) -> Option<&AdapterHandle> {
        self.adapter.as_ref()
    }
}
