//! Describers turn an image into an instruction for the next enhancement
//! pass: an external vision-language service, or a luma-statistics
//! fallback.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::template::{
    lighting_text, parse_lighting, shadows_text, Backdrop, Intensity, LightPosition, LightSource, SceneDescriptor,
};
use super::{Facets, Instruction, InstructionSource};
use crate::codec::ImageTensor;

/// Prompt sent verbatim to the external vision-language service.
pub const VLM_PROMPT: &str = "Provide a detailed description of the lighting conditions (including light source, position, intensity), shadows and reflections distribution, and scene information in this image";

#[derive(Debug, thiserror::Error)]
pub enum DescribeError {
    #[error("describer connection failed: {0}")]
    Connection(String),
    #[error("describer timed out after {0:?}")]
    Timeout(Duration),
    #[error("describer returned HTTP {0}")]
    Status(u16),
    #[error("malformed describer reply: {0}")]
    Malformed(String),
    #[error("could not encode image: {0}")]
    Image(String),
}

pub trait Describer: Send + Sync {
    /// Describe `image`. `previous` is the instruction used to produce it.
    fn describe(&self, image: &ImageTensor, previous: &Instruction) -> Result<Instruction, DescribeError>;
}

/// Mean-luma cut points between the intensity classes, measured on the
/// generator's normal-light renders.
const BRIGHT_ABOVE: f64 = 0.30;
const SOFT_BELOW: f64 = 0.205;
/// Luma-centroid offsets from the image center, as a fraction of the side.
/// Scenes sit brighter at the top regardless of light, so a centered light
/// still lands near dy = -0.04; a light from above near -0.09.
const LATERAL_BEYOND: f64 = 0.03;
const TOP_BELOW: f64 = -0.067;

/// Brightness and light direction from image statistics.
pub fn describe_heuristic(image: &ImageTensor) -> (Intensity, LightPosition) {
    let mean = image.mean_luma();
    let intensity = if mean > BRIGHT_ABOVE {
        Intensity::Bright
    } else if mean < SOFT_BELOW {
        Intensity::Soft
    } else {
        Intensity::Moderate
    };
    let (w, h) = (image.width(), image.height());
    let luma = image.luma();
    let total: f64 = luma.iter().map(|&v| v as f64).sum::<f64>().max(1e-9);
    let (mut cx, mut cy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = luma[y * w + x] as f64;
            cx += v * (x as f64 + 0.5) / w as f64;
            cy += v * (y as f64 + 0.5) / h as f64;
        }
    }
    let (dx, dy) = (cx / total - 0.5, cy / total - 0.5);
    let position = if dx < -LATERAL_BEYOND {
        LightPosition::Left
    } else if dx > LATERAL_BEYOND {
        LightPosition::Right
    } else if dy < TOP_BELOW {
        LightPosition::Top
    } else {
        LightPosition::Center
    };
    (intensity, position)
}

/// Rewrites the lighting and shadow facets from image statistics and keeps
/// the spatial facet of the previous instruction, which it cannot estimate.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeuristicDescriber;

impl Describer for HeuristicDescriber {
    fn describe(&self, image: &ImageTensor, previous: &Instruction) -> Result<Instruction, DescribeError> {
        let (intensity, position) = describe_heuristic(image);
        let source = previous
            .facets
            .lighting
            .as_deref()
            .and_then(parse_lighting)
            .map(|(s, _, _)| s)
            .unwrap_or(match position {
                LightPosition::Left | LightPosition::Right => LightSource::Window,
                LightPosition::Top => LightSource::Sky,
                LightPosition::Center => LightSource::Lamp,
            });
        let position = if source == LightSource::None {
            LightPosition::Center
        } else {
            position
        };
        let scene = SceneDescriptor {
            light_source: source,
            intensity,
            light_position: position,
            shadow_direction: position.shadow(),
            backdrop: Backdrop::Wall,
            objects: vec![],
        };
        let structured = previous.facets != Facets::default();
        let facets = if structured {
            Facets {
                lighting: previous.facets.lighting.as_ref().map(|_| lighting_text(&scene)),
                shadows: previous.facets.shadows.as_ref().map(|_| shadows_text(&scene)),
                spatial: previous.facets.spatial.clone(),
            }
        } else {
            Facets {
                lighting: Some(lighting_text(&scene)),
                shadows: Some(shadows_text(&scene)),
                spatial: None,
            }
        };
        Ok(Instruction::from_facets(facets, InstructionSource::Heuristic))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalVlmConfig {
    pub url: String,
    /// Sent as the `Authorization` header when set.
    pub auth_header: Option<String>,
    pub timeout_secs: f64,
}

impl Default for ExternalVlmConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            auth_header: None,
            timeout_secs: 30.0,
        }
    }
}

#[derive(Serialize)]
struct VlmRequest<'a> {
    prompt: &'a str,
    image_b64: String,
}

#[derive(Deserialize)]
struct VlmReply {
    text: String,
}

/// Client for an HTTP vision-language service: POST `{prompt, image_b64}`,
/// reply `{text}`.
pub struct ExternalDescriber {
    config: ExternalVlmConfig,
    client: reqwest::blocking::Client,
}

impl ExternalDescriber {
    pub fn new(config: ExternalVlmConfig) -> Result<Self, DescribeError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| DescribeError::Connection(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.config.timeout_secs)
    }
}

impl Describer for ExternalDescriber {
    fn describe(&self, image: &ImageTensor, _previous: &Instruction) -> Result<Instruction, DescribeError> {
        let body = VlmRequest {
            prompt: VLM_PROMPT,
            image_b64: image.to_png_b64().map_err(|e| DescribeError::Image(e.to_string()))?,
        };
        let mut req = self.client.post(&self.config.url).json(&body);
        if let Some(auth) = &self.config.auth_header {
            req = req.header(reqwest::header::AUTHORIZATION, auth);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                DescribeError::Timeout(self.timeout())
            } else {
                DescribeError::Connection(e.to_string())
            }
        })?;
        if !resp.status().is_success() {
            return Err(DescribeError::Status(resp.status().as_u16()));
        }
        let bytes = resp.bytes().map_err(|e| {
            if e.is_timeout() {
                DescribeError::Timeout(self.timeout())
            } else {
                DescribeError::Connection(e.to_string())
            }
        })?;
        let reply: VlmReply = serde_json::from_slice(&bytes).map_err(|e| DescribeError::Malformed(e.to_string()))?;
        Ok(Instruction {
            text: reply.text,
            facets: Facets::default(),
            source: InstructionSource::ExternalVlm,
        })
    }
}

/// Tries `primary` and answers with `fallback` when it fails.
pub struct FallbackDescriber<P, F> {
    pub primary: P,
    pub fallback: F,
}

impl<P: Describer, F: Describer> Describer for FallbackDescriber<P, F> {
    fn describe(&self, image: &ImageTensor, previous: &Instruction) -> Result<Instruction, DescribeError> {
        self.primary.describe(image, previous).or_else(|e| {
            eprintln!("warning: {e}; using the fallback describer");
            self.fallback.describe(image, previous)
        })
    }
}
