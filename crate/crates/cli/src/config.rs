//! Run configuration, read from a TOML file.
//!
//! Sections may be written as tables or as dotted keys:
//!
//! ```toml
//! seed = 7
//! camera.width = 64
//! camera.height = 64
//! fit.iterations = 400
//! fit.tokens = { nx = 4, ny = 4 }
//! stream.render_times = [0.25, 0.5, 1.0]
//! synth.frames = 20
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use splatstream::engine::StreamConfig;
use splatstream::predictor::FitConfig;
use splatstream::OrthoCamera;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    /// Used by `render`; other commands take the size of their frames.
    pub width: usize,
    pub height: usize,
    /// Unset intrinsics fall back to the canonical camera: `fx = W/2`,
    /// `fy = H/2`, principal point at the image center.
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width: 512,
            height: 288,
            fx: None,
            fy: None,
            cx: None,
            cy: None,
        }
    }
}

impl CameraConfig {
    pub fn for_size(&self, width: usize, height: usize) -> OrthoCamera {
        let c = OrthoCamera::canonical(width, height);
        OrthoCamera {
            fx: self.fx.unwrap_or(c.fx),
            fy: self.fy.unwrap_or(c.fy),
            cx: self.cx.unwrap_or(c.cx),
            cy: self.cy.unwrap_or(c.cy),
            ..c
        }
    }

    pub fn camera(&self) -> OrthoCamera {
        self.for_size(self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub blobs: usize,
    /// Std of additive noise on the written depth planes.
    pub depth_noise: f64,
    /// JSON scene spec to use instead of a random one.
    pub spec: Option<PathBuf>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            frames: 20,
            blobs: 5,
            depth_noise: 0.0,
            spec: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Fixture file for `stream --predictor fixture`.
    pub fixture: Option<PathBuf>,
    /// Checkpoint to resume a stream from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub camera: CameraConfig,
    pub fit: FitConfig,
    pub stream: StreamConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        // The top-level seed drives every seeded stage unless fit sets its own.
        if cfg.fit.seed == 0 {
            cfg.fit.seed = cfg.seed;
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.fit.seed = seed;
    }
}
