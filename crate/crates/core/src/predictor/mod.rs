//! Frame-to-Gaussian predictors.
//!
//! A predictor turns one RGB-D frame into static Gaussians (`encode`) and a
//! pair of consecutive encodings into bidirectional deformations (`decode`).
//! Deformations in a [`PredictorOutput`] use interval-local time: the
//! previous frame sits at 0 and the current frame at 1.

mod fit;
mod fixture;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use fit::{
    decode_fit, encode_fit, DecodeReport, FitConfig, FitPredictor, FitReport, FitState, TokenGrid,
};
pub use fixture::{FixtureFrame, FixturePredictor};

use crate::error::Result;
use crate::gaussian::{DeformationParams, GaussianId, Splat};
use crate::image::ImageBuffer;

/// Backend-specific memory of one encoded frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum PredictorState {
    Fixture { frame: u64 },
    Fit(FitState),
}

impl PredictorState {
    pub fn frame(&self) -> u64 {
        match self {
            PredictorState::Fixture { frame } => *frame,
            PredictorState::Fit(s) => s.frame,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictorOutput {
    /// Static Gaussians of the current frame.
    pub current_static: Vec<Splat>,
    /// Per current Gaussian, its deformation towards the previous frame (`t0 = 1`).
    pub backward_deform: BTreeMap<GaussianId, DeformationParams>,
    /// Per previous-frame Gaussian, its deformation towards the current frame (`t0 = 0`).
    pub forward_deform: BTreeMap<GaussianId, DeformationParams>,
}

pub trait Predictor {
    fn name(&self) -> &'static str;

    /// Static Gaussians for frame `index`, ids `(index, token)`.
    fn encode(&self, index: u64, frame: &ImageBuffer) -> Result<(PredictorState, Vec<Splat>)>;

    fn decode(&self, prev: &PredictorState, cur: &PredictorState) -> Result<PredictorOutput>;
}
