//! Replays predictions stored in a fixture file.
//!
//! The file is a JSON array with one entry per frame:
//! `{"frame_time": k, "gaussians": [scene records], "forward": [...], "backward": [...]}`.
//! Deformation blocks hold `{"id": [f, t], "velocity": [..], "gamma": [g0, g1]}`.
//! A current Gaussian without a `backward` entry uses the deformation in its
//! own record. Record `t0` values are ignored: backward fields start at local
//! time 1 and forward fields at 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::Deserialize;

use super::{Predictor, PredictorOutput, PredictorState};
use crate::error::{Error, Result};
use crate::gaussian::{DeformationParams, DynamicGaussian, GaussianId, Splat};
use crate::image::ImageBuffer;
use crate::scene::{fmt_real, gaussian_json, parse_gaussians};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureFrame {
    pub frame_time: f64,
    pub gaussians: Vec<Splat>,
    pub backward: BTreeMap<GaussianId, DeformationParams>,
    pub forward: BTreeMap<GaussianId, DeformationParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixturePredictor {
    pub frames: Vec<FixtureFrame>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DeformRecord {
    id: [u64; 2],
    velocity: [f64; 3],
    gamma: [f64; 2],
}

fn parse_block(v: Option<&serde_json::Value>, t0: f64) -> std::result::Result<BTreeMap<GaussianId, DeformationParams>, String> {
    let mut out = BTreeMap::new();
    let Some(v) = v else {
        return Ok(out);
    };
    let arr = v.as_array().ok_or("deformation block must be an array")?;
    for item in arr {
        let r: DeformRecord = serde_json::from_value(item.clone()).map_err(|e| e.to_string())?;
        let d = DeformationParams::new(Vector3::from(r.velocity), r.gamma[0], r.gamma[1], t0)
            .map_err(|e| e.to_string())?;
        let id = GaussianId::new(r.id[0], r.id[1]);
        if out.insert(id, d).is_some() {
            return Err(format!("duplicate deformation for {id}"));
        }
    }
    Ok(out)
}

fn block_json(out: &mut String, block: &BTreeMap<GaussianId, DeformationParams>) {
    out.push('[');
    for (i, (id, d)) in block.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let v = d.velocity;
        let _ = write!(
            out,
            "{{\"id\": [{}, {}], \"velocity\": [{}, {}, {}], \"gamma\": [{}, {}]}}",
            id.frame,
            id.token,
            fmt_real(v.x),
            fmt_real(v.y),
            fmt_real(v.z),
            fmt_real(d.gamma0),
            fmt_real(d.gamma1)
        );
    }
    out.push(']');
}

impl FixturePredictor {
    pub fn new(frames: Vec<FixtureFrame>) -> Self {
        FixturePredictor { frames }
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let arr = v.as_array().ok_or("fixture must be a JSON array of frames")?;
        let mut frames = Vec::with_capacity(arr.len());
        for (k, entry) in arr.iter().enumerate() {
            let ctx = |e: String| format!("frame {k}: {e}");
            let frame_time = entry
                .get("frame_time")
                .and_then(|t| t.as_f64())
                .ok_or_else(|| ctx("missing numeric \"frame_time\"".into()))?;
            let dynamic = parse_gaussians(entry.get("gaussians").ok_or_else(|| ctx("missing \"gaussians\"".into()))?)
                .map_err(ctx)?;
            let mut backward = parse_block(entry.get("backward"), 1.0).map_err(ctx)?;
            for g in &dynamic {
                backward
                    .entry(g.id)
                    .or_insert(DeformationParams { t0: 1.0, ..g.deform });
            }
            let forward = parse_block(entry.get("forward"), 0.0).map_err(ctx)?;
            frames.push(FixtureFrame {
                frame_time,
                gaussians: dynamic.iter().map(|g| Splat::new(g.id, g.base)).collect(),
                backward,
                forward,
            });
        }
        Ok(FixturePredictor { frames })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|m| Error::parse(path, m))
    }

    pub fn to_json(&self) -> String {
        let mut s = String::from("[");
        for (k, f) in self.frames.iter().enumerate() {
            s.push_str(if k == 0 { "\n  " } else { ",\n  " });
            let _ = write!(s, "{{\"frame_time\": {}, \"gaussians\": [", fmt_real(f.frame_time));
            for (i, g) in f.gaussians.iter().enumerate() {
                let deform = f.backward.get(&g.id).copied().unwrap_or(DeformationParams::identity(1.0));
                s.push_str(if i == 0 { "\n    " } else { ",\n    " });
                s.push_str(&gaussian_json(&DynamicGaussian {
                    id: g.id,
                    base: g.gaussian,
                    deform,
                }));
            }
            s.push_str("],\n   \"forward\": ");
            block_json(&mut s, &f.forward);
            s.push('}');
        }
        s.push_str("\n]\n");
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    fn entry(&self, index: u64) -> Result<&FixtureFrame> {
        self.frames
            .get(index as usize)
            .ok_or_else(|| Error::Predictor(format!("fixture has no frame {index} ({} frames)", self.frames.len())))
    }
}

impl Predictor for FixturePredictor {
    fn name(&self) -> &'static str {
        "fixture"
    }

    fn encode(&self, index: u64, _frame: &ImageBuffer) -> Result<(PredictorState, Vec<Splat>)> {
        let e = self.entry(index)?;
        Ok((PredictorState::Fixture { frame: index }, e.gaussians.clone()))
    }

    fn decode(&self, prev: &PredictorState, cur: &PredictorState) -> Result<PredictorOutput> {
        let (PredictorState::Fixture { frame: p }, PredictorState::Fixture { frame: c }) = (prev, cur) else {
            return Err(Error::Predictor("fixture backend got a foreign state".into()));
        };
        let prev_entry = self.entry(*p)?;
        let e = self.entry(*c)?;
        for id in e.forward.keys() {
            if !prev_entry.gaussians.iter().any(|g| g.id == *id) {
                return Err(Error::Predictor(format!(
                    "forward deformation for {id}, which frame {p} does not contain"
                )));
            }
        }
        let mut backward = BTreeMap::new();
        for g in &e.gaussians {
            let d = e.backward.get(&g.id).copied().unwrap_or(DeformationParams::identity(1.0));
            backward.insert(g.id, d);
        }
        Ok(PredictorOutput {
            current_static: e.gaussians.clone(),
            backward_deform: backward,
            forward_deform: e.forward.clone(),
        })
    }
}
