//! Online reconstruction loop over a frame stream.
//!
//! Step `k` covers the global interval `[k-1, k]`. Previous-frame Gaussians
//! matched by id take the predicted forward field (anchored at `k-1`),
//! current-frame Gaussians join with their backward field (anchored at `k`),
//! the interval is rendered, and Gaussians whose opacity at `k` has faded
//! are pruned. Gaussians anchored at `k-1` expire when step `k+1` starts, so
//! at most two frames' worth of Gaussians are ever alive.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deformation::opacity_at;
use crate::error::{Error, Result};
use crate::gaussian::{ensure_unique_ids, DeformationParams, DynamicGaussian, GaussianId};
use crate::image::ImageBuffer;
use crate::predictor::{Predictor, PredictorOutput, PredictorState};
use crate::raster::{render_at_with, OrthoCamera, RasterConfig};
use crate::scene::{fmt_real, gaussians_json, parse_gaussians};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub prune_eps: f64,
    /// Render times within each interval, as fractions in `[0, 1]`.
    pub render_times: Vec<f64>,
    /// Abort on the first failing step instead of skipping the frame.
    pub strict: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            prune_eps: 1e-3,
            render_times: vec![0.5, 1.0],
            strict: false,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prune_eps >= 0.0) {
            return Err(Error::InvalidParameter(format!("prune_eps must be >= 0, got {}", self.prune_eps)));
        }
        if let Some(t) = self.render_times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidParameter(format!("render time {t} is outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Telemetry {
    pub frame: u64,
    /// Survivors contributed by the previous frame.
    pub persistent: usize,
    /// Survivors contributed by this frame.
    pub emerging: usize,
    /// Removed this step, expired or faded.
    pub pruned: usize,
    pub population: usize,
}

impl Telemetry {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"frame\": {}, \"persistent\": {}, \"emerging\": {}, \"pruned\": {}, \"population\": {}}}",
            self.frame, self.persistent, self.emerging, self.pruned, self.population
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalSceneState {
    pub gaussians: Vec<DynamicGaussian>,
    pub prev_state: PredictorState,
    pub frame_index: u64,
    pub telemetry: Telemetry,
    /// Largest number of Gaussians any single frame has contributed.
    pub max_frame_count: usize,
}

/// Renders of one interval, at global times.
pub type Renders = Vec<(f64, ImageBuffer)>;

pub fn init(frame: &ImageBuffer, predictor: &dyn Predictor) -> Result<CanonicalSceneState> {
    let (prev_state, splats) = predictor.encode(0, frame)?;
    let gaussians: Vec<DynamicGaussian> = splats
        .iter()
        .map(|s| DynamicGaussian {
            id: s.id,
            base: s.gaussian,
            deform: DeformationParams::identity(0.0),
        })
        .collect();
    ensure_unique_ids(gaussians.iter().map(|g| &g.id))?;
    let n = gaussians.len();
    Ok(CanonicalSceneState {
        gaussians,
        prev_state,
        frame_index: 0,
        telemetry: Telemetry {
            frame: 0,
            persistent: 0,
            emerging: n,
            pruned: 0,
            population: n,
        },
        max_frame_count: n,
    })
}

/// Renders the state at global time `t`.
pub fn render_state(state: &CanonicalSceneState, t: f64, cam: &OrthoCamera, raster: &RasterConfig) -> Result<ImageBuffer> {
    render_at_with(&state.gaussians, t, cam, raster)
}

fn apply(
    state: &CanonicalSceneState,
    k: u64,
    out: PredictorOutput,
    cur_state: PredictorState,
    cam: &OrthoCamera,
    cfg: &StreamConfig,
    raster: &RasterConfig,
) -> Result<(CanonicalSceneState, Renders)> {
    let prev_t0 = (k - 1) as f64;
    let mut expired = 0;
    let mut gaussians: Vec<DynamicGaussian> = Vec::with_capacity(state.gaussians.len() + out.current_static.len());
    for g in &state.gaussians {
        if g.deform.t0 < prev_t0 {
            expired += 1;
        } else {
            gaussians.push(*g);
        }
    }

    // Update: matched previous-frame Gaussians take the new forward field.
    let live: BTreeSet<GaussianId> = gaussians.iter().map(|g| g.id).collect();
    for id in out.forward_deform.keys() {
        if id.frame != k - 1 {
            return Err(Error::Predictor(format!("forward deformation for {id}, which frame {} did not contribute", k - 1)));
        }
        if !live.contains(id) {
            log::debug!("forward deformation for pruned gaussian {id} ignored");
        }
    }
    for g in &mut gaussians {
        if let Some(d) = out.forward_deform.get(&g.id) {
            d.validate()?;
            g.deform = d.shifted(prev_t0);
        }
    }

    // Fuse: current-frame Gaussians with their backward fields.
    let emerging_ids: BTreeMap<GaussianId, ()> = out.current_static.iter().map(|s| (s.id, ())).collect();
    for s in &out.current_static {
        if s.id.frame != k {
            return Err(Error::Predictor(format!("frame {k} produced gaussian {}", s.id)));
        }
        let d = out
            .backward_deform
            .get(&s.id)
            .ok_or_else(|| Error::Predictor(format!("no backward deformation for {}", s.id)))?;
        d.validate()?;
        gaussians.push(DynamicGaussian {
            id: s.id,
            base: s.gaussian,
            deform: d.shifted(prev_t0),
        });
    }
    ensure_unique_ids(gaussians.iter().map(|g| &g.id))?;

    let renders = cfg
        .render_times
        .iter()
        .map(|tau| {
            let t = prev_t0 + tau;
            Ok((t, render_at_with(&gaussians, t, cam, raster)?))
        })
        .collect::<Result<Renders>>()?;

    let before = gaussians.len();
    let kt = k as f64;
    gaussians.retain(|g| opacity_at(g.base.opacity, g.deform.gamma0, g.deform.gamma1, g.deform.t0, kt) > cfg.prune_eps);
    let faded = before - gaussians.len();

    let emerging = gaussians.iter().filter(|g| emerging_ids.contains_key(&g.id)).count();
    let telemetry = Telemetry {
        frame: k,
        persistent: gaussians.len() - emerging,
        emerging,
        pruned: expired + faded,
        population: gaussians.len(),
    };
    Ok((
        CanonicalSceneState {
            gaussians,
            prev_state: cur_state,
            frame_index: k,
            telemetry,
            max_frame_count: state.max_frame_count.max(out.current_static.len()),
        },
        renders,
    ))
}

/// Advances `state` by one frame. On error `state` is left untouched.
pub fn step(
    state: &mut CanonicalSceneState,
    frame: &ImageBuffer,
    predictor: &dyn Predictor,
    cam: &OrthoCamera,
    cfg: &StreamConfig,
    raster: &RasterConfig,
) -> Result<Renders> {
    cfg.validate()?;
    let k = state.frame_index + 1;
    let (cur_state, _) = predictor.encode(k, frame)?;
    let out = predictor.decode(&state.prev_state, &cur_state)?;
    let (next, renders) = apply(state, k, out, cur_state, cam, cfg, raster)?;
    *state = next;
    Ok(renders)
}

/// Receives stream outputs as they are produced.
pub trait StreamSink {
    fn interval(&mut self, state: &CanonicalSceneState, renders: &Renders) -> Result<()>;

    fn failed(&mut self, _source_frame: usize, _err: &Error) {}
}

/// Keeps everything in memory; mostly for tests.
#[derive(Debug, Default)]
pub struct CollectSink {
    pub telemetry: Vec<Telemetry>,
    pub renders: Vec<Renders>,
    pub failures: Vec<usize>,
}

impl StreamSink for CollectSink {
    fn interval(&mut self, state: &CanonicalSceneState, renders: &Renders) -> Result<()> {
        self.telemetry.push(state.telemetry);
        self.renders.push(renders.clone());
        Ok(())
    }

    fn failed(&mut self, source_frame: usize, _err: &Error) {
        self.failures.push(source_frame);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSummary {
    pub steps: usize,
    pub failed: usize,
    pub max_population: usize,
    pub state: CanonicalSceneState,
}

fn check_population(state: &CanonicalSceneState) -> Result<()> {
    let bound = 2 * state.max_frame_count;
    if state.gaussians.len() > bound {
        return Err(Error::InvalidParameter(format!(
            "population {} exceeds 2 x {} after frame {}",
            state.gaussians.len(),
            state.max_frame_count,
            state.frame_index
        )));
    }
    Ok(())
}

/// Runs the loop over `frames`, starting from `resume` if given. A failing
/// step drops its frame and the next frame is treated as its successor,
/// unless `cfg.strict` is set.
pub fn run_stream<I>(
    frames: I,
    predictor: &dyn Predictor,
    cam: &OrthoCamera,
    cfg: &StreamConfig,
    raster: &RasterConfig,
    resume: Option<CanonicalSceneState>,
    sink: &mut dyn StreamSink,
) -> Result<StreamSummary>
where
    I: IntoIterator<Item = Result<ImageBuffer>>,
{
    cfg.validate()?;
    let mut frames = frames.into_iter().enumerate();
    let mut state = match resume {
        Some(s) => s,
        None => {
            let (_, first) = frames
                .next()
                .ok_or_else(|| Error::InvalidParameter("stream has no frames".into()))?;
            let state = init(&first?, predictor)?;
            let r = render_state(&state, 0.0, cam, raster)?;
            sink.interval(&state, &vec![(0.0, r)])?;
            state
        }
    };
    check_population(&state)?;
    let (mut steps, mut failed) = (0, 0);
    let mut max_population = state.gaussians.len();
    for (i, frame) in frames {
        let result = frame.and_then(|f| step(&mut state, &f, predictor, cam, cfg, raster));
        match result {
            Ok(renders) => {
                check_population(&state)?;
                max_population = max_population.max(state.gaussians.len());
                steps += 1;
                log::info!("frame {}: {}", state.frame_index, state.telemetry.to_json());
                sink.interval(&state, &renders)?;
            }
            Err(e) if !cfg.strict => {
                log::warn!("frame {i} dropped: {e}");
                failed += 1;
                sink.failed(i, &e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(StreamSummary {
        steps,
        failed,
        max_population,
        state,
    })
}

impl CanonicalSceneState {
    /// Checkpoint JSON: the scene at the current key time, wrapped with the
    /// frame index and the predictor state.
    pub fn to_checkpoint(&self) -> Result<String> {
        let predictor = serde_json::to_string(&self.prev_state)?;
        Ok(format!(
            "{{\n  \"frame_index\": {},\n  \"frame_time\": {},\n  \"max_frame_count\": {},\n  \"telemetry\": {},\n  \"gaussians\": {},\n  \"predictor_state\": {}\n}}\n",
            self.frame_index,
            fmt_real(self.frame_index as f64),
            self.max_frame_count,
            self.telemetry.to_json(),
            gaussians_json(&self.gaussians),
            predictor
        ))
    }

    pub fn from_checkpoint(text: &str) -> std::result::Result<Self, String> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let frame_index = v
            .get("frame_index")
            .and_then(|t| t.as_u64())
            .ok_or("missing integer \"frame_index\"")?;
        let gaussians = parse_gaussians(v.get("gaussians").ok_or("missing \"gaussians\"")?)?;
        let prev_state: PredictorState =
            serde_json::from_value(v.get("predictor_state").cloned().ok_or("missing \"predictor_state\"")?)
                .map_err(|e| format!("predictor_state: {e}"))?;
        let telemetry: Telemetry = match v.get("telemetry") {
            Some(t) => serde_json::from_value(t.clone()).map_err(|e| format!("telemetry: {e}"))?,
            None => Telemetry {
                frame: frame_index,
                population: gaussians.len(),
                ..Default::default()
            },
        };
        let max_frame_count = match v.get("max_frame_count") {
            Some(m) => m.as_u64().ok_or("\"max_frame_count\" must be an integer")? as usize,
            None => {
                let mut per: BTreeMap<u64, usize> = BTreeMap::new();
                for g in &gaussians {
                    *per.entry(g.id.frame).or_default() += 1;
                }
                per.values().copied().max().unwrap_or(0)
            }
        };
        Ok(CanonicalSceneState {
            gaussians,
            prev_state,
            frame_index,
            telemetry,
            max_frame_count,
        })
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint()?)?;
        Ok(())
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_checkpoint(&text).map_err(|m| Error::parse(path, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{Splat, StaticGaussian};
    use crate::predictor::{FixtureFrame, FixturePredictor};
    use nalgebra::Vector3;

    fn splats(k: u64, n: u64) -> Vec<Splat> {
        (0..n)
            .map(|i| {
                Splat::new(
                    GaussianId::new(k, i),
                    StaticGaussian::new(
                        Vector3::new(-0.6 + 0.4 * i as f64, 0.1 * (k % 3) as f64 - 0.1, 1.5 + 0.1 * i as f64),
                        Vector3::new(0.08, 0.06, 0.05),
                        [1.0, 0.0, 0.0, 0.0],
                        0.8,
                        Vector3::new(0.9, 0.3 + 0.05 * i as f64, 0.2),
                    )
                    .unwrap(),
                )
            })
            .collect()
    }

    /// Stationary fixture: every frame holds the same blobs, forward and
    /// backward fields are identity-like.
    fn stationary(frames: u64, n: u64, fwd: DeformationParams) -> FixturePredictor {
        FixturePredictor::new(
            (0..frames)
                .map(|k| {
                    let mut gs = splats(k, n);
                    for g in &mut gs {
                        g.gaussian.mu.y = 0.0;
                    }
                    FixtureFrame {
                        frame_time: k as f64,
                        backward: gs.iter().map(|g| (g.id, DeformationParams::identity(1.0))).collect(),
                        forward: if k == 0 {
                            BTreeMap::new()
                        } else {
                            (0..n).map(|i| (GaussianId::new(k - 1, i), fwd)).collect()
                        },
                        gaussians: gs,
                    }
                })
                .collect(),
        )
    }

    fn blank(k: usize) -> Vec<Result<ImageBuffer>> {
        (0..k).map(|_| Ok(ImageBuffer::new(32, 24))).collect()
    }

    fn cam() -> OrthoCamera {
        OrthoCamera::canonical(32, 24)
    }

    #[test]
    fn init_marks_everything_emerging() {
        let p = stationary(1, 3, DeformationParams::identity(0.0));
        let s = init(&ImageBuffer::new(4, 4), &p).unwrap();
        assert_eq!(s.gaussians.len(), 3);
        assert_eq!(s.telemetry.emerging, 3);
        assert!(s.gaussians.iter().all(|g| g.deform == DeformationParams::identity(0.0)));
        assert_eq!(s.gaussians[1].base, p.frames[0].gaussians[1].gaussian);
        let empty = FixturePredictor::new(vec![FixtureFrame {
            frame_time: 0.0,
            gaussians: vec![],
            backward: BTreeMap::new(),
            forward: BTreeMap::new(),
        }]);
        let s = init(&ImageBuffer::new(4, 4), &empty).unwrap();
        assert!(s.gaussians.is_empty());
        assert_eq!(s.frame_index, 0);
    }

    #[test]
    fn stationary_stream_reaches_steady_state() {
        let n = 3;
        let p = stationary(20, n, DeformationParams::identity(0.0));
        let mut sink = CollectSink::default();
        let cfg = StreamConfig {
            render_times: vec![0.0, 0.5, 1.0],
            ..Default::default()
        };
        let sum = run_stream(blank(20), &p, &cam(), &cfg, &RasterConfig::default(), None, &mut sink).unwrap();
        assert_eq!(sum.steps, 19);
        for t in &sink.telemetry[2..] {
            assert_eq!(t.population, sink.telemetry[2].population);
            assert!(t.population <= 2 * n as usize);
        }
        // Identical content every frame: each interval renders the same.
        for r in &sink.renders[3..] {
            for (a, b) in r.iter().zip(&sink.renders[2]) {
                assert_eq!(a.1, b.1);
            }
        }
    }

    #[test]
    fn forced_vanishing_prunes_previous_frame() {
        let n = 4;
        let fwd = DeformationParams::new(Vector3::zeros(), 500.0, 0.0, 0.0).unwrap();
        let p = stationary(5, n, fwd);
        let mut sink = CollectSink::default();
        run_stream(blank(5), &p, &cam(), &StreamConfig::default(), &RasterConfig::default(), None, &mut sink).unwrap();
        for t in &sink.telemetry[1..] {
            assert_eq!(t.population, n as usize);
            assert_eq!(t.persistent, 0);
            assert_eq!(t.emerging, n as usize);
        }
        assert_eq!(sink.telemetry[1].pruned, n as usize);
    }

    #[test]
    fn update_replaces_matched_deformation() {
        let fwd = DeformationParams::new(Vector3::new(0.2, 0.0, 0.0), 6.0, 0.75, 0.0).unwrap();
        let p = stationary(2, 2, fwd);
        let mut s = init(&ImageBuffer::new(32, 24), &p).unwrap();
        step(&mut s, &ImageBuffer::new(32, 24), &p, &cam(), &StreamConfig::default(), &RasterConfig::default())
            .unwrap();
        let g = s.gaussians.iter().find(|g| g.id == GaussianId::new(0, 1)).unwrap();
        assert_eq!(g.deform, fwd.shifted(0.0));
        let h = s.gaussians.iter().find(|g| g.id == GaussianId::new(1, 0)).unwrap();
        assert_eq!(h.deform.t0, 1.0);
    }

    struct Failing<'a> {
        inner: &'a FixturePredictor,
        fail_at: u64,
    }

    impl Predictor for Failing<'_> {
        fn name(&self) -> &'static str {
            "failing"
        }

        fn encode(&self, index: u64, frame: &ImageBuffer) -> Result<(PredictorState, Vec<Splat>)> {
            self.inner.encode(index, frame)
        }

        fn decode(&self, prev: &PredictorState, cur: &PredictorState) -> Result<PredictorOutput> {
            if cur.frame() == self.fail_at {
                return Err(Error::Predictor("injected".into()));
            }
            self.inner.decode(prev, cur)
        }
    }

    #[test]
    fn failing_step_leaves_state_untouched() {
        let p = stationary(4, 3, DeformationParams::identity(0.0));
        let f = Failing { inner: &p, fail_at: 2 };
        let img = ImageBuffer::new(32, 24);
        let mut s = init(&img, &f).unwrap();
        step(&mut s, &img, &f, &cam(), &StreamConfig::default(), &RasterConfig::default()).unwrap();
        let before = s.clone();
        let text = s.to_checkpoint().unwrap();
        assert!(step(&mut s, &img, &f, &cam(), &StreamConfig::default(), &RasterConfig::default()).is_err());
        assert_eq!(s, before);
        assert_eq!(s.to_checkpoint().unwrap(), text);
    }

    #[test]
    fn strict_stream_aborts_lenient_stream_skips() {
        let p = stationary(6, 2, DeformationParams::identity(0.0));
        let f = Failing { inner: &p, fail_at: 3 };
        let mut sink = CollectSink::default();
        let strict = StreamConfig {
            strict: true,
            ..Default::default()
        };
        assert!(run_stream(blank(6), &f, &cam(), &strict, &RasterConfig::default(), None, &mut sink).is_err());
        let mut sink = CollectSink::default();
        let sum = run_stream(blank(6), &f, &cam(), &StreamConfig::default(), &RasterConfig::default(), None, &mut sink)
            .unwrap();
        // Frame 3 keeps failing as each later frame takes its place.
        assert_eq!(sink.failures, vec![3, 4, 5]);
        assert_eq!(sum.steps, 2);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let fwd = DeformationParams::new(Vector3::new(0.05, 0.0, 0.0), 5.0, 0.6, 0.0).unwrap();
        let p = stationary(12, 3, fwd);
        let cfg = StreamConfig::default();
        let r = RasterConfig::default();
        let mut full = CollectSink::default();
        let a = run_stream(blank(12), &p, &cam(), &cfg, &r, None, &mut full).unwrap();

        let mut first = CollectSink::default();
        let mid = run_stream(blank(6), &p, &cam(), &cfg, &r, None, &mut first).unwrap();
        let text = mid.state.to_checkpoint().unwrap();
        let resumed = CanonicalSceneState::from_checkpoint(&text).unwrap();
        assert_eq!(resumed, mid.state);
        let mut rest = CollectSink::default();
        let b = run_stream(blank(12).into_iter().skip(6), &p, &cam(), &cfg, &r, Some(resumed), &mut rest).unwrap();
        assert_eq!(b.state, a.state);
        assert_eq!(b.state.to_checkpoint().unwrap(), a.state.to_checkpoint().unwrap());
        assert_eq!(&full.renders[6..], &rest.renders[..]);
        assert_eq!(&full.telemetry[6..], &rest.telemetry[..]);
    }

    #[test]
    fn telemetry_json_shape() {
        let t = Telemetry {
            frame: 3,
            persistent: 1,
            emerging: 2,
            pruned: 4,
            population: 3,
        };
        let v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(v["pruned"], 4);
        assert_eq!(serde_json::from_value::<Telemetry>(v).unwrap(), t);
    }
}
