//! Gradient-descent predictor: fits static Gaussians to one frame, then
//! bidirectional deformations to a pair of fitted frames.
//!
//! Encoding places one Gaussian per token on a regular grid and keeps each
//! Gaussian's offset inside `[-1, 1]³` around its anchor. Decoding freezes
//! both static sets and fits velocity and lifecycle per Gaussian.
//!
//! The optimizer takes Adam-scaled projected steps and halves the step size
//! whenever the loss would increase, so accepted iterates never get worse.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Predictor, PredictorOutput, PredictorState};
use crate::deformation::{depth_map, depth_map_grad, inverse_depth, sigmoid, DEPTH_EPS};
use crate::error::{Error, Result};
use crate::gaussian::{DeformationParams, DynamicGaussian, GaussianId, Quaternion, Splat, StaticGaussian, MIN_SCALE};
use crate::image::ImageBuffer;
use crate::losses::{psnr, LossTerms, LossWeights, StaticObjective, Target};
use crate::raster::{render_at_gradients, render_gradients_with, render_with, OrthoCamera, RasterConfig};
use crate::sampler::{deterministic_offset, sample_truncnorm, seeded_rng, TruncNormalParams};

/// Tokens per image axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenGrid {
    pub nx: usize,
    pub ny: usize,
}

impl TokenGrid {
    /// One token per 16×16 pixel patch.
    pub fn for_frame(width: usize, height: usize) -> Self {
        TokenGrid {
            nx: (width / 16).max(1),
            ny: (height / 16).max(1),
        }
    }

    pub fn count(&self) -> usize {
        self.nx * self.ny
    }

    /// Canonical anchor of every token, row-major, at the patch centers.
    pub fn anchors(&self, cam: &OrthoCamera) -> Vec<(f64, f64)> {
        let pw = cam.width as f64 / self.nx as f64;
        let ph = cam.height as f64 / self.ny as f64;
        let mut out = Vec::with_capacity(self.count());
        for j in 0..self.ny {
            for i in 0..self.nx {
                let px = (i as f64 + 0.5) * pw;
                let py = (j as f64 + 0.5) * ph;
                out.push(((px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy));
            }
        }
        out
    }

    /// Token spacing in canonical units.
    pub fn spacing(&self, cam: &OrthoCamera) -> (f64, f64) {
        (
            cam.width as f64 / self.nx as f64 / cam.fx,
            cam.height as f64 / self.ny as f64 / cam.fy,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// `None` picks one token per 16×16 patch.
    pub tokens: Option<TokenGrid>,
    pub iterations: usize,
    pub decode_iterations: usize,
    pub step_size: f64,
    pub decode_step_size: f64,
    /// Offset candidates drawn per Gaussian; the one with the lowest loss is kept.
    pub candidates: usize,
    /// Stop once the total loss falls below this.
    pub tolerance: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Use the mean offset instead of sampling candidates.
    pub deterministic_init: bool,
    /// Offset std along x and y, in token spacings.
    pub init_std_xy: f64,
    pub init_std_z: f64,
    /// Initial scale, in token spacings.
    pub init_scale: f64,
    pub init_opacity: f64,
    /// Relative loss drop a motion fit must achieve over the static
    /// (fade-only) fit to be kept.
    pub motion_margin: f64,
    pub raster: RasterSettings,
}

/// Serializable subset of [`RasterConfig`] the fitter lets callers change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterSettings {
    pub tile_size: usize,
}

impl Default for RasterSettings {
    fn default() -> Self {
        RasterSettings { tile_size: 16 }
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            tokens: None,
            iterations: 600,
            decode_iterations: 300,
            step_size: 0.02,
            decode_step_size: 0.01,
            candidates: 8,
            tolerance: 1e-6,
            weights: LossWeights::default(),
            seed: 0,
            deterministic_init: false,
            init_std_xy: 0.2,
            init_std_z: 0.05,
            init_scale: 0.35,
            init_opacity: 0.75,
            motion_margin: 0.25,
            raster: RasterSettings::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("fit config: {m}")));
        if let Some(t) = self.tokens {
            if t.count() == 0 {
                return bad("token grid is empty");
            }
        }
        if self.iterations == 0 || self.decode_iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.candidates == 0 {
            return bad("need at least one candidate");
        }
        if !(self.step_size > 0.0 && self.decode_step_size > 0.0) {
            return bad("step sizes must be positive");
        }
        if !(self.init_std_xy > 0.0 && self.init_std_z > 0.0 && self.init_scale > 0.0) {
            return bad("initial spreads must be positive");
        }
        if !(0.0..1.0).contains(&self.motion_margin) {
            return bad("motion margin must lie in [0, 1)");
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("initial opacity must lie in (0, 1)");
        }
        self.weights.validate()
    }

    pub fn grid(&self, width: usize, height: usize) -> TokenGrid {
        self.tokens.unwrap_or_else(|| TokenGrid::for_frame(width, height))
    }

    /// Gaussians per frame for a frame of this size.
    pub fn n_gaussians(&self, width: usize, height: usize) -> usize {
        self.grid(width, height).count()
    }

    fn raster_config(&self) -> RasterConfig {
        RasterConfig {
            tile_size: self.raster.tile_size,
            ..Default::default()
        }
    }
}

/// One encoded frame: its fitted Gaussians and the observation they explain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub frame: u64,
    pub gaussians: Vec<Splat>,
    pub observation: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitReport {
    /// Loss at the start and after every accepted iteration.
    pub loss_curve: Vec<LossTerms>,
    pub iterations: usize,
    pub evaluations: usize,
    pub psnr: f64,
    /// Mean adaptive depth weight over the loss curve.
    pub mean_depth_weight: f64,
}

pub type DecodeReport = FitReport;

// Parameter layout of one static Gaussian.
const S_OFF: usize = 0;
const S_LOGSCALE: usize = 3;
const S_QUAT: usize = 6;
const S_LOGIT: usize = 10;
const S_COLOR: usize = 11;
const S_LEN: usize = 14;
// Per-slot step multipliers.
const S_STEP: [f64; S_LEN] = [1.0, 1.0, 0.25, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.0, 1.0, 1.0, 1.0];

const S_STEP_COLOR: [f64; S_LEN] = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];

const LOG_SCALE_MAX: f64 = 0.7;
const Z_BOUND_NUDGE: f64 = 1e-9;
const INIT_DEPTH_NEAR: f64 = 1.5;
const INIT_DEPTH_FAR: f64 = 4.0;
const LOGIT_MAX: f64 = 12.0;

fn log_scale_min() -> f64 {
    MIN_SCALE.ln()
}

fn static_splats(p: &[f64], anchors: &[(f64, f64)], frame: u64) -> Vec<Splat> {
    anchors
        .iter()
        .enumerate()
        .map(|(i, (u, v))| {
            let q = &p[i * S_LEN..(i + 1) * S_LEN];
            let mu = Vector3::new(u + q[S_OFF], v + q[S_OFF + 1], depth_map(q[S_OFF + 2]));
            let scale = Vector3::new(q[S_LOGSCALE].exp(), q[S_LOGSCALE + 1].exp(), q[S_LOGSCALE + 2].exp());
            Splat::new(
                GaussianId::new(frame, i as u64),
                StaticGaussian {
                    mu,
                    scale: scale.map(|s| s.max(MIN_SCALE)),
                    rotation: Quaternion {
                        w: q[S_QUAT],
                        x: q[S_QUAT + 1],
                        y: q[S_QUAT + 2],
                        z: q[S_QUAT + 3],
                    },
                    opacity: sigmoid(q[S_LOGIT]),
                    color: Vector3::new(q[S_COLOR], q[S_COLOR + 1], q[S_COLOR + 2]),
                },
            )
        })
        .collect()
}

fn project_static(p: &mut [f64]) {
    for (i, q) in p.chunks_exact_mut(S_LEN).enumerate() {
        q[S_OFF] = q[S_OFF].clamp(-1.0, 1.0);
        q[S_OFF + 1] = q[S_OFF + 1].clamp(-1.0, 1.0);
        // Distinct depth bounds per token: two Gaussians clamped to the same
        // depth would tie in sort order and make the loss jump on any step.
        let nudge = Z_BOUND_NUDGE * i as f64;
        q[S_OFF + 2] = q[S_OFF + 2].clamp(-1.0 + DEPTH_EPS + nudge, 1.0 - nudge);
        for k in 0..3 {
            q[S_LOGSCALE + k] = q[S_LOGSCALE + k].clamp(log_scale_min(), LOG_SCALE_MAX);
            q[S_COLOR + k] = q[S_COLOR + k].clamp(0.0, 1.0);
        }
        q[S_LOGIT] = q[S_LOGIT].clamp(-LOGIT_MAX, LOGIT_MAX);
        let n = (0..4).map(|k| q[S_QUAT + k] * q[S_QUAT + k]).sum::<f64>().sqrt();
        if n > 1e-12 {
            for k in 0..4 {
                q[S_QUAT + k] /= n;
            }
        } else {
            q[S_QUAT..S_QUAT + 4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        }
    }
}

/// Total loss and its gradient w.r.t. the packed static parameters.
fn static_objective(
    p: &[f64],
    anchors: &[(f64, f64)],
    target: &Target,
    cam: &OrthoCamera,
    cfg: &FitConfig,
    rcfg: &RasterConfig,
) -> Result<(LossTerms, Vec<f64>)> {
    let splats = static_splats(p, anchors, 0);
    let obj = StaticObjective {
        target,
        weights: cfg.weights,
    };
    let (img, _, grads) = render_gradients_with(&splats, cam, &obj, rcfg)?;
    let (terms, _) = target.evaluate_terms(&img, &cfg.weights)?;
    let mut out = vec![0.0; p.len()];
    for (i, g) in grads.iter().enumerate() {
        let q = &p[i * S_LEN..(i + 1) * S_LEN];
        let o = &mut out[i * S_LEN..(i + 1) * S_LEN];
        let s = &splats[i].gaussian;
        o[S_OFF] = g.mu.x;
        o[S_OFF + 1] = g.mu.y;
        o[S_OFF + 2] = g.mu.z * depth_map_grad(q[S_OFF + 2]);
        for k in 0..3 {
            o[S_LOGSCALE + k] = if s.scale[k] > MIN_SCALE { g.scale[k] * s.scale[k] } else { 0.0 };
            o[S_COLOR + k] = g.color[k];
        }
        // Through q = r / |r| at |r| = 1: project out the radial part.
        let r = [q[S_QUAT], q[S_QUAT + 1], q[S_QUAT + 2], q[S_QUAT + 3]];
        let radial: f64 = (0..4).map(|k| r[k] * g.rotation[k]).sum();
        for k in 0..4 {
            o[S_QUAT + k] = g.rotation[k] - radial * r[k];
        }
        o[S_LOGIT] = g.opacity * s.opacity * (1.0 - s.opacity);
    }
    Ok((terms, out))
}

fn static_loss_only(
    p: &[f64],
    anchors: &[(f64, f64)],
    target: &Target,
    cam: &OrthoCamera,
    cfg: &FitConfig,
    rcfg: &RasterConfig,
) -> Result<LossTerms> {
    let (img, _) = render_with(&static_splats(p, anchors, 0), cam, rcfg)?;
    Ok(target.evaluate_terms(&img, &cfg.weights)?.0)
}

struct Minimized {
    x: Vec<f64>,
    curve: Vec<LossTerms>,
    iterations: usize,
    evaluations: usize,
}

/// Adam-scaled projected descent with step halving. Only iterates that do
/// not increase the loss are accepted.
///
/// Parameters come in blocks of `step_scale.len()` (one block per Gaussian).
/// The rendered loss jumps where two Gaussians swap depth order or a
/// footprint crosses a cutoff, and descent tends to pile up against such a
/// jump. When no step size helps, the blocks whose own tiny move triggers
/// the jump are frozen for a while so the others can keep moving.
fn minimize(
    mut x: Vec<f64>,
    step_scale: &[f64],
    lr0: f64,
    iterations: usize,
    tolerance: f64,
    project: impl Fn(&mut [f64]),
    mut eval: impl FnMut(&[f64]) -> Result<(LossTerms, Vec<f64>)>,
) -> Result<Minimized> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-12;
    const MAX_HALVINGS: usize = 24;
    const FREEZE_ITERS: usize = 25;
    const MAX_FAILURES: usize = 6;
    const TUNNEL_STEPS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
    let n = x.len();
    let bl = step_scale.len();
    project(&mut x);
    let (mut terms, mut grad) = eval(&x)?;
    let mut evaluations = 1;
    if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::FitDiverged(format!("initial loss {}", terms.total)));
    }
    let mut curve = vec![terms];
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut frozen = vec![0usize; n / bl];
    let mut t = 0;
    let mut lr = lr0;
    let mut iterations_done = 0;
    let mut failures = 0;
    let mut stall = 0;
    while iterations_done < iterations && terms.total > tolerance {
        t += 1;
        let (c1, c2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
        let mut dir = vec![0.0; n];
        for i in 0..n {
            m[i] = B1 * m[i] + (1.0 - B1) * grad[i];
            v[i] = B2 * v[i] + (1.0 - B2) * grad[i] * grad[i];
            if frozen[i / bl] == 0 {
                dir[i] = (m[i] / c1) / ((v[i] / c2).sqrt() + EPS) * step_scale[i % bl];
            }
        }
        let step = |x: &[f64], lr: f64| -> Vec<f64> {
            let mut c: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - lr * d).collect();
            project(&mut c);
            c
        };
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = step(&x, lr);
            let (ct, cg) = eval(&cand)?;
            evaluations += 1;
            if ct.total.is_finite() && cg.iter().all(|g| g.is_finite()) && ct.total <= terms.total {
                let gain = terms.total - ct.total;
                stall = if gain <= 1e-9 * terms.total { stall + 1 } else { 0 };
                x = cand;
                terms = ct;
                grad = cg;
                lr = (lr * 1.2).min(lr0 * 4.0);
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if accepted {
            iterations_done += 1;
            curve.push(terms);
            if stall == 0 {
                failures = 0;
            }
            frozen.iter_mut().for_each(|f| *f = f.saturating_sub(1));
            if stall < 5 {
                continue;
            }
            stall = 0;
        }
        // Stuck: either no step size helps, or accepted steps creep towards
        // a jump with vanishing gains.
        failures += 1;
        if failures > MAX_FAILURES {
            log::debug!("no descent direction at loss {}", terms.total);
            break;
        }
        let tiny = step(&x, lr);
        let blocks: Vec<usize> = (0..n / bl).filter(|b| frozen[*b] == 0).collect();
        let mut culprits = Vec::new();
        let mut probe = |set: &[usize]| -> Result<bool> {
            let mut c = x.clone();
            for b in set {
                c[b * bl..(b + 1) * bl].copy_from_slice(&tiny[b * bl..(b + 1) * bl]);
            }
            evaluations += 1;
            let l = eval(&c)?.0.total;
            Ok(!(l <= terms.total))
        };
        find_jumps(&blocks, &mut probe, &mut culprits)?;
        if culprits.is_empty() {
            // Plain restart from the raw gradient.
            m.iter_mut().for_each(|a| *a = 0.0);
            v.iter_mut().for_each(|a| *a = 0.0);
            t = 0;
        } else {
            // Try to carry the culprits across the jump in one larger move;
            // otherwise park them.
            let mut best: Option<(Vec<f64>, LossTerms, Vec<f64>)> = None;
            for s in TUNNEL_STEPS {
                let mut c = x.clone();
                for b in &culprits {
                    for i in b * bl..(b + 1) * bl {
                        c[i] -= s * lr0 * dir[i];
                    }
                }
                project(&mut c);
                let (ct, cg) = eval(&c)?;
                evaluations += 1;
                let bound = best.as_ref().map_or(terms.total, |b| b.1.total);
                if ct.total.is_finite() && cg.iter().all(|g| g.is_finite()) && ct.total < bound {
                    best = Some((c, ct, cg));
                }
            }
            match best {
                Some((c, ct, cg)) => {
                    log::trace!("moved {} blocks across a loss jump", culprits.len());
                    x = c;
                    terms = ct;
                    grad = cg;
                    iterations_done += 1;
                    curve.push(terms);
                    failures = 0;
                }
                None => {
                    log::trace!("freezing {} blocks at a loss jump", culprits.len());
                    for b in culprits {
                        frozen[b] = FREEZE_ITERS;
                    }
                }
            }
        }
        lr = lr0;
    }
    Ok(Minimized {
        x,
        curve,
        iterations: iterations_done,
        evaluations,
    })
}

/// Group testing: collects the members of `set` whose move alone makes
/// `increases` true.
fn find_jumps(
    set: &[usize],
    increases: &mut impl FnMut(&[usize]) -> Result<bool>,
    out: &mut Vec<usize>,
) -> Result<()> {
    if set.is_empty() || !increases(set)? {
        return Ok(());
    }
    if set.len() == 1 {
        out.push(set[0]);
        return Ok(());
    }
    let (a, b) = set.split_at(set.len() / 2);
    let before = out.len();
    find_jumps(a, increases, out)?;
    find_jumps(b, increases, out)?;
    if out.len() == before {
        // Only the combination jumps; hold back the first half.
        out.extend_from_slice(a);
    }
    Ok(())
}

fn pixel_of(cam: &OrthoCamera, x: f64, y: f64) -> (usize, usize) {
    let px = (cam.fx * x + cam.cx).floor().clamp(0.0, (cam.width - 1) as f64) as usize;
    let py = (cam.fy * y + cam.cy).floor().clamp(0.0, (cam.height - 1) as f64) as usize;
    (px, py)
}

fn sample_color(frame: &ImageBuffer, cam: &OrthoCamera, x: f64, y: f64) -> [f64; 3] {
    let (px, py) = pixel_of(cam, x, y);
    frame.rgb_at(px, py)
}

fn sample_depth(frame: &ImageBuffer, cam: &OrthoCamera, x: f64, y: f64) -> f64 {
    let (px, py) = pixel_of(cam, x, y);
    frame.depth[py * frame.width + px]
}

fn seed_for(cfg: &FitConfig, frame: u64) -> u64 {
    cfg.seed ^ frame.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fits static Gaussians to `frame`. Returned ids are `(index, token)`.
pub fn encode_fit(frame: &ImageBuffer, cam: &OrthoCamera, index: u64, cfg: &FitConfig) -> Result<(Vec<Splat>, FitReport)> {
    cfg.validate()?;
    cam.validate()?;
    if frame.width != cam.width || frame.height != cam.height {
        return Err(Error::Shape(format!(
            "frame is {}x{}, camera {}x{}",
            frame.width, frame.height, cam.width, cam.height
        )));
    }
    if frame.depth.iter().chain(&frame.rgb).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("frame has non-finite samples".into()));
    }
    let rcfg = cfg.raster_config();
    let grid = cfg.grid(frame.width, frame.height);
    let anchors = grid.anchors(cam);
    let (sx, sy) = grid.spacing(cam);
    let target = Target::new(frame.clone(), None)?;
    let mut rng = seeded_rng(seed_for(cfg, index));
    let spread = TruncNormalParams::new(
        Vector3::zeros(),
        Vector3::new(cfg.init_std_xy * sx, cfg.init_std_xy * sy, cfg.init_std_z),
    )?;
    let log_s = (cfg.init_scale * 0.5 * (sx + sy)).max(MIN_SCALE).ln();
    let k = if cfg.deterministic_init { 1 } else { cfg.candidates };
    let logit = (cfg.init_opacity / (1.0 - cfg.init_opacity)).ln();

    // Observed depth is only known up to scale and shift; map its valid
    // range onto [INIT_DEPTH_NEAR, INIT_DEPTH_FAR] and start each candidate's
    // z offset there.
    let valid = || frame.depth.iter().copied().filter(|d| *d > 0.0);
    let (dmin, dmax) = valid().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), d| (a.min(d), b.max(d)));
    let seed_depth = |x: f64, y: f64| -> f64 {
        let d = sample_depth(frame, cam, x, y);
        if d > 0.0 && dmax > dmin {
            INIT_DEPTH_NEAR + (INIT_DEPTH_FAR - INIT_DEPTH_NEAR) * (d - dmin) / (dmax - dmin)
        } else {
            0.5 * (INIT_DEPTH_NEAR + INIT_DEPTH_FAR)
        }
    };
    let make = |(u, v): (f64, f64), o: Vector3<f64>| -> [f64; S_LEN] {
        let c = sample_color(frame, cam, u + o.x, v + o.y);
        let mut q = [0.0; S_LEN];
        q[S_OFF..S_OFF + 3].copy_from_slice(o.as_slice());
        q[S_OFF + 2] += inverse_depth(seed_depth(u + o.x, v + o.y));
        q[S_LOGSCALE..S_LOGSCALE + 3].copy_from_slice(&[log_s; 3]);
        q[S_QUAT] = 1.0;
        q[S_LOGIT] = logit;
        q[S_COLOR..S_COLOR + 3].copy_from_slice(&c);
        q
    };
    let candidates: Vec<Vec<[f64; S_LEN]>> = anchors
        .iter()
        .map(|a| {
            (0..k)
                .map(|_| {
                    let o = if cfg.deterministic_init {
                        deterministic_offset(&spread)
                    } else {
                        sample_truncnorm(&spread, &mut rng)
                    };
                    make(*a, o)
                })
                .collect()
        })
        .collect();
    let mut p: Vec<f64> = candidates.iter().flat_map(|c| c[0]).collect();
    project_static(&mut p);
    let mut evaluations = 0;
    if k > 1 {
        // Greedy pass: each Gaussian in turn keeps its best candidate given
        // the current choice for all others.
        let mut best = static_loss_only(&p, &anchors, &target, cam, cfg, &rcfg)?.total;
        evaluations += 1;
        for (i, cands) in candidates.iter().enumerate() {
            let mut keep: [f64; S_LEN] = p[i * S_LEN..(i + 1) * S_LEN].try_into().unwrap();
            for c in &cands[1..] {
                p[i * S_LEN..(i + 1) * S_LEN].copy_from_slice(c);
                project_static(&mut p);
                let l = static_loss_only(&p, &anchors, &target, cam, cfg, &rcfg)?.total;
                evaluations += 1;
                if l < best {
                    best = l;
                    keep = p[i * S_LEN..(i + 1) * S_LEN].try_into().unwrap();
                } else {
                    p[i * S_LEN..(i + 1) * S_LEN].copy_from_slice(&keep);
                }
            }
        }
        log::debug!("frame {index}: candidate search settled at loss {best:.6}");
    }

    let color_iters = cfg.iterations / 5;
    let mut res = minimize(
        p,
        &S_STEP,
        cfg.step_size,
        cfg.iterations - color_iters,
        cfg.tolerance,
        project_static,
        |x| static_objective(x, &anchors, &target, cam, cfg, &rcfg),
    )?;
    if color_iters > 0 {
        // Colors enter the image linearly and leave depth untouched, so this
        // phase is smooth.
        let polish = minimize(
            res.x.clone(),
            &S_STEP_COLOR,
            cfg.step_size,
            color_iters,
            cfg.tolerance,
            project_static,
            |x| static_objective(x, &anchors, &target, cam, cfg, &rcfg),
        )?;
        res.x = polish.x;
        res.curve.extend_from_slice(&polish.curve[1..]);
        res.iterations += polish.iterations;
        res.evaluations += polish.evaluations;
    }
    let splats = static_splats(&res.x, &anchors, index);
    let (img, _) = render_with(&splats, cam, &rcfg)?;
    let report = FitReport {
        psnr: psnr(&img, frame, 1.0)?,
        mean_depth_weight: res.curve.iter().map(|t| t.depth_weight).sum::<f64>() / res.curve.len() as f64,
        iterations: res.iterations,
        evaluations: evaluations + res.evaluations,
        loss_curve: res.curve,
    };
    log::info!(
        "encoded frame {index}: {} gaussians, {} iterations, loss {:.6}, PSNR {:.2} dB",
        splats.len(),
        report.iterations,
        report.loss_curve.last().map_or(f64::NAN, |t| t.total),
        report.psnr
    );
    Ok((splats, report))
}

// Parameter layout of one deformation: velocity, ln γ0, γ1.
const D_LEN: usize = 5;
const D_STEP: [f64; D_LEN] = [1.0, 1.0, 1.0, 5.0, 2.0];
const D_STEP_VELOCITY: [f64; D_LEN] = [1.0, 1.0, 1.0, 0.0, 0.0];
const D_STEP_LIFECYCLE: [f64; D_LEN] = [0.0, 0.0, 0.0, 5.0, 2.0];
const LN_GAMMA0_MIN: f64 = -3.0;
const LN_GAMMA0_MAX: f64 = 6.9;
const INIT_GAMMA0: f64 = 4.0;
const INIT_GAMMA1: f64 = 0.5;

fn project_deform(p: &mut [f64]) {
    for q in p.chunks_exact_mut(D_LEN) {
        for k in 0..3 {
            q[k] = q[k].clamp(-1.0, 1.0);
        }
        q[3] = q[3].clamp(LN_GAMMA0_MIN, LN_GAMMA0_MAX);
        q[4] = q[4].clamp(0.0, 1.0);
    }
}

fn deform_of(q: &[f64], t0: f64) -> DeformationParams {
    DeformationParams {
        velocity: Vector3::new(q[0], q[1], q[2]),
        gamma0: q[3].exp(),
        gamma1: q[4],
        t0,
    }
}

fn fused_scene(p: &[f64], prev: &[Splat], cur: &[Splat]) -> Vec<DynamicGaussian> {
    prev.iter()
        .map(|s| (s, 0.0))
        .chain(cur.iter().map(|s| (s, 1.0)))
        .enumerate()
        .map(|(i, (s, t0))| DynamicGaussian {
            id: s.id,
            base: s.gaussian,
            deform: deform_of(&p[i * D_LEN..(i + 1) * D_LEN], t0),
        })
        .collect()
}

/// Fits forward deformations for `prev` and backward deformations for `cur`
/// against both observations and any extra `(local time, frame)` targets.
pub fn decode_fit(
    prev: &FitState,
    cur: &FitState,
    intermediates: &[(f64, ImageBuffer)],
    cam: &OrthoCamera,
    cfg: &FitConfig,
) -> Result<(PredictorOutput, DecodeReport)> {
    cfg.validate()?;
    let rcfg = cfg.raster_config();
    let mut targets = vec![
        (0.0, Target::new(prev.observation.clone(), None)?),
        (1.0, Target::new(cur.observation.clone(), None)?),
    ];
    for (t, img) in intermediates {
        if !(0.0..=1.0).contains(t) {
            return Err(Error::InvalidParameter(format!("intermediate time {t} outside [0, 1]")));
        }
        targets.push((*t, Target::new(img.clone(), None)?));
    }
    let n = prev.gaussians.len() + cur.gaussians.len();
    let init = [0.0, 0.0, 0.0, INIT_GAMMA0.ln(), INIT_GAMMA1];
    let p: Vec<f64> = (0..n).flat_map(|_| init).collect();
    let weights = cfg.weights;

    let eval = |x: &[f64]| -> Result<(LossTerms, Vec<f64>)> {
        let scene = fused_scene(x, &prev.gaussians, &cur.gaussians);
        let mut acc = LossTerms::default();
        let mut grad = vec![0.0; x.len()];
        let k = targets.len() as f64;
        for (t, target) in &targets {
            let obj = StaticObjective { target, weights };
            let (img, _, g) = render_at_gradients(&scene, *t, cam, &obj, &rcfg)?;
            let (terms, _) = target.evaluate_terms(&img, &weights)?;
            acc.total += terms.total / k;
            acc.mse += terms.mse / k;
            acc.depth += terms.depth / k;
            acc.mask += terms.mask / k;
            acc.depth_weight += terms.depth_weight / k;
            for (i, dg) in g.iter().enumerate() {
                let o = &mut grad[i * D_LEN..(i + 1) * D_LEN];
                o[0] += dg.velocity.x / k;
                o[1] += dg.velocity.y / k;
                o[2] += dg.velocity.z / k;
                o[3] += dg.gamma0 * scene[i].deform.gamma0 / k;
                o[4] += dg.gamma1 / k;
            }
        }
        Ok((acc, grad))
    };
    // Velocities first, with lifecycles held at their initial values, so
    // motion is found before fading can explain the change away.
    let mut eval = eval;
    let half = (cfg.decode_iterations / 2).max(1);
    let mut run = |stages: &[(&[f64; D_LEN], usize)]| -> Result<Minimized> {
        let mut acc: Option<Minimized> = None;
        for &(mask, iters) in stages {
            let start = acc.as_ref().map_or_else(|| p.clone(), |r| r.x.clone());
            let r = minimize(start, mask, cfg.decode_step_size, iters, cfg.tolerance, project_deform, &mut eval)?;
            acc = Some(match acc {
                None => r,
                Some(mut a) => {
                    a.x = r.x;
                    a.curve.extend_from_slice(&r.curve[1..]);
                    a.iterations += r.iterations;
                    a.evaluations += r.evaluations;
                    a
                }
            });
        }
        Ok(acc.expect("at least one stage"))
    };
    // Two endpoints alone cannot tell motion from a cross-fade, and faded
    // Gaussians drift freely. Keep velocities at zero unless motion clearly
    // explains the targets better. Velocities go first in the motion fit so
    // fading cannot explain the change away.
    let still = run(&[(&D_STEP_LIFECYCLE, cfg.decode_iterations)])?;
    let moving = run(&[
        (&D_STEP_VELOCITY, half),
        (&D_STEP, cfg.decode_iterations.saturating_sub(half).max(1)),
    ])?;
    let final_total = |r: &Minimized| r.curve.last().map_or(f64::INFINITY, |t| t.total);
    let (l0, l1) = (final_total(&still), final_total(&moving));
    log::debug!("decode: static loss {l0:.6e}, motion loss {l1:.6e}");
    let res = if l1 < l0 * (1.0 - cfg.motion_margin) { moving } else { still };

    let np = prev.gaussians.len();
    let mut forward = BTreeMap::new();
    for (i, s) in prev.gaussians.iter().enumerate() {
        forward.insert(s.id, deform_of(&res.x[i * D_LEN..(i + 1) * D_LEN], 0.0));
    }
    let mut backward = BTreeMap::new();
    for (i, s) in cur.gaussians.iter().enumerate() {
        let j = np + i;
        backward.insert(s.id, deform_of(&res.x[j * D_LEN..(j + 1) * D_LEN], 1.0));
    }
    let scene = fused_scene(&res.x, &prev.gaussians, &cur.gaussians);
    let img = crate::raster::render_at_with(&scene, 1.0, cam, &rcfg)?;
    let report = DecodeReport {
        psnr: psnr(&img, &cur.observation, 1.0)?,
        mean_depth_weight: res.curve.iter().map(|t| t.depth_weight).sum::<f64>() / res.curve.len() as f64,
        iterations: res.iterations,
        evaluations: res.evaluations,
        loss_curve: res.curve,
    };
    log::info!(
        "decoded frames {} -> {}: {} iterations, loss {:.6}",
        prev.frame,
        cur.frame,
        report.iterations,
        report.loss_curve.last().map_or(f64::NAN, |t| t.total)
    );
    Ok((
        PredictorOutput {
            current_static: cur.gaussians.clone(),
            backward_deform: backward,
            forward_deform: forward,
        },
        report,
    ))
}

/// The fitting backend behind the [`Predictor`] interface.
#[derive(Debug, Clone, PartialEq)]
pub struct FitPredictor {
    pub cfg: FitConfig,
    /// `None` uses the canonical camera of each frame.
    pub camera: Option<OrthoCamera>,
}

impl FitPredictor {
    pub fn new(cfg: FitConfig) -> Self {
        FitPredictor { cfg, camera: None }
    }

    fn camera_for(&self, frame: &ImageBuffer) -> OrthoCamera {
        self.camera
            .unwrap_or_else(|| OrthoCamera::canonical(frame.width, frame.height))
    }
}

impl Predictor for FitPredictor {
    fn name(&self) -> &'static str {
        "fit"
    }

    fn encode(&self, index: u64, frame: &ImageBuffer) -> Result<(PredictorState, Vec<Splat>)> {
        let cam = self.camera_for(frame);
        let (gaussians, _) = encode_fit(frame, &cam, index, &self.cfg)?;
        let state = FitState {
            frame: index,
            gaussians: gaussians.clone(),
            observation: frame.clone(),
        };
        Ok((PredictorState::Fit(state), gaussians))
    }

    fn decode(&self, prev: &PredictorState, cur: &PredictorState) -> Result<PredictorOutput> {
        let (PredictorState::Fit(p), PredictorState::Fit(c)) = (prev, cur) else {
            return Err(Error::Predictor("fit backend got a foreign state".into()));
        };
        let cam = self.camera_for(&c.observation);
        Ok(decode_fit(p, c, &[], &cam, &self.cfg)?.0)
    }
}
