//! Reconstruction objectives and image metrics.
//!
//! The depth term compares planes after median/mean-absolute-deviation
//! normalization, so it ignores any positive affine rescaling of depth. Its
//! weight decays as the depth loss grows: `λ̂ = λ_depth · σ(-L / w)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::deformation::sigmoid;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::raster::{ImageGrad, ImageLoss};

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const MAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_depth: f64,
    pub lambda_mask: f64,
    /// Decay sensitivity of the adaptive depth weight.
    pub w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mse: 1.0,
            lambda_depth: 0.05,
            lambda_mask: 3.0,
            w: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_mse, self.lambda_depth, self.lambda_mask];
        if ws.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || !(self.w > 0.0) {
            return Err(Error::InvalidParameter(format!("bad loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Sum in a fixed pairwise tree so the result does not depend on how the
/// caller might split the work.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    Ok(())
}

pub fn mse_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sq: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

/// Mean squared RGB difference.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_shape(b)?;
    mse_slices(&a.rgb, &b.rgb)
}

/// `+inf` when the images are identical.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

fn gaussian_window() -> [f64; SSIM_WIN] {
    let r = (SSIM_WIN / 2) as f64;
    let mut k = [0.0; SSIM_WIN];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering of a single plane.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WIN;
    let oh = h + 1 - SSIM_WIN;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5), data range 1,
/// averaged over RGB channels. Only windows fully inside the image count.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WIN || h < SSIM_WIN {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WIN}x{SSIM_WIN} pixels, got {w}x{h}"
        )));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut per_channel = [0.0; 3];
    for (ch, out) in per_channel.iter_mut().enumerate() {
        let x: Vec<f64> = (0..w * h).map(|i| a.rgb[3 * i + ch]).collect();
        let y: Vec<f64> = (0..w * h).map(|i| b.rgb[3 * i + ch]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, w, h, &k));
        let map: Vec<f64> = (0..mx.len())
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cxy = sxy[i] - ux * uy;
                ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                    / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .collect();
        *out = pairwise_sum(&map) / map.len() as f64;
    }
    Ok(per_channel.iter().sum::<f64>() / 3.0)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median/MAD statistics of the valid samples of a plane.
struct TauStats {
    median: f64,
    mad: f64,
    /// Indices of the valid samples.
    valid: Vec<usize>,
    /// For each valid sample, `∂median/∂x` (1, 1/2 or 0).
    median_weight: Vec<f64>,
}

fn tau_stats(d: &[f64], mask: Option<&[bool]>) -> Result<TauStats> {
    if let Some(m) = mask {
        if m.len() != d.len() {
            return Err(Error::Shape(format!("mask has {} entries for {} samples", m.len(), d.len())));
        }
    }
    let valid: Vec<usize> = (0..d.len())
        .filter(|i| mask.is_none_or(|m| m[*i]) && d[*i].is_finite())
        .collect();
    if valid.len() < 2 {
        return Err(Error::DegenerateDepth(format!("{} valid depth samples", valid.len())));
    }
    let mut order: Vec<usize> = (0..valid.len()).collect();
    order.sort_by(|p, q| d[valid[*p]].total_cmp(&d[valid[*q]]));
    let sorted: Vec<f64> = order.iter().map(|k| d[valid[*k]]).collect();
    let med = median(&sorted);
    let n = valid.len();
    let mut median_weight = vec![0.0; n];
    if n % 2 == 1 {
        median_weight[order[n / 2]] = 1.0;
    } else {
        median_weight[order[n / 2 - 1]] = 0.5;
        median_weight[order[n / 2]] = 0.5;
    }
    let dev: Vec<f64> = valid.iter().map(|i| (d[*i] - med).abs()).collect();
    let mad = pairwise_sum(&dev) / n as f64;
    if !(mad > MAD_FLOOR) {
        return Err(Error::DegenerateDepth(format!("mean absolute deviation {mad:e}")));
    }
    Ok(TauStats {
        median: med,
        mad,
        valid,
        median_weight,
    })
}

/// `τ(x) = (x - median) / mean|x - median|` over the valid samples; invalid
/// samples map to 0.
pub fn tau_normalize(d: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let st = tau_stats(d, mask)?;
    let mut out = vec![0.0; d.len()];
    for i in &st.valid {
        out[*i] = (d[*i] - st.median) / st.mad;
    }
    Ok(out)
}

/// Scale- and shift-invariant depth loss `mean |τ(d̂) - τ(d)|` over the
/// samples valid in `mask`.
pub fn depth_loss(d_hat: &[f64], d_ref: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check_len(d_hat, d_ref)?;
    let a = tau_normalize(d_hat, mask)?;
    let b = tau_normalize(d_ref, mask)?;
    let valid = valid_indices(d_hat.len(), mask);
    let diff: Vec<f64> = valid.iter().map(|i| (a[*i] - b[*i]).abs()).collect();
    Ok(pairwise_sum(&diff) / diff.len() as f64)
}

fn valid_indices(n: usize, mask: Option<&[bool]>) -> Vec<usize> {
    (0..n).filter(|i| mask.is_none_or(|m| m[*i])).collect()
}

/// Depth loss and its gradient w.r.t. `d_hat`. `tau_ref` is the already
/// normalized reference over `valid`. A degenerate rendered plane counts as
/// `τ̂ = 0` with zero gradient.
fn depth_loss_with_grad(d_hat: &[f64], tau_ref: &[f64], valid: &[usize]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; d_hat.len()];
    let n = valid.len() as f64;
    let mask: Vec<bool> = {
        let mut m = vec![false; d_hat.len()];
        for i in valid {
            m[*i] = true;
        }
        m
    };
    let Ok(st) = tau_stats(d_hat, Some(&mask)) else {
        let dev: Vec<f64> = valid.iter().map(|i| tau_ref[*i].abs()).collect();
        return (pairwise_sum(&dev) / n, grad);
    };
    // Different valid sets only arise from non-finite renders; treat as degenerate.
    if st.valid.len() != valid.len() {
        let dev: Vec<f64> = valid.iter().map(|i| tau_ref[*i].abs()).collect();
        return (pairwise_sum(&dev) / n, grad);
    }
    let tau_hat: Vec<f64> = valid.iter().map(|i| (d_hat[*i] - st.median) / st.mad).collect();
    let diff: Vec<f64> = valid
        .iter()
        .zip(&tau_hat)
        .map(|(i, t)| (t - tau_ref[*i]).abs())
        .collect();
    let loss = pairwise_sum(&diff) / n;

    // g_i = ∂L/∂τ̂_i; then chain through median and MAD.
    let g: Vec<f64> = valid
        .iter()
        .zip(&tau_hat)
        .map(|(i, t)| (t - tau_ref[*i]).signum() / n)
        .collect();
    let g_sum: f64 = g.iter().sum();
    let g_tau: f64 = g.iter().zip(&tau_hat).map(|(a, b)| a * b).sum();
    let signs: Vec<f64> = valid
        .iter()
        .map(|i| {
            let e = d_hat[*i] - st.median;
            if e == 0.0 {
                0.0
            } else {
                e.signum()
            }
        })
        .collect();
    let sign_sum: f64 = signs.iter().sum();
    for (j, i) in valid.iter().enumerate() {
        let dm = st.median_weight[j];
        let ds = (signs[j] - sign_sum * dm) / n;
        grad[*i] = (g[j] - g_sum * dm - g_tau * ds) / st.mad;
    }
    (loss, grad)
}

/// `λ_depth · σ(-L / w)`.
pub fn adaptive_depth_weight(weights: &LossWeights, depth_loss: f64) -> f64 {
    weights.lambda_depth * sigmoid(-depth_loss / weights.w)
}

/// MSE over the RGB samples of pixels where `mask` is set; 0 for an empty mask.
pub fn masked_loss(a: &ImageBuffer, b: &ImageBuffer, mask: &[bool]) -> Result<f64> {
    a.same_shape(b)?;
    if mask.len() != a.pixel_count() {
        return Err(Error::Shape(format!(
            "mask has {} entries for {} pixels",
            mask.len(),
            a.pixel_count()
        )));
    }
    let sq: Vec<f64> = (0..a.rgb.len())
        .filter(|i| mask[i / 3])
        .map(|i| (a.rgb[i] - b.rgb[i]) * (a.rgb[i] - b.rgb[i]))
        .collect();
    if sq.is_empty() {
        return Ok(0.0);
    }
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

/// Weighted objective and its parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    pub depth: f64,
    pub mask: f64,
    /// The adaptive weight applied to `depth`.
    pub depth_weight: f64,
}

/// One supervision target: an observed frame plus an optional foreground mask.
#[derive(Debug, Clone)]
pub struct Target {
    pub image: ImageBuffer,
    pub mask: Option<Vec<bool>>,
    /// Pixels with usable reference depth (positive and finite).
    depth_valid: Vec<usize>,
    /// `τ` of the reference depth, or `None` if it is degenerate.
    tau_ref: Option<Vec<f64>>,
}

impl Target {
    pub fn new(image: ImageBuffer, mask: Option<Vec<bool>>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.len() != image.pixel_count() {
                return Err(Error::Shape(format!(
                    "mask has {} entries for {} pixels",
                    m.len(),
                    image.pixel_count()
                )));
            }
        }
        let valid_mask: Vec<bool> = image.depth.iter().map(|d| *d > 0.0 && d.is_finite()).collect();
        let depth_valid = valid_indices(image.depth.len(), Some(&valid_mask));
        let tau_ref = match tau_normalize(&image.depth, Some(&valid_mask)) {
            Ok(t) => Some(t),
            Err(Error::DegenerateDepth(msg)) => {
                log::debug!("reference depth unusable ({msg}); depth term disabled");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(Target {
            image,
            mask,
            depth_valid,
            tau_ref,
        })
    }

    /// Loss terms and the gradient w.r.t. the rendered planes. The adaptive
    /// depth weight is treated as a constant when differentiating.
    pub fn evaluate_terms(&self, rendered: &ImageBuffer, weights: &LossWeights) -> Result<(LossTerms, ImageGrad)> {
        rendered.same_shape(&self.image)?;
        let mut grad = ImageGrad::zeros(rendered.width, rendered.height);
        let mse_v = mse(rendered, &self.image)?;
        let n = rendered.rgb.len() as f64;
        for i in 0..rendered.rgb.len() {
            grad.rgb[i] = weights.lambda_mse * 2.0 * (rendered.rgb[i] - self.image.rgb[i]) / n;
        }

        let mut mask_v = 0.0;
        if let Some(m) = &self.mask {
            mask_v = masked_loss(rendered, &self.image, m)?;
            let count = 3 * m.iter().filter(|v| **v).count();
            if count > 0 {
                for i in 0..rendered.rgb.len() {
                    if m[i / 3] {
                        grad.rgb[i] += weights.lambda_mask * 2.0 * (rendered.rgb[i] - self.image.rgb[i])
                            / count as f64;
                    }
                }
            }
        }

        let (depth_v, depth_weight) = match &self.tau_ref {
            Some(tau_ref) => {
                let (l, g) = depth_loss_with_grad(&rendered.depth, tau_ref, &self.depth_valid);
                let lam = adaptive_depth_weight(weights, l);
                for (d, gi) in grad.depth.iter_mut().zip(&g) {
                    *d = lam * gi;
                }
                (l, lam)
            }
            None => (0.0, adaptive_depth_weight(weights, 0.0)),
        };
        let total = weights.lambda_mse * mse_v + depth_weight * depth_v + weights.lambda_mask * mask_v;
        Ok((
            LossTerms {
                total,
                mse: mse_v,
                depth: depth_v,
                mask: mask_v,
                depth_weight,
            },
            grad,
        ))
    }
}

/// A [`Target`] bound to loss weights, usable as a rasterizer objective.
pub struct StaticObjective<'a> {
    pub target: &'a Target,
    pub weights: LossWeights,
}

impl ImageLoss for StaticObjective<'_> {
    fn evaluate(&self, rendered: &ImageBuffer) -> Result<(f64, ImageGrad)> {
        let (terms, grad) = self.target.evaluate_terms(rendered, &self.weights)?;
        Ok((terms.total, grad))
    }
}

/// Single-frame objective: reconstruction, adaptive depth, and mask terms.
pub fn total_static_loss(
    rendered: &ImageBuffer,
    target: &ImageBuffer,
    weights: &LossWeights,
    mask: Option<&[bool]>,
) -> Result<LossTerms> {
    let t = Target::new(target.clone(), mask.map(|m| m.to_vec()))?;
    Ok(t.evaluate_terms(rendered, weights)?.0)
}

/// Mean of [`total_static_loss`] over a set of supervised times.
pub fn total_dynamic_loss(
    rendered: &[ImageBuffer],
    targets: &[ImageBuffer],
    weights: &LossWeights,
    masks: Option<&[Vec<bool>]>,
) -> Result<LossTerms> {
    if rendered.len() != targets.len() || rendered.is_empty() {
        return Err(Error::Shape(format!(
            "{} renders for {} targets",
            rendered.len(),
            targets.len()
        )));
    }
    let mut acc = LossTerms::default();
    for (i, (r, t)) in rendered.iter().zip(targets).enumerate() {
        let m = masks.map(|ms| ms[i].as_slice());
        let terms = total_static_loss(r, t, weights, m)?;
        acc.total += terms.total;
        acc.mse += terms.mse;
        acc.depth += terms.depth;
        acc.mask += terms.mask;
        acc.depth_weight += terms.depth_weight;
    }
    let k = rendered.len() as f64;
    Ok(LossTerms {
        total: acc.total / k,
        mse: acc.mse / k,
        depth: acc.depth / k,
        mask: acc.mask / k,
        depth_weight: acc.depth_weight / k,
    })
}

/// `n` evenly spaced times in `[t1, t2]`, endpoints included.
pub fn time_grid(t1: f64, t2: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![t1],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    t2
                } else {
                    t1 + (t2 - t1) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// `None` when either depth plane is degenerate.
    pub depth_loss: Option<f64>,
}

/// JSON cannot hold infinities; they are written as the string `"inf"`.
pub fn json_real(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else if v == f64::INFINITY {
        serde_json::json!("inf")
    } else if v == f64::NEG_INFINITY {
        serde_json::json!("-inf")
    } else {
        serde_json::Value::Null
    }
}

/// Inverse of [`json_real`].
pub fn real_from_json(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) if s == "inf" => Some(f64::INFINITY),
        serde_json::Value::String(s) if s == "-inf" => Some(f64::NEG_INFINITY),
        _ => None,
    }
}

impl FrameMetrics {
    pub fn compute(frame: usize, rendered: &ImageBuffer, reference: &ImageBuffer) -> Result<Self> {
        let psnr_v = psnr(rendered, reference, 1.0)?;
        let ssim_v = ssim(rendered, reference)?;
        let depth = match depth_loss(&rendered.depth, &reference.depth, None) {
            Ok(v) => Some(v),
            Err(Error::DegenerateDepth(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(FrameMetrics {
            frame,
            psnr: psnr_v,
            ssim: ssim_v,
            depth_loss: depth,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "frame": self.frame,
            "psnr": json_real(self.psnr),
            "ssim": json_real(self.ssim),
            "depth_loss": self.depth_loss.map(json_real),
        })
    }
}

pub fn write_metrics_jsonl(out: &mut impl Write, rows: &[FrameMetrics]) -> Result<()> {
    for r in rows {
        writeln!(out, "{}", r.to_json())?;
    }
    Ok(())
}
