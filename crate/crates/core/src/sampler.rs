//! Truncated-normal sampling on `[-1, 1]` for position offsets and velocities.
//!
//! Each axis is independent. Sampling uses the inverse CDF: draw a uniform
//! variate between `Φ(α)` and `Φ(β)` and map it back through `Φ⁻¹`, so the cost
//! is bounded no matter how far the mean lies outside the interval.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

/// Standard deviations below this are raised to it.
pub const STD_FLOOR: f64 = 1e-9;

const LOWER: f64 = -1.0;
const UPPER: f64 = 1.0;

/// Below this tail mass `Φ` is no longer usable and an exponential tail
/// approximation takes over.
const TAIL_MASS_FLOOR: f64 = 1e-290;

/// The engine-wide deterministic random source.
pub type SamplerRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SamplerRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncNormalParams {
    pub mean: Vector3<f64>,
    pub std: Vector3<f64>,
}

impl TruncNormalParams {
    pub fn new(mean: Vector3<f64>, std: Vector3<f64>) -> Result<Self> {
        if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "truncated normal std must be positive, got {:?}",
                std.as_slice()
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter("non-finite truncated normal mean".into()));
        }
        Ok(TruncNormalParams {
            mean,
            std: std.map(|s| s.max(STD_FLOOR)),
        })
    }

    pub fn isotropic(mean: Vector3<f64>, std: f64) -> Result<Self> {
        Self::new(mean, Vector3::repeat(std))
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Standardized bounds `(α, β)` of `[-1, 1]` and whether the problem was
/// reflected so that the interval never lies entirely in the upper tail.
fn standardized(mean: f64, std: f64) -> (f64, f64, bool) {
    let a = (LOWER - mean) / std;
    let b = (UPPER - mean) / std;
    if a > 0.0 {
        (-b, -a, true)
    } else {
        (a, b, false)
    }
}

fn sample_standard<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let pa = std_normal_cdf(a);
    let pb = std_normal_cdf(b);
    let u: f64 = rng.random();
    if pb < TAIL_MASS_FLOOR {
        // Deep lower tail: density ∝ exp(|β|(z - β)) near β.
        let e = -(1.0 - u).ln();
        return (b - e / b.abs()).max(a);
    }
    let p = pa + u * (pb - pa);
    std_normal_quantile(p).clamp(a, b)
}

pub fn sample_scalar<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    let std = std.max(STD_FLOOR);
    let (a, b, flipped) = standardized(mean, std);
    let z = sample_standard(a, b, rng);
    let z = if flipped { -z } else { z };
    (mean + std * z).clamp(LOWER, UPPER)
}

/// Draws one offset from `N_[-1,1](mean, diag(std²))`.
pub fn sample_truncnorm<R: Rng + ?Sized>(p: &TruncNormalParams, rng: &mut R) -> Vector3<f64> {
    Vector3::new(
        sample_scalar(p.mean.x, p.std.x, rng),
        sample_scalar(p.mean.y, p.std.y, rng),
        sample_scalar(p.mean.z, p.std.z, rng),
    )
}

/// Distribution mode used when sampling is disabled: the mean clamped to the box.
pub fn deterministic_offset(p: &TruncNormalParams) -> Vector3<f64> {
    p.mean.map(|m| m.clamp(LOWER, UPPER))
}

/// Mean and variance of a single truncated axis.
pub fn truncnorm_moments_scalar(mean: f64, std: f64) -> (f64, f64) {
    let std = std.max(STD_FLOOR);
    let (a, b, flipped) = standardized(mean, std);
    let z = std_normal_cdf(b) - std_normal_cdf(a);
    let (m, v) = if z < TAIL_MASS_FLOOR {
        // Exponential tail approximation at the near bound.
        let rate = b.abs().max(1.0);
        (b - 1.0 / rate, 1.0 / (rate * rate))
    } else {
        let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
        let apa = if a.is_finite() { a * pa } else { 0.0 };
        let bpb = if b.is_finite() { b * pb } else { 0.0 };
        let shift = (pa - pb) / z;
        (shift, (1.0 + (apa - bpb) / z - shift * shift).max(0.0))
    };
    let m = if flipped { -m } else { m };
    ((mean + std * m).clamp(LOWER, UPPER), std * std * v)
}

pub fn truncnorm_moments(p: &TruncNormalParams) -> (Vector3<f64>, Vector3<f64>) {
    let mut mean = Vector3::zeros();
    let mut var = Vector3::zeros();
    for i in 0..3 {
        let (m, v) = truncnorm_moments_scalar(p.mean[i], p.std[i]);
        mean[i] = m;
        var[i] = v;
    }
    (mean, var)
}

/// CDF of the truncated law on `[-1, 1]`.
pub fn truncnorm_cdf(x: f64, mean: f64, std: f64) -> f64 {
    if x <= LOWER {
        return 0.0;
    }
    if x >= UPPER {
        return 1.0;
    }
    let std = std.max(STD_FLOOR);
    let pa = std_normal_cdf((LOWER - mean) / std);
    let pb = std_normal_cdf((UPPER - mean) / std);
    ((std_normal_cdf((x - mean) / std) - pa) / (pb - pa)).clamp(0.0, 1.0)
}
