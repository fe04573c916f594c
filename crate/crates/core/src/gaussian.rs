//! Gaussian primitives shared by every stage of the pipeline.
//!
//! Positions live in the canonical orthographic space: `x`, `y` are image-plane
//! coordinates (the camera maps them to pixels through `fx`, `fy`) and `z` is
//! the mapped depth. Scales are stored post-activation.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest scale any Gaussian axis may take, in canonical units.
pub const MIN_SCALE: f64 = 1e-4;

const MIN_QUAT_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `[w, x, y, z]` to a unit rotation.
    pub fn normalize(raw: [f64; 4]) -> Result<Self> {
        normalize_quaternion(raw)
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n < MIN_QUAT_NORM {
            return Err(Error::DegenerateRotation(n));
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        normalize_quaternion([c, a.x * s, a.y * s, a.z * s])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn negated(self) -> Self {
        Quaternion {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let Quaternion { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Pulls a gradient w.r.t. the rotation matrix back onto `(w, x, y, z)`,
    /// treating the quaternion components as free (no normalization).
    pub fn rotation_vjp(&self, grad_r: &Matrix3<f64>) -> [f64; 4] {
        let Quaternion { w, x, y, z } = *self;
        let g = grad_r;
        let dot = |m: [[f64; 3]; 3]| -> f64 {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += g[(i, j)] * m[i][j];
                }
            }
            acc
        };
        let dw = dot([
            [0.0, -2.0 * z, 2.0 * y],
            [2.0 * z, 0.0, -2.0 * x],
            [-2.0 * y, 2.0 * x, 0.0],
        ]);
        let dx = dot([
            [0.0, 2.0 * y, 2.0 * z],
            [2.0 * y, -4.0 * x, -2.0 * w],
            [2.0 * z, 2.0 * w, -4.0 * x],
        ]);
        let dy = dot([
            [-4.0 * y, 2.0 * x, 2.0 * w],
            [2.0 * x, 0.0, 2.0 * z],
            [-2.0 * w, 2.0 * z, -4.0 * y],
        ]);
        let dz = dot([
            [-4.0 * z, -2.0 * w, 2.0 * x],
            [2.0 * w, -4.0 * z, 2.0 * y],
            [2.0 * x, 2.0 * y, 0.0],
        ]);
        [dw, dx, dy, dz]
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

pub fn normalize_quaternion(raw: [f64; 4]) -> Result<Quaternion> {
    let n = raw.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !n.is_finite() || n <= MIN_QUAT_NORM {
        return Err(Error::DegenerateRotation(n));
    }
    Ok(Quaternion {
        w: raw[0] / n,
        x: raw[1] / n,
        y: raw[2] / n,
        z: raw[3] / n,
    })
}

/// `Σ = R S Sᵀ Rᵀ`. Positive scales below [`MIN_SCALE`] are raised to it.
pub fn covariance_from_rs(q: &Quaternion, scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidScale([scale.x, scale.y, scale.z]));
    }
    let s = scale.map(|v| v.max(MIN_SCALE));
    let m = q.rotation_matrix() * Matrix3::from_diagonal(&s);
    let cov = m * m.transpose();
    // Symmetrize away rounding asymmetry from the product.
    Ok((cov + cov.transpose()) * 0.5)
}

/// Stable per-stream identity: the frame that contributed the Gaussian and its
/// token index within that frame. Ordering is lexicographic.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct GaussianId {
    pub frame: u64,
    pub token: u64,
}

impl GaussianId {
    pub const fn new(frame: u64, token: u64) -> Self {
        GaussianId { frame, token }
    }
}

impl fmt::Display for GaussianId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.frame, self.token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticGaussian {
    pub mu: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Quaternion,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl StaticGaussian {
    /// Validates and builds a Gaussian. The rotation is normalized and small
    /// positive scales are floored at [`MIN_SCALE`].
    pub fn new(
        mu: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: [f64; 4],
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self> {
        let g = StaticGaussian {
            mu,
            scale: scale.map(|s| if s > 0.0 { s.max(MIN_SCALE) } else { s }),
            rotation: normalize_quaternion(rotation)?,
            opacity,
            color,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidScale([self.scale.x, self.scale.y, self.scale.z]));
        }
        if self.mu.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite position {:?}",
                self.mu.as_slice()
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::InvalidParameter(format!(
                "opacity {} outside [0, 1]",
                self.opacity
            )));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidParameter(format!(
                "color {:?} outside [0, 1]",
                self.color.as_slice()
            )));
        }
        let n = self.rotation.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "rotation is not unit norm ({n})"
            )));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from_rs(&self.rotation, &self.scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformationParams {
    /// Displacement per unit of normalized time, each component in `[-1, 1]`.
    pub velocity: Vector3<f64>,
    /// Transition rate of the opacity lifecycle.
    pub gamma0: f64,
    /// Fade-out window of the opacity lifecycle.
    pub gamma1: f64,
    /// Creation time (global stream time).
    pub t0: f64,
}

/// Transition rate used for Gaussians that carry no fitted lifecycle yet.
pub const DEFAULT_GAMMA0: f64 = 4.0;

impl DeformationParams {
    pub fn new(velocity: Vector3<f64>, gamma0: f64, gamma1: f64, t0: f64) -> Result<Self> {
        let d = DeformationParams {
            velocity,
            gamma0,
            gamma1,
            t0,
        };
        d.validate()?;
        Ok(d)
    }

    /// Stationary deformation that keeps the Gaussian visible over the whole
    /// adjacent interval: `v = 0`, `γ1 = 1`.
    pub fn identity(t0: f64) -> Self {
        DeformationParams {
            velocity: Vector3::zeros(),
            gamma0: DEFAULT_GAMMA0,
            gamma1: 1.0,
            t0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.velocity.iter().any(|v| !(v.abs() <= 1.0)) {
            return Err(Error::InvalidParameter(format!(
                "velocity {:?} outside [-1, 1]^3",
                self.velocity.as_slice()
            )));
        }
        if !(self.gamma0 > 0.0) || !self.gamma0.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gamma0 must be positive, got {}",
                self.gamma0
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma1) {
            return Err(Error::InvalidParameter(format!(
                "gamma1 {} outside [0, 1]",
                self.gamma1
            )));
        }
        if !self.t0.is_finite() {
            return Err(Error::InvalidParameter("non-finite t0".into()));
        }
        Ok(())
    }

    /// Same parameters with the creation time moved by `dt`.
    pub fn shifted(mut self, dt: f64) -> Self {
        self.t0 += dt;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicGaussian {
    pub id: GaussianId,
    pub base: StaticGaussian,
    pub deform: DeformationParams,
}

/// A static Gaussian tagged with the identity used for depth-sort tie-breaks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub id: GaussianId,
    pub gaussian: StaticGaussian,
}

impl Splat {
    pub fn new(id: GaussianId, gaussian: StaticGaussian) -> Self {
        Splat { id, gaussian }
    }
}

pub fn ensure_unique_ids<'a>(ids: impl IntoIterator<Item = &'a GaussianId>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(*id) {
            return Err(Error::InvalidParameter(format!("duplicate gaussian id {id}")));
        }
    }
    Ok(())
}
