//! Time evaluation of dynamic Gaussians: linear motion, the opacity
//! lifecycle, and the inverse-depth position assembly.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::{DynamicGaussian, Splat, StaticGaussian};

/// Lower clamp margin for the inverse-depth offset; keeps `g` finite at -1.
pub const DEPTH_EPS: f64 = 1e-3;

/// Slack on the `|t - t0| <= 1` window check for accumulated time arithmetic.
const WINDOW_SLACK: f64 = 1e-9;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_window(t0: f64, t: f64) -> Result<()> {
    if (t - t0).abs() > 1.0 + WINDOW_SLACK || !t.is_finite() {
        return Err(Error::OutOfWindow { id: None, t0, t });
    }
    Ok(())
}

/// `mu0 + v (t - t0)`, valid only within one normalized interval of `t0`.
pub fn position_at(mu0: &Vector3<f64>, v: &Vector3<f64>, t0: f64, t: f64) -> Result<Vector3<f64>> {
    check_window(t0, t)?;
    let dt = t - t0;
    Ok(Vector3::new(mu0.x + v.x * dt, mu0.y + v.y * dt, mu0.z + v.z * dt))
}

/// `σ(-γ0(|t - t0| - γ1)) / σ(γ0 γ1)`, exactly 1 at `t = t0`.
pub fn lifecycle_ratio(gamma0: f64, gamma1: f64, t0: f64, t: f64) -> f64 {
    let a = -gamma0 * ((t - t0).abs() - gamma1);
    let b = gamma0 * gamma1;
    // σ(a)/σ(b) = (1 + e^-b) / (1 + e^-a); e^-b <= 1 since b >= 0.
    ((1.0 + (-b).exp()) / (1.0 + (-a).exp())).clamp(0.0, 1.0)
}

/// Time-dependent opacity, clamped to `[0, alpha0]`.
pub fn opacity_at(alpha0: f64, gamma0: f64, gamma1: f64, t0: f64, t: f64) -> f64 {
    (alpha0 * lifecycle_ratio(gamma0, gamma1, t0, t)).clamp(0.0, alpha0.max(0.0))
}

/// Partial derivatives of [`opacity_at`] w.r.t. `(alpha0, gamma0, gamma1)`.
pub fn opacity_at_grad(alpha0: f64, gamma0: f64, gamma1: f64, t0: f64, t: f64) -> [f64; 3] {
    let delta = (t - t0).abs();
    let a = -gamma0 * (delta - gamma1);
    let b = gamma0 * gamma1;
    let r = lifecycle_ratio(gamma0, gamma1, t0, t);
    // d ln σ(x) / dx = σ(-x)
    let sa = sigmoid(-a);
    let sb = sigmoid(-b);
    let dr_dg0 = r * (sa * (gamma1 - delta) - sb * gamma1);
    let dr_dg1 = r * gamma0 * (sa - sb);
    [r, alpha0 * dr_dg0, alpha0 * dr_dg1]
}

/// Inverse-depth mapping `g(z) = 2 / (1 + z)`; `z` is clamped to `[-1 + ε, 1]`.
pub fn depth_map(z_inv: f64) -> f64 {
    2.0 / (1.0 + z_inv.clamp(-1.0 + DEPTH_EPS, 1.0))
}

/// Derivative of [`depth_map`]; zero where the clamp is active.
pub fn depth_map_grad(z_inv: f64) -> f64 {
    if z_inv < -1.0 + DEPTH_EPS || z_inv > 1.0 {
        0.0
    } else {
        -2.0 / ((1.0 + z_inv) * (1.0 + z_inv))
    }
}

/// Inverse of [`depth_map`] on its range.
pub fn inverse_depth(depth: f64) -> f64 {
    2.0 / depth - 1.0
}

/// Pixel-aligned position `(u + o0, v + o1, g(o2))`.
pub fn pixel_aligned_position(u: f64, v: f64, offset: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(u + offset.x, v + offset.y, depth_map(offset.z))
}

/// Evaluates `g` at time `t`: position and opacity move, everything else is kept.
pub fn materialize(g: &DynamicGaussian, t: f64) -> Result<Splat> {
    let d = &g.deform;
    let mu = position_at(&g.base.mu, &d.velocity, d.t0, t).map_err(|e| match e {
        Error::OutOfWindow { t0, t, .. } => Error::OutOfWindow {
            id: Some(g.id),
            t0,
            t,
        },
        other => other,
    })?;
    let opacity = opacity_at(g.base.opacity, d.gamma0, d.gamma1, d.t0, t);
    Ok(Splat::new(
        g.id,
        StaticGaussian {
            mu,
            opacity,
            ..g.base
        },
    ))
}

pub fn materialize_all(scene: &[DynamicGaussian], t: f64) -> Result<Vec<Splat>> {
    scene.iter().map(|g| materialize(g, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{DeformationParams, GaussianId, Quaternion};
    use proptest::prelude::*;

    // Independent scalar oracle: the textbook logistic function.
    fn logistic(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn position_examples() {
        let mu0 = Vector3::new(0.0, 0.0, 1.0);
        for t in [-0.7, 0.0, 0.3, 1.0] {
            assert_eq!(position_at(&mu0, &Vector3::zeros(), 0.0, t).unwrap(), mu0);
        }
        let p = position_at(&mu0, &Vector3::new(1.0, 0.0, 0.0), 0.0, 0.5).unwrap();
        assert_eq!(p, Vector3::new(0.5, 0.0, 1.0));
        let p = position_at(
            &Vector3::new(0.2, -0.4, 1.5),
            &Vector3::new(-1.0, 1.0, 0.5),
            1.0,
            0.25,
        )
        .unwrap();
        // Oracle: dt = -0.75; (0.2 + 0.75, -0.4 - 0.75, 1.5 - 0.375)
        assert!((p - Vector3::new(0.95, -1.15, 1.125)).amax() < 1e-12);
    }

    #[test]
    fn position_out_of_window() {
        let err = position_at(&Vector3::zeros(), &Vector3::zeros(), 0.0, 1.5);
        assert!(matches!(err, Err(Error::OutOfWindow { .. })));
    }

    #[test]
    fn opacity_examples() {
        assert_eq!(opacity_at(0.8, 4.0, 0.5, 0.0, 0.0), 0.8);
        assert_eq!(opacity_at(0.8, 123.0, 0.1, 1.0, 1.0), 0.8);
        let expected = logistic(0.0) / logistic(2.0);
        assert!((expected - 0.567_667_642).abs() < 1e-8);
        assert!((opacity_at(1.0, 4.0, 0.5, 0.0, 0.5) - expected).abs() < 1e-12);
        assert!(opacity_at(1.0, 500.0, 0.5, 0.0, 0.6) < 1e-20);
    }

    #[test]
    fn opacity_grad_matches_finite_differences() {
        let (a0, g0, g1, t0, t) = (0.7, 3.3, 0.4, 1.0, 0.35);
        let [_, dg0, dg1] = opacity_at_grad(a0, g0, g1, t0, t);
        let h = 1e-6;
        let fd0 = (opacity_at(a0, g0 + h, g1, t0, t) - opacity_at(a0, g0 - h, g1, t0, t)) / (2.0 * h);
        let fd1 = (opacity_at(a0, g0, g1 + h, t0, t) - opacity_at(a0, g0, g1 - h, t0, t)) / (2.0 * h);
        assert!((fd0 - dg0).abs() < 1e-8, "{fd0} vs {dg0}");
        assert!((fd1 - dg1).abs() < 1e-8, "{fd1} vs {dg1}");
    }

    #[test]
    fn depth_map_examples() {
        assert_eq!(depth_map(0.0), 2.0);
        assert_eq!(depth_map(1.0), 1.0);
        assert_eq!(depth_map(-0.5), 4.0);
        assert!((depth_map(-1.0) - 2.0 / DEPTH_EPS).abs() < 1e-6);
        assert!(depth_map(-5.0).is_finite());
    }

    #[test]
    fn pixel_aligned_examples() {
        assert_eq!(
            pixel_aligned_position(10.0, 5.0, &Vector3::zeros()),
            Vector3::new(10.0, 5.0, 2.0)
        );
        assert_eq!(
            pixel_aligned_position(0.0, 0.0, &Vector3::new(1.0, -1.0, 1.0)),
            Vector3::new(1.0, -1.0, 1.0)
        );
        let p = pixel_aligned_position(128.0, 72.0, &Vector3::new(0.25, -0.5, 0.2));
        assert!((p - Vector3::new(128.25, 71.5, 2.0 / 1.2)).amax() < 1e-12);
    }

    fn sample_gaussian(v: Vector3<f64>, gamma0: f64, gamma1: f64, t0: f64) -> DynamicGaussian {
        DynamicGaussian {
            id: GaussianId::new(0, 0),
            base: StaticGaussian {
                mu: Vector3::new(0.2, -0.4, 1.5),
                scale: Vector3::new(0.1, 0.2, 0.3),
                rotation: Quaternion::IDENTITY,
                opacity: 1.0,
                color: Vector3::new(0.1, 0.5, 0.9),
            },
            deform: DeformationParams::new(v, gamma0, gamma1, t0).unwrap(),
        }
    }

    #[test]
    fn materialize_examples() {
        let g = sample_gaussian(Vector3::new(-1.0, 1.0, 0.5), 4.0, 0.5, 1.0);
        assert_eq!(materialize(&g, 1.0).unwrap().gaussian, g.base);

        let still = sample_gaussian(Vector3::zeros(), 1e-3, 1.0, 0.0);
        for t in [0.0, 0.25, 0.5, 1.0] {
            let s = materialize(&still, t).unwrap().gaussian;
            assert_eq!(s.mu, still.base.mu);
            assert!((s.opacity - 1.0).abs() < 1e-3);
        }

        // Composition of the position and opacity oracles at |t - t0| = 0.75.
        let m = materialize(&g, 0.25).unwrap().gaussian;
        assert!((m.mu - Vector3::new(0.95, -1.15, 1.125)).amax() < 1e-12);
        let expected = logistic(-4.0 * (0.75 - 0.5)) / logistic(2.0);
        assert!((m.opacity - expected).abs() < 1e-12);
        assert_eq!(m.scale, g.base.scale);
        assert_eq!(m.color, g.base.color);

        let err = materialize(&g, 2.5).unwrap_err();
        assert!(matches!(err, Error::OutOfWindow { id: Some(_), .. }));
    }

    proptest! {
        #[test]
        fn opacity_symmetric_monotone_and_ratio(
            alpha0 in 0.0f64..=1.0,
            gamma0 in 1e-3f64..50.0,
            gamma1 in 0.0f64..=1.0,
            t0 in prop::sample::select(vec![0.0, 1.0]),
            d1 in 0.0f64..=1.0,
            d2 in 0.0f64..=1.0,
        ) {
            let a = opacity_at(alpha0, gamma0, gamma1, t0, t0 + d1);
            let b = opacity_at(alpha0, gamma0, gamma1, t0, t0 - d1);
            // t0 ± d1 is exact only for t0 = 0; otherwise rounding of the sum enters.
            if t0 == 0.0 {
                prop_assert_eq!(a, b);
            } else {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(opacity_at(alpha0, gamma0, gamma1, t0, t0 + hi)
                <= opacity_at(alpha0, gamma0, gamma1, t0, t0 + lo));
            prop_assert!(a >= 0.0 && a <= alpha0);
            if alpha0 > 1e-3 {
                let r1 = opacity_at(alpha0, gamma0, gamma1, t0, t0 + d1) / alpha0;
                let r2 = opacity_at(1.0, gamma0, gamma1, t0, t0 + d1);
                prop_assert!((r1 - r2).abs() <= 1e-12);
            }
        }

        #[test]
        fn position_linear_in_dt(
            mu in prop::array::uniform3(-5.0f64..5.0),
            v in prop::array::uniform3(-1.0f64..=1.0),
            t0 in -3.0f64..3.0,
            delta in -1.0f64..=1.0,
        ) {
            let mu = Vector3::from(mu);
            let v = Vector3::from(v);
            let p = position_at(&mu, &v, t0, t0 + delta).unwrap();
            prop_assert_eq!(position_at(&mu, &v, t0, t0).unwrap(), mu);
            let dt = (t0 + delta) - t0;
            prop_assert!(((p - mu) - v * delta).amax() <= 1e-12 + 1e-12 * (dt - delta).abs());
        }

        #[test]
        fn depth_map_round_trip(z in (-1.0 + DEPTH_EPS)..=1.0f64) {
            prop_assert!((inverse_depth(depth_map(z)) - z).abs() <= 1e-12);
        }

        #[test]
        fn depth_map_decreasing(a in (-1.0 + DEPTH_EPS)..=1.0f64, b in (-1.0 + DEPTH_EPS)..=1.0f64) {
            prop_assume!(a < b);
            prop_assert!(depth_map(a) > depth_map(b));
            prop_assert!(depth_map(a) <= 2.0 / DEPTH_EPS && depth_map(b) >= 1.0);
        }
    }
}
