//! Reverse-mode gradients of an image loss w.r.t. Gaussian parameters.
//!
//! The forward blend is replayed per pixel with its contributions recorded,
//! then walked back to front. Per-tile partial sums are reduced in tile order
//! so the result does not depend on the worker count.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::{prepare, shade_pixel, write_pixel, Contribution, OrthoCamera, RasterConfig, TileGrid};
use crate::deformation::{materialize_all, opacity_at_grad};
use crate::error::Result;
use crate::gaussian::{DynamicGaussian, Splat, MIN_SCALE};
use crate::image::ImageBuffer;

/// Derivatives of a scalar loss w.r.t. each rendered plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrad {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl ImageGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        ImageGrad {
            rgb: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            alpha: vec![0.0; n],
        }
    }

    pub fn add_scaled(&mut self, other: &ImageGrad, k: f64) {
        for (a, b) in self.rgb.iter_mut().zip(&other.rgb) {
            *a += k * b;
        }
        for (a, b) in self.depth.iter_mut().zip(&other.depth) {
            *a += k * b;
        }
        for (a, b) in self.alpha.iter_mut().zip(&other.alpha) {
            *a += k * b;
        }
    }
}

/// A differentiable scalar objective over a rendered image.
pub trait ImageLoss {
    fn evaluate(&self, rendered: &ImageBuffer) -> Result<(f64, ImageGrad)>;
}

/// Gradient of the loss w.r.t. one static Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatGrad {
    pub mu: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// W.r.t. the stored quaternion components `(w, x, y, z)`, without
    /// renormalization.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Default for SplatGrad {
    fn default() -> Self {
        SplatGrad {
            mu: Vector3::zeros(),
            scale: Vector3::zeros(),
            rotation: [0.0; 4],
            opacity: 0.0,
            color: Vector3::zeros(),
        }
    }
}

/// Gradient w.r.t. one dynamic Gaussian evaluated at a fixed time.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DynamicGrad {
    /// Static part; `mu` and `opacity` refer to the base values at `t0`.
    pub base: SplatGrad,
    pub velocity: Vector3<f64>,
    pub gamma0: f64,
    pub gamma1: f64,
}

/// Screen-space partials accumulated per prepared splat.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    center: [f64; 2],
    /// W.r.t. conic entries `(a, b, c)` with `q = a dx² + 2 b dx dy + c dy²`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for i in 0..2 {
            self.center[i] += o.center[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

/// Renders `splats`, evaluates `loss`, and back-propagates. Returns the
/// rendered image, the loss value, and one gradient per input splat (zero for
/// splats that were culled).
pub fn render_gradients_with(
    splats: &[Splat],
    cam: &OrthoCamera,
    loss: &dyn ImageLoss,
    cfg: &RasterConfig,
) -> Result<(ImageBuffer, f64, Vec<SplatGrad>)> {
    let frame = prepare(splats, cam, cfg)?;
    let grid = TileGrid::build(&frame.splats, cam, cfg.tile_size);
    let ps = &frame.splats;

    // Forward.
    let tiles: Vec<Vec<(usize, super::PixelValue)>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = grid.pixel_range(t, cam);
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for py in y0..y1 {
                for px in x0..x1 {
                    let v = shade_pixel(px, py, ps, &grid.lists[t], cfg, None);
                    out.push((py * cam.width + px, v));
                }
            }
            out
        })
        .collect();
    let mut img = ImageBuffer::new(cam.width, cam.height);
    for tile in &tiles {
        for (idx, v) in tile {
            write_pixel(&mut img, *idx, v, cfg);
        }
    }
    drop(tiles);

    let (value, grad) = loss.evaluate(&img)?;

    // Backward, per tile into sparse partials keyed by tile-list position.
    let partials: Vec<Vec<ScreenGrad>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &grid.lists[t];
            let (x0, x1, y0, y1) = grid.pixel_range(t, cam);
            let mut acc = vec![ScreenGrad::default(); list.len()];
            let mut rec = Vec::new();
            for py in y0..y1 {
                for px in x0..x1 {
                    rec.clear();
                    let v = shade_pixel(px, py, ps, list, cfg, Some(&mut rec));
                    if rec.is_empty() {
                        continue;
                    }
                    let idx = py * cam.width + px;
                    backprop_pixel(idx, &v, &rec, ps, &grad, cfg, &mut acc);
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); ps.len()];
    for (t, acc) in partials.iter().enumerate() {
        for (pos, k) in grid.lists[t].iter().enumerate() {
            screen[*k].add(&acc[pos]);
        }
    }

    let mut out = vec![SplatGrad::default(); splats.len()];
    for (k, p) in ps.iter().enumerate() {
        out[p.source] = to_parameter_grad(&splats[p.source], p, &screen[k], cam);
    }
    Ok((img, value, out))
}

pub fn render_gradients(
    splats: &[Splat],
    cam: &OrthoCamera,
    loss: &dyn ImageLoss,
) -> Result<(f64, Vec<SplatGrad>)> {
    render_gradients_with(splats, cam, loss, &RasterConfig::default()).map(|(_, l, g)| (l, g))
}

fn backprop_pixel(
    idx: usize,
    v: &super::PixelValue,
    rec: &[Contribution],
    ps: &[super::Prepared],
    grad: &ImageGrad,
    cfg: &RasterConfig,
    acc: &mut [ScreenGrad],
) {
    let g_rgb = [grad.rgb[idx * 3], grad.rgb[idx * 3 + 1], grad.rgb[idx * 3 + 2]];
    let t_final = v.transmittance;
    let alpha_acc = 1.0 - t_final;
    let (g_dsum, g_alpha) = if alpha_acc > cfg.depth_alpha_eps {
        let gd = grad.depth[idx];
        (gd / alpha_acc, grad.alpha[idx] - gd * v.depth_sum / (alpha_acc * alpha_acc))
    } else {
        (0.0, grad.alpha[idx])
    };
    if g_rgb.iter().all(|g| *g == 0.0) && g_dsum == 0.0 && g_alpha == 0.0 {
        return;
    }

    let mut suffix_c = [0.0; 3];
    let mut suffix_z = 0.0;
    for c in rec.iter().rev() {
        let s = &ps[c.splat];
        let a = c.alpha;
        let w = a * c.transmittance;
        let one_minus = 1.0 - a;
        let mut d_alpha = g_alpha * t_final / one_minus;
        let g = &mut acc[c.slot];
        for ch in 0..3 {
            g.color[ch] += g_rgb[ch] * w;
            d_alpha += g_rgb[ch] * (s.color[ch] * c.transmittance - suffix_c[ch] / one_minus);
            suffix_c[ch] += s.color[ch] * w;
        }
        g.depth += g_dsum * w;
        d_alpha += g_dsum * (s.depth * c.transmittance - suffix_z / one_minus);
        suffix_z += s.depth * w;

        if c.clamped {
            continue;
        }
        g.opacity += d_alpha * c.gauss;
        // alpha = o exp(-q/2)  =>  dalpha/dq = -alpha/2
        let d_q = -0.5 * d_alpha * a;
        let (dx, dy) = (c.dx, c.dy);
        g.conic[0] += d_q * dx * dx;
        g.conic[1] += d_q * 2.0 * dx * dy;
        g.conic[2] += d_q * dy * dy;
        // dx = sample - center
        g.center[0] -= d_q * 2.0 * (s.conic[0] * dx + s.conic[1] * dy);
        g.center[1] -= d_q * 2.0 * (s.conic[1] * dx + s.conic[2] * dy);
    }
}

fn to_parameter_grad(
    splat: &Splat,
    p: &super::Prepared,
    sg: &ScreenGrad,
    cam: &OrthoCamera,
) -> SplatGrad {
    let g = &splat.gaussian;

    // Conic -> dilated covariance: dL/dΣ2 = -M G M with the symmetric full
    // gradient G (off-diagonal halves of the b partial).
    let m = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let gm = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2 = -(m * gm * m);

    // Σ2 = P Σ Pᵀ with P = J W_rot (2x3)  =>  dL/dΣ = Pᵀ G2 P.
    let r = &cam.rotation;
    let mut pm = nalgebra::Matrix2x3::zeros();
    for j in 0..3 {
        pm[(0, j)] = cam.fx * r[(0, j)];
        pm[(1, j)] = cam.fy * r[(1, j)];
    }
    let g_cov3: Matrix3<f64> = pm.transpose() * g_cov2 * pm;

    // Σ = M3 M3ᵀ with M3 = R S  =>  dL/dM3 = 2 G3 M3.
    let rot = g.rotation.rotation_matrix();
    let s = g.scale.map(|v| v.max(MIN_SCALE));
    let m3 = rot * Matrix3::from_diagonal(&s);
    let g_m3 = 2.0 * g_cov3 * m3;
    let mut g_scale = Vector3::zeros();
    let mut g_rot = Matrix3::zeros();
    for i in 0..3 {
        for k in 0..3 {
            g_scale[k] += g_m3[(i, k)] * rot[(i, k)];
            g_rot[(i, k)] = g_m3[(i, k)] * s[k];
        }
    }
    for k in 0..3 {
        if g.scale[k] < MIN_SCALE {
            g_scale[k] = 0.0;
        }
    }

    let g_cam = Vector3::new(cam.fx * sg.center[0], cam.fy * sg.center[1], sg.depth);
    SplatGrad {
        mu: cam.rotation.transpose() * g_cam,
        scale: g_scale,
        rotation: g.rotation.rotation_vjp(&g_rot),
        opacity: sg.opacity,
        color: Vector3::new(sg.color[0], sg.color[1], sg.color[2]),
    }
}

/// Chains a static gradient at time `t` back through [`crate::deformation::materialize`].
pub fn dynamic_gradients(scene: &[DynamicGaussian], t: f64, grads: &[SplatGrad]) -> Vec<DynamicGrad> {
    scene
        .iter()
        .zip(grads)
        .map(|(g, sg)| {
            let d = &g.deform;
            let [ratio, d_g0, d_g1] = opacity_at_grad(g.base.opacity, d.gamma0, d.gamma1, d.t0, t);
            let dt = t - d.t0;
            DynamicGrad {
                base: SplatGrad {
                    opacity: sg.opacity * ratio,
                    ..*sg
                },
                velocity: sg.mu * dt,
                gamma0: sg.opacity * d_g0,
                gamma1: sg.opacity * d_g1,
            }
        })
        .collect()
}

/// Convenience: gradient of `loss` at time `t` for a dynamic scene.
pub fn render_at_gradients(
    scene: &[DynamicGaussian],
    t: f64,
    cam: &OrthoCamera,
    loss: &dyn ImageLoss,
    cfg: &RasterConfig,
) -> Result<(ImageBuffer, f64, Vec<DynamicGrad>)> {
    let splats = materialize_all(scene, t)?;
    let (img, value, grads) = render_gradients_with(&splats, cam, loss, cfg)?;
    Ok((img, value, dynamic_gradients(scene, t, &grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{DeformationParams, GaussianId};
    use crate::raster::{blend_structure, contributing_splats, render_with};
    use rand::Rng;

    /// `Σ w · plane` with fixed random weights: exercises every output plane.
    struct Linear(ImageGrad);

    impl ImageLoss for Linear {
        fn evaluate(&self, img: &ImageBuffer) -> Result<(f64, ImageGrad)> {
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let v = dot(&img.rgb, &self.0.rgb) + dot(&img.depth, &self.0.depth) + dot(&img.alpha, &self.0.alpha);
            Ok((v, self.0.clone()))
        }
    }

    fn linear_loss(rng: &mut impl Rng, w: usize, h: usize) -> Linear {
        let mut g = ImageGrad::zeros(w, h);
        for v in g.rgb.iter_mut().chain(g.depth.iter_mut()).chain(g.alpha.iter_mut()) {
            *v = rng.random_range(-1.0..1.0) / (w * h) as f64;
        }
        Linear(g)
    }

    fn params(s: &Splat) -> [f64; 14] {
        let g = &s.gaussian;
        let q = g.rotation.to_array();
        [
            g.mu.x, g.mu.y, g.mu.z, g.scale.x, g.scale.y, g.scale.z, q[0], q[1], q[2], q[3], g.opacity,
            g.color.x, g.color.y, g.color.z,
        ]
    }

    fn set_param(s: &mut Splat, k: usize, v: f64) {
        let g = &mut s.gaussian;
        match k {
            0..=2 => g.mu[k] = v,
            3..=5 => g.scale[k - 3] = v,
            6 => g.rotation.w = v,
            7 => g.rotation.x = v,
            8 => g.rotation.y = v,
            9 => g.rotation.z = v,
            10 => g.opacity = v,
            _ => g.color[k - 11] = v,
        }
    }

    fn grad_vec(g: &SplatGrad) -> [f64; 14] {
        [
            g.mu.x, g.mu.y, g.mu.z, g.scale.x, g.scale.y, g.scale.z, g.rotation[0], g.rotation[1],
            g.rotation[2], g.rotation[3], g.opacity, g.color.x, g.color.y, g.color.z,
        ]
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = crate::sampler::seeded_rng(21);
        let cfg = RasterConfig::default();
        let cam = OrthoCamera::canonical(24, 24);
        let (mut checked, mut passed) = (0, 0);
        for _ in 0..4 {
            let scene = crate::raster::tests::random_scene(&mut rng, 5);
            let loss = linear_loss(&mut rng, cam.width, cam.height);
            let (_, _, grads) = render_gradients_with(&scene, &cam, &loss, &cfg).unwrap();
            let base_structure = blend_structure(&scene, &cam, &cfg).unwrap();
            for i in contributing_splats(&scene, &cam, &cfg).unwrap() {
                let p = params(&scene[i]);
                let a = grad_vec(&grads[i]);
                for k in 0..14 {
                    let h = 1e-4;
                    let eval = |d: f64| {
                        let mut sc = scene.clone();
                        set_param(&mut sc[i], k, p[k] + d);
                        let same = blend_structure(&sc, &cam, &cfg).unwrap() == base_structure;
                        let (img, _) = render_with(&sc, &cam, &cfg).unwrap();
                        (loss.evaluate(&img).unwrap().0, same)
                    };
                    let (lp, sp) = eval(h);
                    let (lm, sm) = eval(-h);
                    if !(sp && sm) {
                        continue;
                    }
                    let n = (lp - lm) / (2.0 * h);
                    let rel = (a[k] - n).abs() / a[k].abs().max(n.abs()).max(1e-7);
                    checked += 1;
                    if rel < 1e-3 {
                        passed += 1;
                    }
                }
            }
        }
        assert!(checked > 100, "{checked}");
        assert!(passed as f64 >= 0.99 * checked as f64, "{passed}/{checked}");
    }

    #[test]
    fn dynamic_chain_rule() {
        let mut rng = crate::sampler::seeded_rng(22);
        let cam = OrthoCamera::canonical(20, 20);
        let cfg = RasterConfig::default();
        let splats = crate::raster::tests::random_scene(&mut rng, 3);
        let scene: Vec<DynamicGaussian> = splats
            .iter()
            .enumerate()
            .map(|(i, s)| DynamicGaussian {
                id: GaussianId::new(1, i as u64),
                base: s.gaussian,
                deform: DeformationParams::new(Vector3::new(0.2, -0.1, 0.05), 3.0, 0.4, 1.0).unwrap(),
            })
            .collect();
        let loss = linear_loss(&mut rng, 20, 20);
        let t = 0.6;
        let (_, _, grads) = render_at_gradients(&scene, t, &cam, &loss, &cfg).unwrap();
        let f = |sc: &[DynamicGaussian]| {
            let img = crate::raster::render_at_with(sc, t, &cam, &cfg).unwrap();
            loss.evaluate(&img).unwrap().0
        };
        let h = 1e-5;
        for i in 0..scene.len() {
            let checks: [(f64, Box<dyn Fn(&mut DynamicGaussian, f64)>); 4] = [
                (grads[i].velocity.x, Box::new(|g, d| g.deform.velocity.x += d)),
                (grads[i].gamma0, Box::new(|g, d| g.deform.gamma0 += d)),
                (grads[i].gamma1, Box::new(|g, d| g.deform.gamma1 += d)),
                (grads[i].base.opacity, Box::new(|g, d| g.base.opacity += d)),
            ];
            for (a, bump) in checks.iter() {
                let mut p = scene.clone();
                bump(&mut p[i], h);
                let mut m = scene.clone();
                bump(&mut m[i], -h);
                let n = (f(&p) - f(&m)) / (2.0 * h);
                assert!((a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-6), "{a} vs {n}");
            }
        }
    }
}
