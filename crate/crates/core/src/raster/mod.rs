//! Orthographic EWA splatting.
//!
//! Gaussians are projected with the constant Jacobian
//! `J = [[fx, 0, 0], [0, fy, 0]]`, sorted front to back by camera depth
//! (ties broken by [`GaussianId`]), and alpha-blended per pixel. Pixel `(i, j)`
//! is sampled at its center `(i + 0.5, j + 0.5)`.

mod backward;

pub use backward::{
    dynamic_gradients, render_at_gradients, render_gradients, render_gradients_with, DynamicGrad,
    ImageGrad, ImageLoss, SplatGrad,
};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::deformation::materialize_all;
use crate::error::{Error, Result};
use crate::gaussian::{DynamicGaussian, GaussianId, Splat, StaticGaussian};
use crate::image::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    /// Upper bound on any per-pixel splat opacity.
    pub opacity_clamp: f64,
    /// Blending stops once transmittance falls below this.
    pub min_transmittance: f64,
    /// Added to the diagonal of every screen-space covariance, in px².
    pub blur: f64,
    /// Footprint cutoff in standard deviations (Mahalanobis radius).
    pub cutoff_sigma: f64,
    /// Accumulated alpha below which the depth plane reads 0.
    pub depth_alpha_eps: f64,
    pub tile_size: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            opacity_clamp: 0.99,
            min_transmittance: 1e-4,
            blur: 0.3,
            cutoff_sigma: 3.0,
            depth_alpha_eps: 1e-6,
            tile_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthoCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rotation part of the canonical-to-camera transform.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl OrthoCamera {
    /// Identity-view camera whose canonical `[-1, 1]²` square spans the image.
    pub fn canonical(width: usize, height: usize) -> Self {
        OrthoCamera {
            fx: width as f64 / 2.0,
            fy: height as f64 / 2.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "camera scale factors must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("camera has an empty image".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if err > 1e-9 || (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "camera rotation is not orthonormal (error {err:e})"
            )));
        }
        Ok(())
    }

    /// Canonical point to pixel coordinates.
    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let c = self.rotation * p + self.translation;
        Vector2::new(self.fx * c.x + self.cx, self.fy * c.y + self.cy)
    }

    /// Canonical `(x, y)` that lands on the center of pixel `(px, py)` under an
    /// identity view.
    pub fn pixel_to_canonical(&self, px: f64, py: f64) -> (f64, f64) {
        ((px + 0.5 - self.cx) / self.fx, (py + 0.5 - self.cy) / self.fy)
    }

    /// `J W_rot` as a 2x3 block stored in the first two rows.
    fn jw(&self) -> [[f64; 3]; 2] {
        let r = &self.rotation;
        [
            [self.fx * r[(0, 0)], self.fx * r[(0, 1)], self.fx * r[(0, 2)]],
            [self.fy * r[(1, 0)], self.fy * r[(1, 1)], self.fy * r[(1, 2)]],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub center: Vector2<f64>,
    /// `J Σ_cam Jᵀ` before the anti-aliasing dilation.
    pub cov2d: Matrix2<f64>,
    pub camera_depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub source_id: GaussianId,
}

impl ProjectedGaussian {
    /// Footprint covariance actually rasterized: `cov2d + blur · I`.
    pub fn dilated_cov2d(&self, blur: f64) -> Matrix2<f64> {
        self.cov2d + Matrix2::identity() * blur
    }
}

pub fn project_gaussian(g: &StaticGaussian, cam: &OrthoCamera) -> Result<ProjectedGaussian> {
    let cov = g.covariance()?;
    let cam_pos = cam.rotation * g.mu + cam.translation;
    let jw = cam.jw();
    let mut cov2d = Matrix2::zeros();
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    acc += jw[i][k] * cov[(k, l)] * jw[j][l];
                }
            }
            cov2d[(i, j)] = acc;
        }
    }
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    Ok(ProjectedGaussian {
        center: Vector2::new(cam.fx * cam_pos.x + cam.cx, cam.fy * cam_pos.y + cam.cy),
        cov2d,
        camera_depth: cam_pos.z,
        opacity: g.opacity,
        color: g.color,
        source_id: GaussianId::default(),
    })
}

pub fn project_splat(s: &Splat, cam: &OrthoCamera) -> Result<ProjectedGaussian> {
    let mut p = project_gaussian(&s.gaussian, cam)?;
    p.source_id = s.id;
    Ok(p)
}

/// A projected splat ready for per-pixel evaluation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Prepared {
    /// Index into the caller's splat slice.
    pub source: usize,
    pub center: [f64; 2],
    /// Inverse of the dilated covariance: `q = a dx² + 2 b dx dy + c dy²`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
    /// Inclusive pixel bounds of the cutoff ellipse.
    pub x0: i64,
    pub x1: i64,
    pub y0: i64,
    pub y1: i64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    /// Splats dropped because their dilated covariance was not invertible.
    pub skipped_singular: usize,
    /// Splats whose footprint misses the image entirely.
    pub offscreen: usize,
}

pub(crate) struct Frame {
    /// Visible splats in blend order.
    pub splats: Vec<Prepared>,
    pub stats: RenderStats,
}

pub(crate) fn prepare(splats: &[Splat], cam: &OrthoCamera, cfg: &RasterConfig) -> Result<Frame> {
    cam.validate()?;
    let mut stats = RenderStats::default();
    let mut out = Vec::with_capacity(splats.len());
    let cut = cfg.cutoff_sigma;
    for (i, s) in splats.iter().enumerate() {
        let p = project_gaussian(&s.gaussian, cam)?;
        let cov = p.dilated_cov2d(cfg.blur);
        let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
        let det = a * c - b * b;
        if !(det > 0.0) || !det.is_finite() || !p.center.iter().all(|v| v.is_finite()) {
            stats.skipped_singular += 1;
            continue;
        }
        let rx = cut * a.sqrt();
        let ry = cut * c.sqrt();
        // Pixel i is sampled at i + 0.5; widen by one pixel against rounding.
        let x0 = (p.center.x - rx - 0.5).floor() as i64 - 1;
        let x1 = (p.center.x + rx - 0.5).ceil() as i64 + 1;
        let y0 = (p.center.y - ry - 0.5).floor() as i64 - 1;
        let y1 = (p.center.y + ry - 0.5).ceil() as i64 + 1;
        if x1 < 0 || y1 < 0 || x0 >= cam.width as i64 || y0 >= cam.height as i64 {
            stats.offscreen += 1;
            continue;
        }
        out.push(Prepared {
            source: i,
            center: [p.center.x, p.center.y],
            conic: [c / det, -b / det, a / det],
            opacity: p.opacity,
            color: [p.color.x, p.color.y, p.color.z],
            depth: p.camera_depth,
            x0: x0.max(0),
            x1: x1.min(cam.width as i64 - 1),
            y0: y0.max(0),
            y1: y1.min(cam.height as i64 - 1),
        });
    }
    if stats.skipped_singular > 0 {
        log::warn!("skipped {} splats with singular footprint", stats.skipped_singular);
    }
    out.sort_by(|p, q| {
        p.depth
            .total_cmp(&q.depth)
            .then_with(|| splats[p.source].id.cmp(&splats[q.source].id))
    });
    Ok(Frame { splats: out, stats })
}

/// One blended contribution, recorded for the backward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    /// Index into [`Frame::splats`].
    pub splat: usize,
    /// Position of the splat in the list that was blended.
    pub slot: usize,
    pub alpha: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
    pub gauss: f64,
    pub clamped: bool,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PixelValue {
    pub rgb: [f64; 3],
    pub depth_sum: f64,
    pub transmittance: f64,
}

/// Blends the splats named by `list` (indices into `frame`, in blend order) at
/// pixel `(px, py)`. Both the tiled and the naive renderer go through here.
#[inline]
pub(crate) fn shade_pixel(
    px: usize,
    py: usize,
    frame: &[Prepared],
    list: &[usize],
    cfg: &RasterConfig,
    mut record: Option<&mut Vec<Contribution>>,
) -> PixelValue {
    let sx = px as f64 + 0.5;
    let sy = py as f64 + 0.5;
    let cut2 = cfg.cutoff_sigma * cfg.cutoff_sigma;
    let mut v = PixelValue {
        transmittance: 1.0,
        ..Default::default()
    };
    for (slot, &k) in list.iter().enumerate() {
        let s = &frame[k];
        let dx = sx - s.center[0];
        let dy = sy - s.center[1];
        let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
        if !(q <= cut2) {
            continue;
        }
        let gauss = (-0.5 * q).exp();
        let raw = s.opacity * gauss;
        let clamped = raw > cfg.opacity_clamp;
        let alpha = if clamped { cfg.opacity_clamp } else { raw };
        let w = alpha * v.transmittance;
        for ch in 0..3 {
            v.rgb[ch] += w * s.color[ch];
        }
        v.depth_sum += w * s.depth;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Contribution {
                splat: k,
                slot,
                alpha,
                transmittance: v.transmittance,
                gauss,
                clamped,
                dx,
                dy,
            });
        }
        v.transmittance *= 1.0 - alpha;
        if v.transmittance < cfg.min_transmittance {
            break;
        }
    }
    v
}

pub(crate) fn write_pixel(img: &mut ImageBuffer, idx: usize, v: &PixelValue, cfg: &RasterConfig) {
    let alpha = 1.0 - v.transmittance;
    img.rgb[idx * 3..idx * 3 + 3].copy_from_slice(&v.rgb);
    img.alpha[idx] = alpha;
    img.depth[idx] = if alpha > cfg.depth_alpha_eps {
        v.depth_sum / alpha
    } else {
        0.0
    };
}

pub(crate) struct TileGrid {
    pub tiles_x: usize,
    pub size: usize,
    /// Per tile, indices into the prepared frame in blend order.
    pub lists: Vec<Vec<usize>>,
}

impl TileGrid {
    pub fn build(frame: &[Prepared], cam: &OrthoCamera, size: usize) -> Self {
        let size = size.max(1);
        let tiles_x = cam.width.div_ceil(size);
        let tiles_y = cam.height.div_ceil(size);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (k, s) in frame.iter().enumerate() {
            let (tx0, tx1) = (s.x0 as usize / size, s.x1 as usize / size);
            let (ty0, ty1) = (s.y0 as usize / size, s.y1 as usize / size);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * tiles_x + tx].push(k);
                }
            }
        }
        TileGrid {
            tiles_x,
            size,
            lists,
        }
    }

    pub fn pixel_range(&self, tile: usize, cam: &OrthoCamera) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.size;
        let y0 = ty * self.size;
        (x0, (x0 + self.size).min(cam.width), y0, (y0 + self.size).min(cam.height))
    }
}

/// Tiled, tile-parallel render with explicit configuration.
pub fn render_with(
    splats: &[Splat],
    cam: &OrthoCamera,
    cfg: &RasterConfig,
) -> Result<(ImageBuffer, RenderStats)> {
    let frame = prepare(splats, cam, cfg)?;
    let grid = TileGrid::build(&frame.splats, cam, cfg.tile_size);
    let tiles: Vec<Vec<(usize, PixelValue)>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = grid.pixel_range(t, cam);
            let list = &grid.lists[t];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for py in y0..y1 {
                for px in x0..x1 {
                    let v = shade_pixel(px, py, &frame.splats, list, cfg, None);
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
    Ok((img, frame.stats))
}

pub fn render(splats: &[Splat], cam: &OrthoCamera) -> Result<ImageBuffer> {
    render_with(splats, cam, &RasterConfig::default()).map(|(img, _)| img)
}

/// Reference renderer: every pixel walks the full sorted list, single-threaded.
pub fn render_naive(splats: &[Splat], cam: &OrthoCamera, cfg: &RasterConfig) -> Result<ImageBuffer> {
    let frame = prepare(splats, cam, cfg)?;
    let all: Vec<usize> = (0..frame.splats.len()).collect();
    let mut img = ImageBuffer::new(cam.width, cam.height);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let v = shade_pixel(px, py, &frame.splats, &all, cfg, None);
            write_pixel(&mut img, py * cam.width + px, &v, cfg);
        }
    }
    Ok(img)
}

/// Materializes every dynamic Gaussian at `t` and renders the result.
pub fn render_at(scene: &[DynamicGaussian], t: f64, cam: &OrthoCamera) -> Result<ImageBuffer> {
    render(&materialize_all(scene, t)?, cam)
}

pub fn render_at_with(
    scene: &[DynamicGaussian],
    t: f64,
    cam: &OrthoCamera,
    cfg: &RasterConfig,
) -> Result<ImageBuffer> {
    render_with(&materialize_all(scene, t)?, cam, cfg).map(|(img, _)| img)
}

/// Per-pixel fingerprint of the blend: which splats contributed, in order,
/// and which hit the opacity clamp. The image is differentiable in the splat
/// parameters wherever this stays fixed.
pub fn blend_structure(splats: &[Splat], cam: &OrthoCamera, cfg: &RasterConfig) -> Result<Vec<u64>> {
    use std::hash::{Hash, Hasher};
    let frame = prepare(splats, cam, cfg)?;
    let all: Vec<usize> = (0..frame.splats.len()).collect();
    let mut out = Vec::with_capacity(cam.width * cam.height);
    let mut rec = Vec::new();
    for py in 0..cam.height {
        for px in 0..cam.width {
            rec.clear();
            shade_pixel(px, py, &frame.splats, &all, cfg, Some(&mut rec));
            let mut h = std::collections::hash_map::DefaultHasher::new();
            for c in &rec {
                frame.splats[c.splat].source.hash(&mut h);
                c.clamped.hash(&mut h);
            }
            out.push(h.finish());
        }
    }
    Ok(out)
}

/// Indices of the input splats that contribute to at least one pixel.
pub fn contributing_splats(splats: &[Splat], cam: &OrthoCamera, cfg: &RasterConfig) -> Result<Vec<usize>> {
    let frame = prepare(splats, cam, cfg)?;
    let all: Vec<usize> = (0..frame.splats.len()).collect();
    let mut seen = vec![false; splats.len()];
    let mut rec = Vec::new();
    for py in 0..cam.height {
        for px in 0..cam.width {
            rec.clear();
            shade_pixel(px, py, &frame.splats, &all, cfg, Some(&mut rec));
            for c in &rec {
                seen[frame.splats[c.splat].source] = true;
            }
        }
    }
    Ok((0..splats.len()).filter(|i| seen[*i]).collect())
}
