//! Synthetic RGB-D sequences with known Gaussians.
//!
//! Every blob is one Gaussian moving at constant velocity. The ground truth
//! for frame `k` anchors each live blob at `t0 = k` with a sharp lifecycle
//! (`γ0 = 500`), so `render_at(gt[k], t)` reproduces the blob at any `t`
//! within half a frame of `k`. Frames are rendered by the crate's own
//! rasterizer.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{DeformationParams, DynamicGaussian, GaussianId, Splat, StaticGaussian};
use crate::image::{read_gsdp, read_ppm, ImageBuffer};
use crate::raster::{render_at_with, render_with, OrthoCamera, RasterConfig};
use crate::sampler::seeded_rng;
use crate::scene::Scene;

/// Lifecycle sharpness of ground-truth blobs.
pub const GT_GAMMA0: f64 = 500.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    /// Canonical position at frame 0.
    pub center: [f64; 3],
    pub scale: [f64; 3],
    #[serde(default = "identity_quat")]
    pub rotation: [f64; 4],
    pub color: [f64; 3],
    pub opacity: f64,
    /// Canonical units per frame, each component in `[-1, 1]`.
    #[serde(default)]
    pub velocity: [f64; 3],
    /// First frame showing the blob.
    #[serde(default)]
    pub appear: u64,
    /// First frame no longer showing it.
    #[serde(default)]
    pub vanish: Option<u64>,
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl BlobSpec {
    pub fn alive(&self, k: u64) -> bool {
        k >= self.appear && self.vanish.is_none_or(|v| k < v)
    }

    pub fn center_at(&self, t: f64) -> Vector3<f64> {
        Vector3::from(self.center) + Vector3::from(self.velocity) * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub frames: usize,
    pub blobs: Vec<BlobSpec>,
}

impl SceneSpec {
    pub fn n_blobs(&self) -> usize {
        self.blobs.len()
    }

    pub fn camera(&self) -> OrthoCamera {
        OrthoCamera {
            fx: self.fx,
            fy: self.fy,
            ..OrthoCamera::canonical(self.width, self.height)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cam = self.camera();
        cam.validate().map_err(|e| Error::Spec(e.to_string()))?;
        if self.frames == 0 {
            return Err(Error::Spec("scene needs at least one frame".into()));
        }
        for (b, blob) in self.blobs.iter().enumerate() {
            if blob.velocity.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Spec(format!("blob {b}: velocity outside [-1, 1]")));
            }
            if blob.vanish.is_some_and(|v| v <= blob.appear) {
                return Err(Error::Spec(format!("blob {b}: vanishes before it appears")));
            }
            StaticGaussian::new(
                Vector3::from(blob.center),
                Vector3::from(blob.scale),
                blob.rotation,
                blob.opacity,
                Vector3::from(blob.color),
            )
            .map_err(|e| Error::Spec(format!("blob {b}: {e}")))?;
            for k in 0..self.frames as u64 {
                if !blob.alive(k) {
                    continue;
                }
                let p = cam.project_point(&blob.center_at(k as f64));
                let inside = p.x >= 0.0 && p.x < self.width as f64 && p.y >= 0.0 && p.y < self.height as f64;
                if !inside {
                    return Err(Error::Spec(format!(
                        "blob {b} leaves the image at frame {k} (pixel {:.2}, {:.2})",
                        p.x, p.y
                    )));
                }
            }
        }
        Ok(())
    }

    /// A seeded scene on a canonical camera. Blobs drift slowly and stay
    /// inside the image; with three or more blobs one appears a third of the
    /// way in and another vanishes two thirds of the way in.
    pub fn random(seed: u64, width: usize, height: usize, frames: usize, n_blobs: usize) -> SceneSpec {
        let cam = OrthoCamera::canonical(width, height);
        let mut rng = seeded_rng(seed);
        let span = frames.saturating_sub(1).max(1) as f64;
        let blobs = (0..n_blobs)
            .map(|b| {
                let c = [rng.random_range(-0.55..0.55), rng.random_range(-0.55..0.55)];
                // Keep the whole path within [-0.8, 0.8].
                let v: [f64; 2] = std::array::from_fn(|i| {
                    let lo = ((-0.8 - c[i]) / span).max(-0.03);
                    let hi = ((0.8 - c[i]) / span).min(0.03);
                    rng.random_range(lo..=hi)
                });
                let angle: f64 = rng.random_range(-0.8..0.8);
                let (appear, vanish) = match b {
                    1 if n_blobs >= 3 && frames >= 3 => (frames as u64 / 3, None),
                    2 if n_blobs >= 3 && frames >= 3 => (0, Some(2 * frames as u64 / 3)),
                    _ => (0, None),
                };
                BlobSpec {
                    center: [c[0], c[1], rng.random_range(1.2..3.0)],
                    scale: [rng.random_range(0.08..0.2), rng.random_range(0.08..0.2), 0.05],
                    rotation: [angle.cos(), 0.0, 0.0, angle.sin()],
                    color: [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)],
                    opacity: rng.random_range(0.6..0.95),
                    velocity: [v[0], v[1], 0.0],
                    appear,
                    vanish,
                }
            })
            .collect();
        SceneSpec {
            seed,
            width,
            height,
            fx: cam.fx,
            fy: cam.fy,
            frames,
            blobs,
        }
    }

    /// Ground-truth Gaussians anchored at frame `k`, ids `(k, blob)`.
    pub fn gt_scene(&self, k: u64) -> Scene {
        let gaussians = self
            .blobs
            .iter()
            .enumerate()
            .filter(|(_, b)| b.alive(k))
            .map(|(i, b)| {
                // Blobs next to a lifecycle event fade within half a frame.
                let edge = k == b.appear && k > 0 || b.vanish == Some(k + 1);
                let gamma1 = if edge { 0.5 } else { 1.0 };
                DynamicGaussian {
                    id: GaussianId::new(k, i as u64),
                    base: StaticGaussian::new(
                        b.center_at(k as f64),
                        Vector3::from(b.scale),
                        b.rotation,
                        b.opacity,
                        Vector3::from(b.color),
                    )
                    .expect("validated blob"),
                    deform: DeformationParams {
                        velocity: Vector3::from(b.velocity),
                        gamma0: GT_GAMMA0,
                        gamma1,
                        t0: k as f64,
                    },
                }
            })
            .collect();
        Scene::new(k as f64, gaussians)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub spec: SceneSpec,
    pub camera: OrthoCamera,
    pub gt: Vec<Scene>,
    pub frames: Vec<ImageBuffer>,
}

pub fn make_scene(spec: &SceneSpec) -> Result<SynthScene> {
    make_scene_with(spec, &RasterConfig::default())
}

pub fn make_scene_with(spec: &SceneSpec, cfg: &RasterConfig) -> Result<SynthScene> {
    spec.validate()?;
    let camera = spec.camera();
    let gt: Vec<Scene> = (0..spec.frames as u64).map(|k| spec.gt_scene(k)).collect();
    let frames = gt
        .iter()
        .map(|s| render_at_with(&s.gaussians, s.frame_time, &camera, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthScene {
        spec: spec.clone(),
        camera,
        gt,
        frames,
    })
}

impl SynthScene {
    /// Ground-truth render at global time `t`, taken from the nearest key frame.
    pub fn render_truth(&self, t: f64) -> Result<ImageBuffer> {
        let k = t.round().clamp(0.0, (self.gt.len() - 1) as f64) as usize;
        render_at_with(&self.gt[k].gaussians, t, &self.camera, &RasterConfig::default())
    }

    /// Writes frames, depth planes, ground truth and a manifest into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (k, (img, gt)) in self.frames.iter().zip(&self.gt).enumerate() {
            let rgb = format!("frame_{k:04}.ppm");
            let depth = format!("frame_{k:04}.depth.gsdp");
            let scene = format!("gt_{k:04}.json");
            img.write_ppm(dir.join(&rgb))?;
            img.write_depth(dir.join(&depth))?;
            gt.write(dir.join(&scene))?;
            entries.push(serde_json::json!({"index": k, "rgb": rgb, "depth": depth, "gt": scene}));
        }
        let manifest = serde_json::json!({
            "spec": self.spec,
            "camera": {"fx": self.camera.fx, "fy": self.camera.fy, "cx": self.camera.cx, "cy": self.camera.cy,
                       "width": self.camera.width, "height": self.camera.height},
            "frames": entries,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

/// Adds seeded zero-mean Gaussian noise to every depth sample.
pub fn perturb_depth(frames: &[ImageBuffer], noise: f64, seed: u64) -> Result<Vec<ImageBuffer>> {
    if !(noise >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise level must be non-negative, got {noise}")));
    }
    if noise == 0.0 {
        return Ok(frames.to_vec());
    }
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = seeded_rng(seed);
    Ok(frames
        .iter()
        .map(|f| {
            let mut f = f.clone();
            for d in &mut f.depth {
                *d += normal.sample(&mut rng);
            }
            f
        })
        .collect())
}

/// Paths of `frame_XXXX.ppm` files in `dir`, sorted by name.
pub fn frame_paths(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir.as_ref())? {
        let p = e?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(stem) = name.strip_suffix(".ppm") {
            let depth = p.with_file_name(format!("{stem}.depth.gsdp"));
            out.push((p.clone(), depth));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads one frame. A missing depth plane reads as zeros.
pub fn read_frame(rgb_path: &Path, depth_path: &Path) -> Result<ImageBuffer> {
    let (w, h, rgb) = read_ppm(rgb_path)?;
    let depth = if depth_path.exists() {
        let plane = read_gsdp(depth_path)?;
        if plane.width != w || plane.height != h || plane.channels != 1 {
            return Err(Error::parse(
                depth_path,
                format!("depth plane is {}x{}x{}, frame is {w}x{h}", plane.width, plane.height, plane.channels),
            ));
        }
        plane.data
    } else {
        vec![0.0; w * h]
    };
    ImageBuffer::from_rgbd(w, h, rgb, depth)
}

/// Loads every PPM + GSDP pair in `dir`.
pub fn read_frames(dir: impl AsRef<Path>) -> Result<Vec<ImageBuffer>> {
    frame_paths(dir)?.iter().map(|(r, d)| read_frame(r, d)).collect()
}

/// A static frame made of one Gaussian per cell of an `nx × ny` grid, each
/// jittered inside its cell with random color, scale, depth and opacity.
pub fn dense_grid(seed: u64, width: usize, height: usize, nx: usize, ny: usize) -> Result<(Vec<Splat>, ImageBuffer)> {
    let cam = OrthoCamera::canonical(width, height);
    let mut rng = seeded_rng(seed);
    let (sx, sy) = (2.0 / nx as f64, 2.0 / ny as f64);
    let mut splats = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = -1.0 + (i as f64 + 0.5) * sx + rng.random_range(-0.3..0.3) * sx;
            let y = -1.0 + (j as f64 + 0.5) * sy + rng.random_range(-0.3..0.3) * sy;
            let z = rng.random_range(1.2..2.8);
            let s = Vector3::new(
                rng.random_range(0.3..0.7) * sx,
                rng.random_range(0.3..0.7) * sy,
                0.5 * (sx + sy) * 0.5,
            );
            let half = rng.random_range(-0.6..0.6f64);
            let color = Vector3::new(rng.random(), rng.random(), rng.random());
            let g = StaticGaussian::new(
                Vector3::new(x, y, z),
                s,
                [half.cos(), 0.0, 0.0, half.sin()],
                rng.random_range(0.6..0.95),
                color,
            )?;
            splats.push(Splat::new(GaussianId::new(0, (j * nx + i) as u64), g));
        }
    }
    let (img, _) = render_with(&splats, &cam, &RasterConfig::default())?;
    Ok((splats, img))
}

/// Two depth layers: a tiled far background and small near blobs placed
/// between token anchors, partially hiding it.
pub fn two_layer(seed: u64, width: usize, height: usize) -> Result<(Vec<Splat>, ImageBuffer)> {
    let cam = OrthoCamera::canonical(width, height);
    let mut rng = seeded_rng(seed);
    let mut splats = Vec::new();
    let n = 4;
    let s = 2.0 / n as f64;
    for j in 0..n {
        for i in 0..n {
            let g = StaticGaussian::new(
                Vector3::new(-1.0 + (i as f64 + 0.5) * s, -1.0 + (j as f64 + 0.5) * s, 2.8),
                Vector3::new(0.45 * s, 0.45 * s, 0.1),
                [1.0, 0.0, 0.0, 0.0],
                0.9,
                Vector3::new(rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.3..0.6)),
            )?;
            splats.push(Splat::new(GaussianId::new(0, splats.len() as u64), g));
        }
    }
    for _ in 0..6 {
        let x = rng.random_range(-0.75..0.75);
        let y = rng.random_range(-0.75..0.75);
        let g = StaticGaussian::new(
            Vector3::new(x, y, 1.1),
            Vector3::new(rng.random_range(0.04..0.09), rng.random_range(0.04..0.09), 0.05),
            [1.0, 0.0, 0.0, 0.0],
            0.95,
            Vector3::new(rng.random_range(0.7..1.0), rng.random_range(0.5..1.0), rng.random_range(0.0..0.3)),
        )?;
        splats.push(Splat::new(GaussianId::new(0, splats.len() as u64), g));
    }
    let (img, _) = render_with(&splats, &cam, &RasterConfig::default())?;
    Ok((splats, img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::psnr;

    fn blob(v: [f64; 3]) -> BlobSpec {
        BlobSpec {
            center: [0.0, 0.0, 1.5],
            scale: [0.05, 0.05, 0.05],
            rotation: identity_quat(),
            color: [1.0, 0.5, 0.2],
            opacity: 0.9,
            velocity: v,
            appear: 0,
            vanish: None,
        }
    }

    fn spec(frames: usize, blobs: Vec<BlobSpec>) -> SceneSpec {
        SceneSpec {
            seed: 1,
            width: 64,
            height: 48,
            fx: 100.0,
            fy: 100.0,
            frames,
            blobs,
        }
    }

    fn centroid(img: &ImageBuffer) -> (f64, f64) {
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for y in 0..img.height {
            for x in 0..img.width {
                let a = img.alpha[y * img.width + x];
                sx += a * (x as f64 + 0.5);
                sy += a * (y as f64 + 0.5);
                sw += a;
            }
        }
        (sx / sw, sy / sw)
    }

    #[test]
    fn random_specs_are_valid_and_seeded() {
        for seed in 0..20 {
            let s = SceneSpec::random(seed, 64, 64, 20, 5);
            s.validate().unwrap();
            assert_eq!(s, SceneSpec::random(seed, 64, 64, 20, 5));
        }
        let s = SceneSpec::random(3, 64, 64, 20, 5);
        assert_eq!(s.blobs[1].appear, 6);
        assert_eq!(s.blobs[2].vanish, Some(13));
        assert_ne!(s, SceneSpec::random(4, 64, 64, 20, 5));
    }

    #[test]
    fn static_blob_frames_are_identical() {
        let s = make_scene(&spec(4, vec![blob([0.0; 3])])).unwrap();
        assert!(s.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn moving_blob_shifts_ten_pixels() {
        let s = make_scene(&spec(2, vec![blob([0.1, 0.0, 0.0])])).unwrap();
        let (x0, y0) = centroid(&s.frames[0]);
        let (x1, y1) = centroid(&s.frames[1]);
        assert!((x1 - x0 - 10.0).abs() < 1e-6, "{}", x1 - x0);
        assert!((y1 - y0).abs() < 1e-9);
    }

    #[test]
    fn vanish_event_removes_blob() {
        let mut b = blob([0.0; 3]);
        b.vanish = Some(3);
        let s = make_scene(&spec(5, vec![b])).unwrap();
        for (k, f) in s.frames.iter().enumerate() {
            let total: f64 = f.alpha.iter().sum();
            assert_eq!(total > 1.0, k < 3, "frame {k}");
        }
    }

    #[test]
    fn mid_time_truth_interpolates() {
        let s = make_scene(&spec(2, vec![blob([0.1, 0.0, 0.0])])).unwrap();
        let (x0, _) = centroid(&s.frames[0]);
        let (xm, _) = centroid(&s.render_truth(0.5).unwrap());
        assert!((xm - x0 - 5.0).abs() < 1e-6);
    }

    #[test]
    fn footprint_violation_is_a_spec_error() {
        assert!(matches!(make_scene(&spec(8, vec![blob([0.1, 0.0, 0.0])])), Err(Error::Spec(_))));
        assert!(matches!(make_scene(&spec(2, vec![blob([1.5, 0.0, 0.0])])), Err(Error::Spec(_))));
    }

    #[test]
    fn gt_round_trips_through_disk() {
        let mut b = blob([0.05, -0.02, 0.0]);
        b.appear = 1;
        let s = make_scene(&spec(3, vec![blob([0.0; 3]), b])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.write(dir.path()).unwrap();
        for (k, gt) in s.gt.iter().enumerate() {
            let back = Scene::read(dir.path().join(format!("gt_{k:04}.json"))).unwrap();
            assert_eq!(&back, gt);
            let img = render_at_with(&back.gaussians, back.frame_time, &s.camera, &RasterConfig::default()).unwrap();
            assert_eq!(img, s.frames[k]);
        }
        let frames = read_frames(dir.path()).unwrap();
        assert_eq!(frames.len(), 3);
        assert!(psnr(&frames[1], &s.frames[1], 1.0).unwrap() > 45.0);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["frames"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn depth_noise_statistics() {
        let f = ImageBuffer::new(100, 100);
        assert_eq!(perturb_depth(&[f.clone()], 0.0, 3).unwrap()[0], f);
        let a = perturb_depth(&[f.clone()], 0.3, 3).unwrap();
        assert_eq!(a, perturb_depth(&[f.clone()], 0.3, 3).unwrap());
        assert_eq!(a[0].rgb, f.rgb);
        let n = a[0].depth.len() as f64;
        let mean = a[0].depth.iter().sum::<f64>() / n;
        let std = (a[0].depth.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / 0.3 - 1.0).abs() < 0.05, "{std}");
        assert!(perturb_depth(&[f], -1.0, 0).is_err());
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(dense_grid(4, 64, 64, 16, 16).unwrap(), dense_grid(4, 64, 64, 16, 16).unwrap());
        assert_ne!(two_layer(1, 64, 64).unwrap().1, two_layer(2, 64, 64).unwrap().1);
    }
}
