use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;
use splatstream::engine::{self, CanonicalSceneState, Renders, StreamSink};
use splatstream::losses::{json_real, FrameMetrics, LossTerms};
use splatstream::predictor::{decode_fit, encode_fit, FitPredictor, FitState, FixturePredictor, Predictor};
use splatstream::raster::{render_at_with, render_with};
use splatstream::scene::Scene;
use splatstream::synth::{frame_paths, make_scene, perturb_depth, read_frame, read_frames, SceneSpec};
use splatstream::{DeformationParams, DynamicGaussian, Error, ImageBuffer, OrthoCamera, RasterConfig};

use crate::config::RunConfig;
use crate::PredictorKind;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn input(msg: impl Display) -> Self {
        Failure {
            code: 2,
            msg: msg.to_string(),
        }
    }

    fn render(msg: impl Display) -> Self {
        Failure {
            code: 3,
            msg: msg.to_string(),
        }
    }

    /// Exit code for an error raised while computing rather than loading.
    fn compute(e: Error) -> Self {
        let code = match e {
            Error::FitDiverged(_) => 4,
            Error::Io(_) | Error::Parse { .. } | Error::Json(_) => 2,
            _ => 3,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).expect("json value") + "\n";
    fs::write(path, text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn write_image(dir: &Path, img: &ImageBuffer, rgb: &str, depth: &str) -> Result<(), Failure> {
    img.write_ppm(dir.join(rgb)).map_err(Failure::compute)?;
    img.write_depth(dir.join(depth)).map_err(Failure::compute)
}

fn load_frames(dir: &Path) -> Result<Vec<ImageBuffer>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::input(format!("{} is not a directory", dir.display())));
    }
    let frames = read_frames(dir).map_err(Failure::input)?;
    if frames.is_empty() {
        return Err(Failure::input(format!("no frame_*.ppm files in {}", dir.display())));
    }
    Ok(frames)
}

pub fn render(cfg: &RunConfig, scene: &Path, time: Option<f64>, out: &Path) -> Result<(), Failure> {
    let scene = Scene::read(scene).map_err(Failure::input)?;
    let cam = cfg.camera.camera();
    cam.validate().map_err(Failure::input)?;
    let t = time.unwrap_or(scene.frame_time);
    let img = render_at_with(&scene.gaussians, t, &cam, &RasterConfig::default()).map_err(Failure::render)?;
    create_dir(out)?;
    write_image(out, &img, "rgb.ppm", "depth.gsdp")?;
    img.write_alpha(out.join("alpha.gsdp")).map_err(Failure::compute)?;
    log::info!("rendered {} gaussians at t = {t}", scene.gaussians.len());
    Ok(())
}

fn curve_csv(path: &Path, curve: &[LossTerms]) -> Result<(), Failure> {
    let mut s = String::from("iter,total,mse,depth,mask\n");
    for (i, t) in curve.iter().enumerate() {
        s.push_str(&format!("{i},{},{},{},{}\n", t.total, t.mse, t.depth, t.mask));
    }
    fs::write(path, s).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

pub fn fit(cfg: &RunConfig, frames_dir: &Path, out: &Path) -> Result<(), Failure> {
    let frames = load_frames(frames_dir)?;
    cfg.fit.validate().map_err(Failure::input)?;
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| (f.width, f.height) != (w, h)) {
        return Err(Failure::input("frames differ in size"));
    }
    let cam = cfg.camera.for_size(w, h);
    cam.validate().map_err(Failure::input)?;
    create_dir(out)?;
    let rcfg = RasterConfig::default();

    let mut states: Vec<FitState> = Vec::with_capacity(frames.len());
    let mut psnrs = Vec::new();
    let mut depth_weights = Vec::new();
    let diverged = |k: usize, e: Error, psnrs: &[f64]| -> Failure {
        let summary = json!({
            "status": "diverged",
            "error": e.to_string(),
            "frames": frames.len(),
            "completed": k,
            "psnr": psnrs.iter().map(|&p| json_real(p)).collect::<Vec<_>>(),
        });
        let _ = write_json(&out.join("summary.json"), &summary);
        Failure::compute(e)
    };
    for (k, frame) in frames.iter().enumerate() {
        let dir = out.join(format!("frame_{k:04}"));
        create_dir(&dir)?;
        let (splats, report) = match encode_fit(frame, &cam, k as u64, &cfg.fit) {
            Ok(r) => r,
            Err(e) => return Err(diverged(k, e, &psnrs)),
        };
        log::info!("frame {k}: psnr {:.2} dB after {} iterations", report.psnr, report.iterations);
        curve_csv(&dir.join("loss_curve.csv"), &report.loss_curve)?;
        let (img, _) = render_with(&splats, &cam, &rcfg).map_err(Failure::render)?;
        write_image(&dir, &img, "render.ppm", "render.depth.gsdp")?;
        psnrs.push(report.psnr);
        depth_weights.push(report.mean_depth_weight);
        states.push(FitState {
            frame: k as u64,
            gaussians: splats,
            observation: frame.clone(),
        });
    }

    // Scene k holds frame k's Gaussians with their backward deformation
    // (identity for frame 0); forward.json moves them on to frame k + 1.
    let mut decode_psnr = Vec::new();
    let mut backward: Vec<Option<std::collections::BTreeMap<_, DeformationParams>>> = vec![None; states.len()];
    for k in 1..states.len() {
        let (o, report) = match decode_fit(&states[k - 1], &states[k], &[], &cam, &cfg.fit) {
            Ok(r) => r,
            Err(e) => return Err(diverged(k, e, &psnrs)),
        };
        let dir = out.join(format!("frame_{:04}", k - 1));
        let t = (k - 1) as f64;
        let fwd: Vec<DynamicGaussian> = states[k - 1]
            .gaussians
            .iter()
            .map(|s| DynamicGaussian {
                id: s.id,
                base: s.gaussian,
                deform: o.forward_deform[&s.id].shifted(t),
            })
            .collect();
        Scene::new(t, fwd).write(dir.join("forward.json")).map_err(Failure::compute)?;
        curve_csv(&dir.join("decode_curve.csv"), &report.loss_curve)?;
        decode_psnr.push(report.psnr);
        backward[k] = Some(o.backward_deform);
    }
    for (k, s) in states.iter().enumerate() {
        let t = k as f64;
        let gs = s
            .gaussians
            .iter()
            .map(|g| DynamicGaussian {
                id: g.id,
                base: g.gaussian,
                deform: backward[k]
                    .as_ref()
                    .map_or(DeformationParams::identity(t), |b| b[&g.id].shifted(t - 1.0)),
            })
            .collect();
        Scene::new(t, gs)
            .write(out.join(format!("frame_{k:04}")).join("scene.json"))
            .map_err(Failure::compute)?;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let summary = json!({
        "status": "ok",
        "frames": frames.len(),
        "seed": cfg.fit.seed,
        "deterministic_init": cfg.fit.deterministic_init,
        "gaussians_per_frame": cfg.fit.n_gaussians(w, h),
        "psnr": psnrs.iter().map(|&p| json_real(p)).collect::<Vec<_>>(),
        "mean_psnr": json_real(mean(&psnrs)),
        "mean_depth_weight": json_real(mean(&depth_weights)),
        "decode_psnr": decode_psnr.iter().map(|&p| json_real(p)).collect::<Vec<_>>(),
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("json"));
    Ok(())
}

pub struct StreamOpts {
    pub predictor: PredictorKind,
    pub max_frames: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

struct FileSink {
    out: PathBuf,
    cam: OrthoCamera,
    checkpoint_every: Option<usize>,
    telemetry: BufWriter<File>,
    failed: Vec<usize>,
}

impl StreamSink for FileSink {
    fn interval(&mut self, state: &CanonicalSceneState, renders: &Renders) -> splatstream::Result<()> {
        let k = state.frame_index;
        for (t, img) in renders {
            img.write_ppm(self.out.join("renders").join(format!("t{t:09.4}.ppm")))?;
        }
        let key = match renders.iter().find(|(t, _)| *t == k as f64) {
            Some((_, img)) => img.clone(),
            None => engine::render_state(state, k as f64, &self.cam, &RasterConfig::default())?,
        };
        let kf = self.out.join("keyframes");
        key.write_ppm(kf.join(format!("frame_{k:04}.ppm")))?;
        key.write_depth(kf.join(format!("frame_{k:04}.depth.gsdp")))?;
        writeln!(self.telemetry, "{}", state.telemetry.to_json())?;
        self.telemetry.flush()?;
        if let Some(n) = self.checkpoint_every {
            if n > 0 && k % n as u64 == 0 {
                state.write_checkpoint(self.out.join("checkpoints").join(format!("checkpoint_{k:04}.json")))?;
            }
        }
        Ok(())
    }

    fn failed(&mut self, source_frame: usize, err: &Error) {
        log::warn!("frame {source_frame} dropped: {err}");
        self.failed.push(source_frame);
    }
}

pub fn stream(cfg: &RunConfig, frames_dir: &Path, opts: &StreamOpts, out: &Path) -> Result<(), Failure> {
    if !frames_dir.is_dir() {
        return Err(Failure::input(format!("{} is not a directory", frames_dir.display())));
    }
    cfg.stream.validate().map_err(Failure::input)?;
    let mut paths = frame_paths(frames_dir).map_err(Failure::input)?;
    if let Some(n) = opts.max_frames {
        paths.truncate(n);
    }
    if paths.is_empty() {
        return Err(Failure::input(format!("no frame_*.ppm files in {}", frames_dir.display())));
    }
    let first = read_frame(&paths[0].0, &paths[0].1).map_err(Failure::input)?;
    let cam = cfg.camera.for_size(first.width, first.height);
    cam.validate().map_err(Failure::input)?;

    let predictor: Box<dyn Predictor> = match opts.predictor {
        PredictorKind::Fixture => {
            let p = cfg
                .paths
                .fixture
                .as_ref()
                .ok_or_else(|| Failure::input("the fixture predictor needs --fixture or paths.fixture"))?;
            Box::new(FixturePredictor::load(p).map_err(Failure::input)?)
        }
        PredictorKind::Fit => {
            cfg.fit.validate().map_err(Failure::input)?;
            Box::new(FitPredictor {
                cfg: cfg.fit.clone(),
                camera: Some(cam),
            })
        }
    };
    let resume = match &cfg.paths.resume {
        Some(p) => Some(CanonicalSceneState::read_checkpoint(p).map_err(Failure::input)?),
        None => None,
    };
    let skip = resume.as_ref().map_or(0, |s| s.frame_index as usize + 1);
    if skip >= paths.len() && resume.is_some() {
        log::warn!("checkpoint is at frame {}; no frames left to process", skip - 1);
    }

    for sub in ["renders", "keyframes", "checkpoints"] {
        create_dir(&out.join(sub))?;
    }
    let telemetry = File::create(out.join("telemetry.jsonl")).map_err(|e| Failure::input(e.to_string()))?;
    let mut sink = FileSink {
        out: out.to_path_buf(),
        cam,
        checkpoint_every: opts.checkpoint_every,
        telemetry: BufWriter::new(telemetry),
        failed: Vec::new(),
    };
    let frames = paths.iter().skip(skip).map(|(r, d)| read_frame(r, d));
    let summary = engine::run_stream(
        frames,
        predictor.as_ref(),
        &cam,
        &cfg.stream,
        &RasterConfig::default(),
        resume,
        &mut sink,
    )
    .map_err(Failure::compute)?;
    summary
        .state
        .write_checkpoint(out.join("checkpoint.json"))
        .map_err(Failure::compute)?;
    let report = json!({
        "predictor": predictor.name(),
        "steps": summary.steps,
        "failed": summary.failed,
        "failed_frames": sink.failed.iter().map(|i| i + skip).collect::<Vec<_>>(),
        "final_frame": summary.state.frame_index,
        "max_population": summary.max_population,
        "max_frame_count": summary.state.max_frame_count,
    });
    write_json(&out.join("summary.json"), &report)?;
    println!("{}", serde_json::to_string(&report).expect("json"));
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let s = &cfg.synth;
    let spec = match &s.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SceneSpec>(&text).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?
        }
        None => SceneSpec::random(cfg.seed, s.width, s.height, s.frames, s.blobs),
    };
    let mut scene = make_scene(&spec).map_err(Failure::input)?;
    if s.depth_noise != 0.0 {
        scene.frames = perturb_depth(&scene.frames, s.depth_noise, spec.seed ^ 0xD3E7).map_err(Failure::input)?;
    }
    scene.write(out).map_err(Failure::compute)?;
    println!(
        "{}",
        json!({"frames": spec.frames, "blobs": spec.blobs.len(), "width": spec.width, "height": spec.height})
    );
    Ok(())
}

pub fn metrics(rendered: &Path, reference: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let a = load_frames(rendered)?;
    let b = load_frames(reference)?;
    if a.len() != b.len() {
        return Err(Failure::input(format!(
            "{} has {} frames, {} has {}",
            rendered.display(),
            a.len(),
            reference.display(),
            b.len()
        )));
    }
    let rows = a
        .iter()
        .zip(&b)
        .enumerate()
        .map(|(k, (x, y))| FrameMetrics::compute(k, x, y))
        .collect::<splatstream::Result<Vec<_>>>()
        .map_err(Failure::input)?;
    let n = rows.len() as f64;
    let depth: Vec<f64> = rows.iter().filter_map(|r| r.depth_loss).collect();
    let summary = json!({
        "frames": rows.len(),
        "mean_psnr": json_real(rows.iter().map(|r| r.psnr).sum::<f64>() / n),
        "mean_ssim": json_real(rows.iter().map(|r| r.ssim).sum::<f64>() / n),
        "mean_depth_loss": if depth.is_empty() {
            serde_json::Value::Null
        } else {
            json_real(depth.iter().sum::<f64>() / depth.len() as f64)
        },
    });
    if let Some(out) = out {
        create_dir(out)?;
        let mut s = String::new();
        for r in &rows {
            s.push_str(&r.to_json().to_string());
            s.push('\n');
        }
        fs::write(out.join("metrics.jsonl"), s).map_err(|e| Failure::input(e.to_string()))?;
        write_json(&out.join("summary.json"), &summary)?;
    }
    println!("{}", serde_json::to_string(&summary).expect("json"));
    Ok(())
}
