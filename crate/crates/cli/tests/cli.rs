use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use splatstream::image::encode_ppm;
use splatstream::predictor::{FixtureFrame, FixturePredictor};
use splatstream::raster::render_at;
use splatstream::synth::{make_scene, BlobSpec, SceneSpec, SynthScene};
use splatstream::{GaussianId, ImageBuffer, OrthoCamera, Splat};
use tempfile::TempDir;

fn gsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsplat"))
        .args(args)
        .env("GSPLAT_LOG", "error")
        .output()
        .expect("spawn gsplat")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.lines().last().expect("summary line")).unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn blob(center: [f64; 3], velocity: [f64; 3]) -> BlobSpec {
    BlobSpec {
        center,
        scale: [0.15, 0.12, 0.05],
        rotation: [1.0, 0.0, 0.0, 0.0],
        color: [0.9, 0.5, 0.2],
        opacity: 0.9,
        velocity,
        appear: 0,
        vanish: None,
    }
}

fn small_spec(frames: usize) -> SceneSpec {
    let mut gone = blob([0.3, 0.3, 2.0], [0.0; 3]);
    gone.color = [0.2, 0.4, 0.9];
    gone.vanish = (frames >= 2).then_some(frames as u64 / 2);
    SceneSpec {
        seed: 5,
        width: 32,
        height: 32,
        fx: 16.0,
        fy: 16.0,
        frames,
        blobs: vec![blob([-0.3, -0.1, 1.5], [0.02, 0.01, 0.0]), gone],
    }
}

/// Fixture replaying the ground truth: frame k's blobs with their own
/// deformation, and forward fields for every blob alive at k - 1.
fn fixture_from(scene: &SynthScene) -> FixturePredictor {
    let frames = scene
        .gt
        .iter()
        .enumerate()
        .map(|(k, gt)| {
            let gaussians: Vec<Splat> = gt.gaussians.iter().map(|g| Splat::new(g.id, g.base)).collect();
            let backward = gt.gaussians.iter().map(|g| (g.id, g.deform.shifted(1.0 - g.deform.t0))).collect();
            let forward: BTreeMap<GaussianId, _> = if k == 0 {
                BTreeMap::new()
            } else {
                scene.gt[k - 1]
                    .gaussians
                    .iter()
                    .map(|g| (g.id, g.deform.shifted(-g.deform.t0)))
                    .collect()
            };
            FixtureFrame {
                frame_time: k as f64,
                gaussians,
                backward,
                forward,
            }
        })
        .collect();
    FixturePredictor::new(frames)
}

struct Workspace {
    _tmp: TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        Workspace { _tmp: tmp, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn synth(&self, name: &str, spec: &SceneSpec) -> (PathBuf, SynthScene) {
        let scene = make_scene(spec).unwrap();
        let dir = self.path(name);
        scene.write(&dir).unwrap();
        (dir, scene)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, text).unwrap();
        path
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().into_owned();
        if e.file_type().unwrap().is_dir() {
            for (k, v) in files(&e.path()) {
                out.insert(format!("{name}/{k}"), v);
            }
        } else {
            out.insert(name, fs::read(e.path()).unwrap());
        }
    }
    out
}

#[test]
fn render_empty_scene_is_black() {
    let ws = Workspace::new();
    let scene = ws.write("empty.json", "{\"frame_time\": 0.0, \"gaussians\": []}");
    let cfg = ws.write("c.toml", "camera.width = 16\ncamera.height = 8\n");
    let out = ws.path("out");
    let o = gsplat(&["--config", p(&cfg), "render", p(&scene), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ppm = fs::read(out.join("rgb.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 8\n255\n"));
    assert!(ppm[ppm.len() - 16 * 8 * 3..].iter().all(|&b| b == 0));
    assert!(out.join("depth.gsdp").exists() && out.join("alpha.gsdp").exists());
}

#[test]
fn render_matches_reference_bytes_and_rejects_bad_times() {
    let ws = Workspace::new();
    let (dir, scene) = ws.synth("s", &small_spec(3));
    let cfg = ws.write("c.toml", "camera.width = 32\ncamera.height = 32\n");
    let out = ws.path("out");
    let o = gsplat(&["--config", p(&cfg), "render", p(&dir.join("gt_0001.json")), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let cam = OrthoCamera::canonical(32, 32);
    let img = render_at(&scene.gt[1].gaussians, 1.0, &cam).unwrap();
    assert_eq!(fs::read(out.join("rgb.ppm")).unwrap(), encode_ppm(32, 32, &img.rgb));
    assert_eq!(fs::read(out.join("rgb.ppm")).unwrap(), fs::read(dir.join("frame_0001.ppm")).unwrap());

    let o = gsplat(&["--config", p(&cfg), "render", p(&dir.join("gt_0001.json")), "--time", "4.5", "--out", p(&out)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("OutOfWindow"));

    let bad = ws.write("bad.json", "{\"frame_time\": 0.0}");
    assert_eq!(code(&gsplat(&["render", p(&bad), "--out", p(&out)])), 2);
}

#[test]
fn fit_static_scene_and_input_errors() {
    let ws = Workspace::new();
    let mut spec = small_spec(1);
    spec.blobs[0].velocity = [0.0; 3];
    let (dir, _) = ws.synth("s", &spec);
    let cfg = ws.write("c.toml", "seed = 2\nfit.iterations = 300\nfit.tokens = { nx = 4, ny = 4 }\n");
    let out = ws.path("fit");
    let o = gsplat(&["--config", p(&cfg), "fit", p(&dir), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary, stdout_json(&o));
    let psnr = summary["mean_psnr"].as_f64().unwrap();
    assert!(psnr >= 30.0, "psnr {psnr}");
    let csv = fs::read_to_string(out.join("frame_0000/loss_curve.csv")).unwrap();
    assert!(csv.starts_with("iter,total,mse,depth,mask\n"));
    assert!(csv.lines().count() > 10);
    assert!(out.join("frame_0000/scene.json").exists());

    let empty = ws.path("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&gsplat(&["fit", p(&empty), "--out", p(&ws.path("x"))])), 2);
    let bad = ws.write("bad.toml", "fit.iterationz = 3\n");
    assert_eq!(code(&gsplat(&["--config", p(&bad), "fit", p(&dir), "--out", p(&ws.path("y"))])), 2);
}

#[test]
fn stream_with_fit_keeps_population_bounded() {
    let ws = Workspace::new();
    let (dir, scene) = ws.synth("s", &small_spec(20));
    let cfg = ws.write(
        "c.toml",
        "fit.iterations = 40\nfit.decode_iterations = 10\nfit.candidates = 2\nfit.tokens = { nx = 3, ny = 3 }\n",
    );
    let out = ws.path("st");
    let o = gsplat(&["--config", p(&cfg), "stream", p(&dir), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = fs::read_to_string(out.join("telemetry.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), scene.frames.len());
    for (k, l) in lines.iter().enumerate() {
        assert_eq!(l["frame"], k);
        assert!(l["population"].as_u64().unwrap() <= 18, "{l}");
        assert_eq!(
            l["population"].as_u64().unwrap(),
            l["persistent"].as_u64().unwrap() + l["emerging"].as_u64().unwrap()
        );
    }
    // The final checkpoint reloads.
    let ckpt = splatstream::engine::CanonicalSceneState::read_checkpoint(out.join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.frame_index, 19);
}

#[test]
fn fixture_stream_resumes_identically_and_is_thread_invariant() {
    let ws = Workspace::new();
    let (dir, scene) = ws.synth("s", &small_spec(16));
    let fixture = ws.path("fixture.json");
    fixture_from(&scene).write(&fixture).unwrap();
    let f = p(&fixture);

    let full = ws.path("full");
    let o = gsplat(&["stream", p(&dir), "--predictor", "fixture", "--fixture", f, "--out", p(&full)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let first = ws.path("first");
    let o = gsplat(&[
        "stream", p(&dir), "--predictor", "fixture", "--fixture", f, "--max-frames", "11", "--out", p(&first),
    ]);
    assert_eq!(code(&o), 0);
    let second = ws.path("second");
    let ckpt = first.join("checkpoint.json");
    let o = gsplat(&[
        "stream", p(&dir), "--predictor", "fixture", "--fixture", f, "--resume", p(&ckpt), "--out", p(&second),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let a = files(&full);
    let b = files(&second);
    assert_eq!(a["checkpoint.json"], b["checkpoint.json"]);
    for (name, bytes) in &b {
        if name.starts_with("renders/") || name.starts_with("keyframes/") {
            assert_eq!(&a[name], bytes, "{name}");
        }
    }
    assert_eq!(b.keys().filter(|n| n.starts_with("keyframes/")).count(), 2 * 5);
    let tel_a: Vec<_> = std::str::from_utf8(&a["telemetry.jsonl"]).unwrap().lines().skip(11).collect();
    let tel_b: Vec<_> = std::str::from_utf8(&b["telemetry.jsonl"]).unwrap().lines().collect();
    assert_eq!(tel_a, tel_b);

    let one = ws.path("one");
    let o = gsplat(&[
        "--threads", "1", "stream", p(&dir), "--predictor", "fixture", "--fixture", f, "--out", p(&one),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(files(&one), a);

    // Key frames of the ground-truth replay match the frames themselves.
    let m = gsplat(&["metrics", p(&full.join("keyframes")), p(&dir)]);
    assert_eq!(code(&m), 0);
    assert_eq!(stdout_json(&m)["mean_psnr"], "inf");
}

#[test]
fn single_frame_stream_only_initializes() {
    let ws = Workspace::new();
    let (dir, scene) = ws.synth("s", &small_spec(1));
    let fixture = ws.path("fixture.json");
    fixture_from(&scene).write(&fixture).unwrap();
    let out = ws.path("st");
    let o = gsplat(&["stream", p(&dir), "--predictor", "fixture", "--fixture", p(&fixture), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let tel = fs::read_to_string(out.join("telemetry.jsonl")).unwrap();
    assert_eq!(tel.lines().count(), 1);
    assert_eq!(stdout_json(&o)["steps"], 0);
    assert!(out.join("keyframes/frame_0000.ppm").exists());
    assert!(!out.join("keyframes/frame_0001.ppm").exists());
}

#[test]
fn strict_stream_aborts_on_failure() {
    let ws = Workspace::new();
    let (dir, scene) = ws.synth("s", &small_spec(6));
    let mut fx = fixture_from(&scene);
    fx.frames.truncate(4);
    let fixture = ws.path("fixture.json");
    fx.write(&fixture).unwrap();
    let f = p(&fixture);
    let o = gsplat(&["stream", p(&dir), "--predictor", "fixture", "--fixture", f, "--out", p(&ws.path("a"))]);
    assert_eq!(code(&o), 0);
    let s = stdout_json(&o);
    assert_eq!((s["steps"].as_u64(), s["failed"].as_u64()), (Some(3), Some(2)));
    let o = gsplat(&[
        "stream", p(&dir), "--predictor", "fixture", "--fixture", f, "--strict", "--out", p(&ws.path("b")),
    ]);
    assert_eq!(code(&o), 3);
    let o = gsplat(&["stream", p(&dir), "--predictor", "fixture", "--out", p(&ws.path("c"))]);
    assert_eq!(code(&o), 2);
}

fn read_ppm_bytes(path: &Path) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    // "P6\n<w> <h>\n255\n" followed by raw samples.
    let mut newlines = 0;
    let start = bytes
        .iter()
        .position(|&b| {
            newlines += (b == b'\n') as usize;
            newlines == 3
        })
        .unwrap();
    bytes[start + 1..].to_vec()
}

#[test]
fn metrics_on_identical_noisy_and_mismatched_dirs() {
    let ws = Workspace::new();
    let (w, h) = (64, 48);
    let clean = ws.path("clean");
    let noisy = ws.path("noisy");
    fs::create_dir_all(&clean).unwrap();
    fs::create_dir_all(&noisy).unwrap();
    let normal = Normal::new(0.0, 0.1).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    for k in 0..3 {
        let mut a = ImageBuffer::new(w, h);
        for (i, v) in a.rgb.iter_mut().enumerate() {
            *v = 0.3 + 0.4 * ((i * 7 + k) % 13) as f64 / 12.0;
        }
        let mut b = a.clone();
        for v in &mut b.rgb {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
        a.write_ppm(clean.join(format!("frame_{k:04}.ppm"))).unwrap();
        b.write_ppm(noisy.join(format!("frame_{k:04}.ppm"))).unwrap();
    }

    let o = gsplat(&["metrics", p(&clean), p(&clean)]);
    assert_eq!(code(&o), 0);
    let s = stdout_json(&o);
    assert_eq!(s["mean_psnr"], "inf");
    assert_eq!(s["mean_ssim"], 1.0);

    // Reference value straight from the stored 8-bit samples.
    let mut expected = 0.0;
    for k in 0..3 {
        let a = read_ppm_bytes(&clean.join(format!("frame_{k:04}.ppm")));
        let b = read_ppm_bytes(&noisy.join(format!("frame_{k:04}.ppm")));
        let mse: f64 = a
            .iter()
            .zip(&b)
            .map(|(&x, &y)| ((x as f64 - y as f64) / 255.0).powi(2))
            .sum::<f64>()
            / a.len() as f64;
        expected += -10.0 * mse.log10() / 3.0;
    }
    let out = ws.path("m");
    let o = gsplat(&["metrics", p(&noisy), p(&clean), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let got = stdout_json(&o)["mean_psnr"].as_f64().unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    assert!((got - 20.0).abs() < 0.5, "{got}");
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 3);

    fs::remove_file(noisy.join("frame_0002.ppm")).unwrap();
    assert_eq!(code(&gsplat(&["metrics", p(&noisy), p(&clean)])), 2);
}

#[test]
fn synth_command_is_seeded() {
    let ws = Workspace::new();
    let a = ws.path("a");
    let b = ws.path("b");
    let c = ws.path("c");
    for (dir, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        let o = gsplat(&["--seed", seed, "synth", "--frames", "3", "--width", "32", "--height", "32", "--out", p(dir)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(files(&a), files(&b));
    assert_ne!(files(&a), files(&c));
    assert!(a.join("frame_0002.depth.gsdp").exists());
    let bad = ws.write("spec.json", "{\"seed\": 1}");
    assert_eq!(code(&gsplat(&["synth", "--spec", p(&bad), "--out", p(&ws.path("d"))])), 2);
}
