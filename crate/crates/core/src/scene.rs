//! Scene JSON: `{"frame_time": t, "gaussians": [...]}`.
//!
//! Reals are written in positional decimal with 17 significant digits, which
//! reloads to the identical `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::gaussian::{
    ensure_unique_ids, normalize_quaternion, DeformationParams, DynamicGaussian, GaussianId,
    Quaternion, StaticGaussian,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frame_time: f64,
    pub gaussians: Vec<DynamicGaussian>,
}

/// Formats a finite real with 17 significant digits, positional where the
/// exponent is moderate.
pub fn fmt_real(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    let sci = format!("{v:.16e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-8..=16).contains(&exp) {
        return sci;
    }
    let (sign, mant) = match mant.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mant),
    };
    let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    let point = exp + 1;
    let body = if point <= 0 {
        format!("0.{}{}", "0".repeat((-point) as usize), digits)
    } else if point as usize >= digits.len() {
        format!("{}{}.0", digits, "0".repeat(point as usize - digits.len()))
    } else {
        let (a, b) = digits.split_at(point as usize);
        format!("{a}.{b}")
    };
    format!("{sign}{body}")
}

fn fmt_vec(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&fmt_real(*x));
    }
    out.push(']');
}

/// One Gaussian as a JSON object on a single line.
pub fn gaussian_json(g: &DynamicGaussian) -> String {
    let mut s = String::new();
    let b = &g.base;
    let d = &g.deform;
    let _ = write!(s, "{{\"id\": [{}, {}], \"mu\": ", g.id.frame, g.id.token);
    fmt_vec(&mut s, b.mu.as_slice());
    s.push_str(", \"scale\": ");
    fmt_vec(&mut s, b.scale.as_slice());
    s.push_str(", \"quat\": ");
    fmt_vec(&mut s, &b.rotation.to_array());
    let _ = write!(s, ", \"alpha\": {}, \"color\": ", fmt_real(b.opacity));
    fmt_vec(&mut s, b.color.as_slice());
    s.push_str(", \"velocity\": ");
    fmt_vec(&mut s, d.velocity.as_slice());
    s.push_str(", \"gamma\": ");
    fmt_vec(&mut s, &[d.gamma0, d.gamma1]);
    let _ = write!(s, ", \"t0\": {}}}", fmt_real(d.t0));
    s
}

/// The `"gaussians"` array body, one Gaussian per line.
pub fn gaussians_json(gs: &[DynamicGaussian]) -> String {
    let mut s = String::from("[");
    for (i, g) in gs.iter().enumerate() {
        s.push_str(if i == 0 { "\n    " } else { ",\n    " });
        s.push_str(&gaussian_json(g));
    }
    s.push_str(if gs.is_empty() { "]" } else { "\n  ]" });
    s
}

impl Scene {
    pub fn new(frame_time: f64, gaussians: Vec<DynamicGaussian>) -> Self {
        Scene {
            frame_time,
            gaussians,
        }
    }

    pub fn to_json(&self) -> String {
        format!(
            "{{\n  \"frame_time\": {},\n  \"gaussians\": {}\n}}\n",
            fmt_real(self.frame_time),
            gaussians_json(&self.gaussians)
        )
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Self::from_value(&v)
    }

    pub fn from_value(v: &serde_json::Value) -> std::result::Result<Self, String> {
        let frame_time = v
            .get("frame_time")
            .and_then(|t| t.as_f64())
            .ok_or("missing numeric \"frame_time\"")?;
        let gs = v.get("gaussians").ok_or("missing \"gaussians\"")?;
        let gaussians = parse_gaussians(gs)?;
        Ok(Scene {
            frame_time,
            gaussians,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|m| Error::parse(path, m))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: [u64; 2],
    mu: [f64; 3],
    scale: [f64; 3],
    quat: [f64; 4],
    alpha: f64,
    color: [f64; 3],
    velocity: [f64; 3],
    gamma: [f64; 2],
    t0: f64,
}

fn record_to_gaussian(r: Record) -> Result<DynamicGaussian> {
    // Stored quaternions are already unit length; renormalizing them again
    // could perturb the last bit and break exact round trips.
    let q = Quaternion {
        w: r.quat[0],
        x: r.quat[1],
        y: r.quat[2],
        z: r.quat[3],
    };
    let rotation = if (q.norm() - 1.0).abs() <= 1e-12 {
        q
    } else {
        normalize_quaternion(r.quat)?
    };
    let mut base = StaticGaussian::new(
        Vector3::from(r.mu),
        Vector3::from(r.scale),
        rotation.to_array(),
        r.alpha,
        Vector3::from(r.color),
    )?;
    base.rotation = rotation;
    let deform = DeformationParams::new(Vector3::from(r.velocity), r.gamma[0], r.gamma[1], r.t0)?;
    Ok(DynamicGaussian {
        id: GaussianId::new(r.id[0], r.id[1]),
        base,
        deform,
    })
}

pub fn parse_gaussians(v: &serde_json::Value) -> std::result::Result<Vec<DynamicGaussian>, String> {
    let arr = v.as_array().ok_or("\"gaussians\" must be an array")?;
    let mut out = Vec::with_capacity(arr.len());
    for (i, item) in arr.iter().enumerate() {
        let r: Record = serde_json::from_value(item.clone()).map_err(|e| format!("gaussian {i}: {e}"))?;
        out.push(record_to_gaussian(r).map_err(|e| format!("gaussian {i}: {e}"))?);
    }
    ensure_unique_ids(out.iter().map(|g| &g.id)).map_err(|e| e.to_string())?;
    Ok(out)
}
