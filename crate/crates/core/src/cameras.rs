//! Pinhole cameras and multi-view rig layouts.
//!
//! Camera frame follows the usual vision convention: `x` right, `y` down,
//! `z` along the optical axis. Pixel `(u, v)` has its centre at integer
//! coordinates, with `v = 0` the top row.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

/// Result of projecting a point that lies in front of the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// Camera-frame `z`.
    pub depth: f64,
}

impl Camera {
    /// Square-pixel camera with horizontal field of view `hfov` (radians) and
    /// the principal point at the image centre.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        width: u32,
        height: u32,
        hfov: f64,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::config("look_at", "camera sits on its target"));
        }
        let forward = forward.normalize();
        let up = if forward.y.abs() > 0.999 {
            Vector3::z()
        } else {
            Vector3::y()
        };
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let f = (width as f64 / 2.0) / (hfov / 2.0).tan();
        let cam = Camera {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            rotation,
            translation: -(rotation * eye),
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-9) || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::config("R", "rotation must be orthonormal with determinant +1"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("fx/fy", "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("width/height", "image must be non-empty"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::config("cx/cy", "principal point must lie inside the image"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::config("t", "translation must be finite"));
        }
        Ok(())
    }

    pub fn to_camera_frame(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Pinhole projection; `None` when the point is at or behind the camera plane.
    #[inline]
    pub fn project(&self, x: &Vector3<f64>) -> Option<Projection> {
        let pc = self.to_camera_frame(x);
        if pc.z <= 0.0 {
            return None;
        }
        Some(Projection {
            pixel: Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy),
            depth: pc.z,
        })
    }

    /// Camera-frame ray through pixel `(u, v)`, scaled so its `z` is 1.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit optical axis in world coordinates.
    pub fn view_direction(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    fn to_doc(&self) -> CameraDoc {
        CameraDoc {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation: std::array::from_fn(|i| self.rotation[(i / 3, i % 3)]),
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
    }

    fn from_doc(doc: &CameraDoc) -> Result<Self> {
        let cam = Camera {
            fx: doc.fx,
            fy: doc.fy,
            cx: doc.cx,
            cy: doc.cy,
            rotation: Matrix3::from_row_slice(&doc.rotation),
            translation: Vector3::from(doc.translation),
            width: doc.width,
            height: doc.height,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RigKind {
    Hemisphere,
    ThreeRings,
    Semicircle,
    QuarterCircle,
}

impl RigKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RigKind::Hemisphere => "hemisphere",
            RigKind::ThreeRings => "three_rings",
            RigKind::Semicircle => "semicircle",
            RigKind::QuarterCircle => "quarter_circle",
        }
    }

    /// Layout used for each camera count of the standard ablation; other
    /// counts fall back to a hemisphere.
    pub fn for_camera_count(count: usize) -> Self {
        match count {
            36 => RigKind::ThreeRings,
            12 => RigKind::Semicircle,
            6 => RigKind::QuarterCircle,
            _ => RigKind::Hemisphere,
        }
    }

    fn default_elevations(self) -> Vec<f64> {
        match self {
            RigKind::Hemisphere => vec![10.0, 75.0],
            RigKind::ThreeRings => vec![15.0, 40.0, 65.0],
            RigKind::Semicircle | RigKind::QuarterCircle => vec![30.0],
        }
    }

    fn default_azimuth_span(self) -> f64 {
        match self {
            RigKind::Hemisphere => 360.0,
            RigKind::ThreeRings | RigKind::Semicircle => 180.0,
            RigKind::QuarterCircle => 90.0,
        }
    }
}

impl fmt::Display for RigKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RigKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hemisphere" => Ok(RigKind::Hemisphere),
            "three_rings" => Ok(RigKind::ThreeRings),
            "semicircle" => Ok(RigKind::Semicircle),
            "quarter_circle" => Ok(RigKind::QuarterCircle),
            other => Err(Error::config("kind", format!("unknown rig layout `{other}`"))),
        }
    }
}

impl TryFrom<String> for RigKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RigKind> for String {
    fn from(k: RigKind) -> String {
        k.as_str().to_string()
    }
}

/// Placement of a multi-view rig around a target point. Angles in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigLayout {
    pub kind: RigKind,
    pub camera_count: usize,
    pub radius: f64,
    pub look_at: [f64; 3],
    /// Hemisphere: `[min, max]`; three rings: one per ring; arcs: a single value.
    /// Empty selects the kind's defaults.
    #[serde(default)]
    pub elevations: Vec<f64>,
    /// Azimuth range covered by each ring; defaults per kind.
    #[serde(default)]
    pub azimuth_span: Option<f64>,
    #[serde(default = "default_image_size")]
    pub width: u32,
    #[serde(default = "default_image_size")]
    pub height: u32,
    #[serde(default = "default_hfov")]
    pub hfov: f64,
}

fn default_image_size() -> u32 {
    256
}

fn default_hfov() -> f64 {
    50.0
}

impl RigLayout {
    pub fn new(kind: RigKind, camera_count: usize, radius: f64, look_at: Vector3<f64>) -> Self {
        RigLayout {
            kind,
            camera_count,
            radius,
            look_at: [look_at.x, look_at.y, look_at.z],
            elevations: Vec::new(),
            azimuth_span: None,
            width: default_image_size(),
            height: default_image_size(),
            hfov: default_hfov(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.camera_count == 0 {
            return Err(Error::config("camera_count", "must be at least 1"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::config("radius", "must be positive"));
        }
        if !(self.hfov > 0.0 && self.hfov < 180.0) {
            return Err(Error::config("hfov", "must lie in (0, 180) degrees"));
        }
        let expected = match self.kind {
            RigKind::Hemisphere => 2,
            RigKind::ThreeRings => 3,
            RigKind::Semicircle | RigKind::QuarterCircle => 1,
        };
        if !self.elevations.is_empty() && self.elevations.len() != expected {
            return Err(Error::config(
                "elevations",
                format!("{} layout takes {expected} elevation values", self.kind),
            ));
        }
        if self.elevations.iter().any(|e| !(-89.0..=89.0).contains(e)) {
            return Err(Error::config("elevations", "must lie within ±89 degrees"));
        }
        Ok(())
    }

    fn elevations(&self) -> Vec<f64> {
        if self.elevations.is_empty() {
            self.kind.default_elevations()
        } else {
            self.elevations.clone()
        }
    }

    /// Camera positions as `(azimuth, elevation)` pairs in degrees.
    pub fn placements(&self) -> Vec<(f64, f64)> {
        let span = self.azimuth_span.unwrap_or(self.kind.default_azimuth_span());
        let elevations = self.elevations();
        let n = self.camera_count;
        match self.kind {
            RigKind::Hemisphere => {
                // Golden-angle spiral, uniform in sin(elevation) so cameras
                // cover equal areas of the spherical band.
                let (lo, hi) = (elevations[0].to_radians().sin(), elevations[1].to_radians().sin());
                let golden = 180.0 * (3.0 - 5f64.sqrt());
                (0..n)
                    .map(|i| {
                        let s = (i as f64 + 0.5) / n as f64;
                        let el = (lo + s * (hi - lo)).asin().to_degrees();
                        let az = (i as f64 * golden) % 360.0;
                        (az * span / 360.0, el)
                    })
                    .collect()
            }
            RigKind::ThreeRings => {
                let mut out = Vec::with_capacity(n);
                for (ring, &el) in elevations.iter().enumerate() {
                    let count = n / 3 + usize::from(ring < n % 3);
                    out.extend(arc_azimuths(count, span).into_iter().map(|az| (az, el)));
                }
                out
            }
            RigKind::Semicircle | RigKind::QuarterCircle => {
                arc_azimuths(n, span).into_iter().map(|az| (az, elevations[0])).collect()
            }
        }
    }
}

fn arc_azimuths(count: usize, span: f64) -> Vec<f64> {
    if count == 0 {
        return Vec::new();
    }
    if span >= 360.0 {
        return (0..count).map(|i| i as f64 * 360.0 / count as f64).collect();
    }
    if count == 1 {
        return vec![span / 2.0];
    }
    (0..count).map(|i| i as f64 * span / (count - 1) as f64).collect()
}

/// Builds the cameras of a layout, all aimed at `look_at`.
pub fn make_rig(layout: &RigLayout) -> Result<Vec<Camera>> {
    layout.validate()?;
    let target = Vector3::from(layout.look_at);
    layout
        .placements()
        .into_iter()
        .map(|(az, el)| {
            let (az, el) = (az.to_radians(), el.to_radians());
            let offset = Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
            Camera::look_at(
                target + offset * layout.radius,
                target,
                layout.width,
                layout.height,
                layout.hfov.to_radians(),
            )
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CameraDoc {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    #[serde(rename = "R")]
    rotation: [f64; 9],
    #[serde(rename = "t")]
    translation: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RigDoc {
    cameras: Vec<CameraDoc>,
}

pub fn rig_to_json(cams: &[Camera]) -> Result<String> {
    let doc = RigDoc {
        cameras: cams.iter().map(Camera::to_doc).collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn rig_from_json(text: &str) -> Result<Vec<Camera>> {
    let doc: RigDoc = serde_json::from_str(text)?;
    doc.cameras.iter().map(Camera::from_doc).collect()
}

pub fn save_rig(cams: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, rig_to_json(cams)?)?;
    Ok(())
}

pub fn load_rig(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    rig_from_json(&fs::read_to_string(path)?)
}
