//! Back-projection of per-view probability maps into a voxel grid of
//! log-probabilities. Every voxel centre is projected into each view and the
//! bilinearly sampled probabilities are multiplied, with the product kept in
//! the log domain.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cameras::Camera;
use crate::error::{Error, Result};
use crate::probmap::ProbMap2D;

/// How a voxel that projects outside a view's image is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfFramePolicy {
    /// Counts as the probability floor.
    Floor,
    /// The view is left out of that voxel's product.
    #[serde(alias = "skip_view")]
    Skip,
}

impl std::str::FromStr for OutOfFramePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "floor" => Ok(OutOfFramePolicy::Floor),
            "skip" | "skip_view" => Ok(OutOfFramePolicy::Skip),
            other => Err(Error::config("out_of_frame", format!("unknown policy `{other}`"))),
        }
    }
}

/// Placement of a voxel grid: `origin` is the centre of voxel `(0, 0, 0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: f64,
}

impl GridSpec {
    /// Cubic `n³` grid centred on the box, whose longest side is padded by `pad` on each end
    /// (as a fraction of that side).
    pub fn around_box(lo: Vector3<f64>, hi: Vector3<f64>, n: usize, pad: f64) -> Self {
        let extent = (hi - lo).max() * (1.0 + 2.0 * pad);
        let spacing = extent / n as f64;
        let center = (lo + hi) / 2.0;
        let origin = center - Vector3::repeat(spacing * (n as f64 - 1.0) / 2.0);
        GridSpec {
            dims: [n; 3],
            origin: [origin.x, origin.y, origin.z],
            spacing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::config("dims", "every grid dimension must be at least 1"));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::config("spacing", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateConfig {
    pub grid: GridSpec,
    #[serde(default = "default_eps_floor")]
    pub eps_floor: f64,
    #[serde(default = "default_policy")]
    pub out_of_frame: OutOfFramePolicy,
}

fn default_eps_floor() -> f64 {
    1e-4
}

fn default_policy() -> OutOfFramePolicy {
    OutOfFramePolicy::Floor
}

impl AggregateConfig {
    pub fn new(grid: GridSpec) -> Self {
        AggregateConfig {
            grid,
            eps_floor: default_eps_floor(),
            out_of_frame: default_policy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.eps_floor > 0.0 && self.eps_floor < 1.0) {
            return Err(Error::config("eps_floor", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Log-probability volume. Voxel `(i, j, k)` lives at `i + nx * (j + ny * k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub origin: Vector3<f64>,
    pub spacing: f64,
    /// Per-view probability floor.
    pub eps_floor: f64,
    /// Effective lower bound of `log_values`: `view_count * ln(eps_floor)`.
    pub log_floor: f64,
    pub view_count: usize,
    pub out_of_frame: OutOfFramePolicy,
    pub log_values: Vec<f64>,
}

impl VoxelGrid {
    /// Grid with every voxel at `log_value`, clamped into `[log_floor, 0]`.
    pub fn filled(spec: &GridSpec, eps_floor: f64, view_count: usize, log_value: f64) -> Self {
        let log_floor = view_count as f64 * eps_floor.ln();
        VoxelGrid {
            dims: spec.dims,
            origin: Vector3::from(spec.origin),
            spacing: spec.spacing,
            eps_floor,
            log_floor,
            view_count,
            out_of_frame: OutOfFramePolicy::Floor,
            log_values: vec![log_value.clamp(log_floor, 0.0); spec.dims.iter().product()],
        }
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            dims: self.dims,
            origin: [self.origin.x, self.origin.y, self.origin.z],
            spacing: self.spacing,
        }
    }

    pub fn len(&self) -> usize {
        self.log_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_values.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn center_of(&self, index: usize) -> Vector3<f64> {
        let [i, j, k] = self.coords(index);
        self.center(i, j, k)
    }

    /// Continuous voxel coordinates of a world point (voxel centres at integers).
    #[inline]
    pub fn to_voxel(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.origin) / self.spacing
    }

    /// Linear remap of a log value onto `[0, 1]`: 1 at probability one, 0 at the floor.
    #[inline]
    pub fn weight_of(&self, log_value: f64) -> f64 {
        if self.log_floor >= 0.0 {
            return if log_value >= 0.0 { 1.0 } else { 0.0 };
        }
        ((log_value - self.log_floor) / -self.log_floor).clamp(0.0, 1.0)
    }

    pub fn normalized_weight(&self, index: usize) -> f64 {
        self.weight_of(self.log_values[index])
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_values.iter().map(|&l| self.weight_of(l)).collect()
    }

    /// Grid with values rounded through `f32`, as they come back from a dump.
    pub fn quantized(&self) -> Self {
        VoxelGrid {
            log_values: self.log_values.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }

    /// Writes `<stem>.f32` (little-endian, x fastest) and the `<stem>.json` sidecar.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let (raw, meta) = dump_paths(stem.as_ref());
        let mut bytes = Vec::with_capacity(self.len() * 4);
        for &v in &self.log_values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(raw, bytes)?;
        let sidecar = GridSidecar {
            dims: self.dims,
            origin: [self.origin.x, self.origin.y, self.origin.z],
            spacing: self.spacing,
            eps_floor: self.eps_floor,
            log_floor: self.log_floor,
            view_count: self.view_count,
            out_of_frame: self.out_of_frame,
        };
        fs::write(meta, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Reads a dump written by [`VoxelGrid::save`]; `stem` may name either file or neither extension.
    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let (raw, meta) = dump_paths(stem.as_ref());
        let sidecar: GridSidecar = serde_json::from_str(&fs::read_to_string(&meta)?)?;
        let bytes = fs::read(&raw)?;
        let n: usize = sidecar.dims.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::format(
                bytes.len().min(4 * n),
                format!("expected {} bytes of voxel data, found {}", 4 * n, bytes.len()),
            ));
        }
        let log_values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        GridSpec {
            dims: sidecar.dims,
            origin: sidecar.origin,
            spacing: sidecar.spacing,
        }
        .validate()?;
        Ok(VoxelGrid {
            dims: sidecar.dims,
            origin: Vector3::from(sidecar.origin),
            spacing: sidecar.spacing,
            eps_floor: sidecar.eps_floor,
            log_floor: sidecar.log_floor,
            view_count: sidecar.view_count,
            out_of_frame: sidecar.out_of_frame,
            log_values,
        })
    }
}

fn dump_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let base = match stem.extension().and_then(|e| e.to_str()) {
        Some("f32") | Some("json") => stem.with_extension(""),
        _ => stem.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = base.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".f32"), with(".json"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GridSidecar {
    dims: [usize; 3],
    origin: [f64; 3],
    spacing: f64,
    eps_floor: f64,
    log_floor: f64,
    view_count: usize,
    out_of_frame: OutOfFramePolicy,
}

/// Bilinear interpolation between the four surrounding pixel centres;
/// `None` outside `[0, w-1] x [0, h-1]`.
#[inline]
pub fn sample_bilinear(map: &ProbMap2D, x: Vector2<f64>) -> Option<f64> {
    let (w, h) = (map.width, map.height);
    if !(x.x >= 0.0 && x.y >= 0.0 && x.x <= (w - 1) as f64 && x.y <= (h - 1) as f64) {
        return None;
    }
    let u0 = (x.x.floor() as usize).min(w.saturating_sub(2));
    let v0 = (x.y.floor() as usize).min(h.saturating_sub(2));
    let (u1, v1) = ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1));
    let (fu, fv) = (x.x - u0 as f64, x.y - v0 as f64);
    let top = map.get(u0, v0) * (1.0 - fu) + map.get(u1, v0) * fu;
    let bottom = map.get(u0, v1) * (1.0 - fu) + map.get(u1, v1) * fu;
    Some(top * (1.0 - fv) + bottom * fv)
}

fn compare_views(a: (&ProbMap2D, &Camera), b: (&ProbMap2D, &Camera)) -> Ordering {
    fn key(c: &Camera) -> Vec<f64> {
        let mut k = vec![c.fx, c.fy, c.cx, c.cy, c.width as f64, c.height as f64];
        k.extend(c.rotation.iter());
        k.extend(c.translation.iter());
        k
    }
    let lexi = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(x.len().cmp(&y.len()))
    };
    lexi(&key(a.1), &key(b.1)).then_with(|| lexi(&a.0.values, &b.0.values))
}

/// Consolidates per-view probability maps into a log-probability voxel grid.
///
/// Views are visited in a canonical order derived from their contents, so the
/// result does not depend on the order of the input lists.
pub fn aggregate(maps: &[ProbMap2D], cams: &[Camera], cfg: &AggregateConfig) -> Result<VoxelGrid> {
    cfg.validate()?;
    if maps.is_empty() {
        return Err(Error::Usage("no views to aggregate".into()));
    }
    if maps.len() != cams.len() {
        return Err(Error::Usage(format!("{} maps for {} cameras", maps.len(), cams.len())));
    }
    for (i, (m, c)) in maps.iter().zip(cams).enumerate() {
        if m.width != c.width as usize || m.height != c.height as usize {
            return Err(Error::Usage(format!(
                "view {i}: map is {}x{} but camera is {}x{}",
                m.width, m.height, c.width, c.height
            )));
        }
    }
    let mut order: Vec<usize> = (0..maps.len()).collect();
    order.sort_by(|&a, &b| compare_views((&maps[a], &cams[a]), (&maps[b], &cams[b])));
    let views: Vec<(&ProbMap2D, &Camera)> = order.iter().map(|&i| (&maps[i], &cams[i])).collect();

    let mut grid = VoxelGrid::filled(&cfg.grid, cfg.eps_floor, maps.len(), 0.0);
    grid.out_of_frame = cfg.out_of_frame;
    let log_eps = cfg.eps_floor.ln();
    let eps = cfg.eps_floor;
    let [nx, ny, _] = grid.dims;
    let (origin, spacing, log_floor) = (grid.origin, grid.spacing, grid.log_floor);
    let policy = cfg.out_of_frame;

    // Views are the outer loop so each map stays in cache while a slice is
    // swept; every voxel still accumulates its terms in canonical view order.
    grid.log_values
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(k, slice)| {
            for (map, cam) in &views {
                for j in 0..ny {
                    for i in 0..nx {
                        let x = origin + Vector3::new(i as f64, j as f64, k as f64) * spacing;
                        slice[i + nx * j] += match cam.project(&x) {
                            None => log_eps,
                            Some(p) => match sample_bilinear(map, p.pixel) {
                                Some(v) if v <= eps => log_eps,
                                Some(v) if v == 1.0 => 0.0,
                                Some(v) => v.ln(),
                                None => match policy {
                                    OutOfFramePolicy::Floor => log_eps,
                                    OutOfFramePolicy::Skip => 0.0,
                                },
                            },
                        };
                    }
                }
            }
            for v in slice.iter_mut() {
                *v = v.clamp(log_floor, 0.0);
            }
        });
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn map_2x1(a: f64, b: f64) -> ProbMap2D {
        ProbMap2D::new(2, 1, vec![a, b]).unwrap()
    }

    #[test]
    fn bilinear_examples() {
        let m = ProbMap2D::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(sample_bilinear(&m, Vector2::new(1.0, 1.0)), Some(0.5));
        assert_eq!(sample_bilinear(&m, Vector2::new(2.0, 1.0)), Some(0.6));
        assert_eq!(sample_bilinear(&map_2x1(0.0, 1.0), Vector2::new(0.5, 0.0)), Some(0.5));
        assert_eq!(sample_bilinear(&m, Vector2::new(-0.5, 3.0)), None);
        assert_eq!(sample_bilinear(&m, Vector2::new(2.0001, 0.0)), None);
        assert_eq!(sample_bilinear(&m, Vector2::new(f64::NAN, 0.0)), None);
        let single = ProbMap2D::new(1, 1, vec![0.7]).unwrap();
        assert_eq!(sample_bilinear(&single, Vector2::new(0.0, 0.0)), Some(0.7));
    }

    #[test]
    fn normalized_weight_examples() {
        let spec = GridSpec {
            dims: [3, 1, 1],
            origin: [0.0; 3],
            spacing: 1.0,
        };
        let mut g = VoxelGrid::filled(&spec, 1e-4, 2, 0.0);
        let lmin = g.log_floor;
        g.log_values = vec![0.0, lmin, lmin / 2.0];
        assert_eq!(g.normalized_weight(0), 1.0);
        assert_eq!(g.normalized_weight(1), 0.0);
        assert_eq!(g.normalized_weight(2), 0.5);
    }

    fn camera_facing_grid() -> Camera {
        // Looks down +z from z = -3 at a grid around the origin.
        Camera {
            fx: 40.0,
            fy: 40.0,
            cx: 15.5,
            cy: 15.5,
            rotation: Matrix3::identity(),
            translation: Vector3::new(0.0, 0.0, 3.0),
            width: 32,
            height: 32,
        }
    }

    #[test]
    fn ones_give_zero_log() {
        let cam = camera_facing_grid();
        let spec = GridSpec {
            dims: [4, 4, 4],
            origin: [-0.3, -0.3, -0.3],
            spacing: 0.2,
        };
        let maps = vec![ProbMap2D::uniform(32, 32, 1.0); 2];
        let g = aggregate(&maps, &[cam.clone(), cam], &AggregateConfig::new(spec)).unwrap();
        assert!(g.log_values.iter().all(|&v| v == 0.0));
        assert_eq!(g.log_floor, 2.0 * 1e-4f64.ln());
    }

    #[test]
    fn count_and_size_mismatches() {
        let cam = camera_facing_grid();
        let cfg = AggregateConfig::new(GridSpec {
            dims: [2, 2, 2],
            origin: [0.0; 3],
            spacing: 0.1,
        });
        assert!(matches!(aggregate(&[], &[], &cfg), Err(Error::Usage(_))));
        let map = ProbMap2D::uniform(32, 32, 0.5);
        assert!(matches!(aggregate(&[map.clone()], &[], &cfg), Err(Error::Usage(_))));
        let small = ProbMap2D::uniform(8, 8, 0.5);
        assert!(matches!(aggregate(&[small], &[cam], &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn behind_and_outside_views() {
        let cam = camera_facing_grid();
        let spec = GridSpec {
            dims: [1, 1, 2],
            origin: [5.0, 0.0, 0.0],
            spacing: 1.0,
        };
        let map = ProbMap2D::uniform(32, 32, 0.5);
        let mut cfg = AggregateConfig::new(spec);
        let g = aggregate(&[map.clone()], &[cam.clone()], &cfg).unwrap();
        // Both voxels project far outside the 32 px image.
        assert!(g.log_values.iter().all(|&v| v == g.log_floor));
        cfg.out_of_frame = OutOfFramePolicy::Skip;
        let g = aggregate(&[map.clone()], &[cam.clone()], &cfg).unwrap();
        assert!(g.log_values.iter().all(|&v| v == 0.0));
        // Behind the camera is always the floor.
        cfg.grid.origin = [0.0, 0.0, -10.0];
        let g = aggregate(&[map], &[cam], &cfg).unwrap();
        assert!(g.log_values.iter().all(|&v| v == g.log_floor));
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec {
            dims: [3, 2, 2],
            origin: [0.5, -1.0, 2.0],
            spacing: 0.25,
        };
        let mut g = VoxelGrid::filled(&spec, 1e-4, 3, 0.0);
        for (i, v) in g.log_values.iter_mut().enumerate() {
            *v = -(i as f64) * 0.37;
        }
        g.save(dir.path().join("grid")).unwrap();
        let raw = std::fs::read(dir.path().join("grid.f32")).unwrap();
        assert_eq!(raw.len(), 12 * 4);
        assert_eq!(&raw[4..8], &(-0.37f32).to_le_bytes());
        let meta = std::fs::read_to_string(dir.path().join("grid.json")).unwrap();
        for key in ["dims", "origin", "spacing", "eps_floor"] {
            assert!(meta.contains(key));
        }
        let back = VoxelGrid::load(dir.path().join("grid.json")).unwrap();
        assert_eq!(back, g.quantized());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("skip".parse::<OutOfFramePolicy>().unwrap(), OutOfFramePolicy::Skip);
        assert_eq!("floor".parse::<OutOfFramePolicy>().unwrap(), OutOfFramePolicy::Floor);
        assert!("maybe".parse::<OutOfFramePolicy>().is_err());
    }

    #[test]
    fn around_box_is_cubic_and_padded() {
        let g = GridSpec::around_box(Vector3::new(-0.5, 0.0, -0.2), Vector3::new(0.5, 1.2, 0.2), 128, 0.1);
        assert_eq!(g.dims, [128; 3]);
        assert!((g.spacing * 128.0 - 1.2 * 1.2).abs() < 1e-12);
        let center = Vector3::from(g.origin) + Vector3::repeat(g.spacing * 127.0 / 2.0);
        assert!((center - Vector3::new(0.0, 0.6, 0.0)).norm() < 1e-12);
    }
}
