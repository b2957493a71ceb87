//! Synthetic plants with known ground truth.
//!
//! Growth is a recursive segment-splitting process: every axis extends one
//! segment per remaining depth level and, after each segment, spawns a
//! lateral axis with probability `branch_probability`. Leaves are flat discs
//! scattered along the branches. Coordinates are `+y` up with the root at the
//! origin, so the root is always the bottommost node.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, SkeletonGraph};

/// Smallest allowed vertical component of a growth direction.
const MIN_UP: f64 = 0.2;
/// Directions tried before an axis gives up on a crowded segment.
const PLACEMENT_ATTEMPTS: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct PlantNode {
    pub position: Vector3<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafDisc {
    pub center: Vector3<f64>,
    /// Unit normal.
    pub normal: Vector3<f64>,
    pub radius: f64,
}

/// Ground-truth plant: branch skeleton with radii plus leaf occluders.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantModel {
    pub nodes: Vec<PlantNode>,
    /// `(parent, child)` pairs.
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
    pub leaves: Vec<LeafDisc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantGenConfig {
    pub max_depth: u32,
    pub branch_probability: f64,
    /// Angle between a lateral axis and its parent axis, radians `[lo, hi]`.
    pub branch_angle_range: [f64; 2],
    pub segment_length_range: [f64; 2],
    /// Expected leaves per unit of branch length.
    pub leaf_density: f64,
    pub leaf_radius_range: [f64; 2],
    pub trunk_radius: f64,
    /// Radius multiplier applied per segment, in `(0, 1]`.
    pub radius_decay: f64,
    /// Lower bound on the distance between non-adjacent branch segments.
    pub min_branch_separation: f64,
    /// Maximum random bend of a continuing axis per segment, radians.
    pub bend_angle: f64,
}

impl Default for PlantGenConfig {
    fn default() -> Self {
        PlantGenConfig {
            max_depth: 5,
            branch_probability: 0.45,
            branch_angle_range: [0.55, 0.95],
            segment_length_range: [0.18, 0.28],
            leaf_density: 14.0,
            leaf_radius_range: [0.045, 0.075],
            trunk_radius: 0.022,
            radius_decay: 0.82,
            min_branch_separation: 0.09,
            bend_angle: 0.25,
        }
    }
}

impl PlantGenConfig {
    pub fn validate(&self) -> Result<()> {
        fn range(field: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
            if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] || r[0] < lo || r[1] > hi {
                return Err(Error::config(
                    field,
                    format!("range [{}, {}] must be ordered and within [{lo}, {hi}]", r[0], r[1]),
                ));
            }
            Ok(())
        }
        if self.max_depth == 0 {
            return Err(Error::config("max_depth", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.branch_probability) {
            return Err(Error::config("branch_probability", "must lie in [0, 1]"));
        }
        range("branch_angle_range", self.branch_angle_range, 0.0, std::f64::consts::FRAC_PI_2)?;
        range("segment_length_range", self.segment_length_range, f64::MIN_POSITIVE, f64::MAX)?;
        range("leaf_radius_range", self.leaf_radius_range, f64::MIN_POSITIVE, f64::MAX)?;
        if !(self.leaf_density >= 0.0 && self.leaf_density.is_finite()) {
            return Err(Error::config("leaf_density", "must be finite and non-negative"));
        }
        if !(self.trunk_radius > 0.0 && self.trunk_radius.is_finite()) {
            return Err(Error::config("trunk_radius", "must be positive"));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay <= 1.0) {
            return Err(Error::config("radius_decay", "must lie in (0, 1]"));
        }
        if !(self.min_branch_separation >= 0.0) {
            return Err(Error::config("min_branch_separation", "must be non-negative"));
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.bend_angle) {
            return Err(Error::config("bend_angle", "must lie in [0, pi/2]"));
        }
        Ok(())
    }
}

/// Generates a random plant; identical `(config, seed)` pairs give identical plants.
pub fn generate_plant(config: &PlantGenConfig, seed: u64) -> Result<PlantModel> {
    config.validate()?;
    let mut grower = Grower {
        cfg: config,
        rng: ChaCha8Rng::seed_from_u64(seed),
        nodes: vec![PlantNode {
            position: Vector3::zeros(),
            radius: config.trunk_radius,
        }],
        edges: Vec::new(),
    };
    grower.grow_axis(0, Vector3::y(), config.max_depth);
    let leaves = grower.scatter_leaves();
    let plant = PlantModel {
        nodes: grower.nodes,
        edges: grower.edges,
        root: 0,
        leaves,
    };
    debug_assert!(plant.validate().is_ok());
    Ok(plant)
}

struct Grower<'a> {
    cfg: &'a PlantGenConfig,
    rng: ChaCha8Rng,
    nodes: Vec<PlantNode>,
    edges: Vec<(usize, usize)>,
}

impl Grower<'_> {
    fn grow_axis(&mut self, start: usize, direction: Vector3<f64>, levels: u32) {
        let mut node = start;
        let mut dir = direction;
        for level in (1..=levels).rev() {
            let Some((child, child_dir)) = self.place_segment(node, dir, self.cfg.bend_angle) else {
                return;
            };
            // Always draw, so the stream layout does not depend on the depth.
            let branch = self.rng.random::<f64>() < self.cfg.branch_probability;
            let [lo, hi] = self.cfg.branch_angle_range;
            let angle = lo + (hi - lo) * self.rng.random::<f64>();
            if branch && level > 1 {
                let lateral = rotate_away(child_dir, angle, self.rng.random::<f64>());
                self.grow_axis(child, lateral, level - 1);
            }
            node = child;
            dir = child_dir;
        }
    }

    /// Adds one segment from `from`, retrying random bends until it keeps its
    /// distance from existing segments. Returns the new node and its direction.
    fn place_segment(
        &mut self,
        from: usize,
        dir: Vector3<f64>,
        bend: f64,
    ) -> Option<(usize, Vector3<f64>)> {
        let [lo, hi] = self.cfg.segment_length_range;
        let start = self.nodes[from].position;
        for attempt in 0..PLACEMENT_ATTEMPTS {
            let length = lo + (hi - lo) * self.rng.random::<f64>();
            let amount = if attempt == 0 { bend } else { bend + 0.1 * attempt as f64 };
            let d = lift(rotate_away(dir, amount * self.rng.random::<f64>(), self.rng.random()));
            let end = start + d * length;
            if self.clear_of_others(from, start, end) {
                let radius = (self.nodes[from].radius * self.cfg.radius_decay).max(1e-4);
                self.nodes.push(PlantNode {
                    position: end,
                    radius: radius.min(self.nodes[from].radius),
                });
                let child = self.nodes.len() - 1;
                self.edges.push((from, child));
                return Some((child, d));
            }
        }
        None
    }

    fn clear_of_others(&self, from: usize, a: Vector3<f64>, b: Vector3<f64>) -> bool {
        let min = self.cfg.min_branch_separation;
        self.edges.iter().all(|&(p, c)| {
            if p == from || c == from {
                return true;
            }
            segment_distance(a, b, self.nodes[p].position, self.nodes[c].position) >= min
        })
    }

    fn scatter_leaves(&mut self) -> Vec<LeafDisc> {
        // The first trunk segment stays bare so the base is observable.
        let carriers: Vec<(usize, usize)> = self
            .edges
            .iter()
            .copied()
            .filter(|&(p, _)| p != 0)
            .collect();
        let lengths: Vec<f64> = carriers
            .iter()
            .map(|&(p, c)| (self.nodes[c].position - self.nodes[p].position).norm())
            .collect();
        let total: f64 = lengths.iter().sum();
        let expected = self.cfg.leaf_density * total;
        let mut count = expected.floor() as usize;
        if self.rng.random::<f64>() < expected.fract() {
            count += 1;
        }
        let mut leaves = Vec::with_capacity(count);
        for _ in 0..count {
            let mut pick = self.rng.random::<f64>() * total;
            let mut edge = carriers.len() - 1;
            for (i, &len) in lengths.iter().enumerate() {
                if pick < len {
                    edge = i;
                    break;
                }
                pick -= len;
            }
            let (p, c) = carriers[edge];
            let (a, b) = (&self.nodes[p], &self.nodes[c]);
            let t = self.rng.random::<f64>();
            let along = a.position + (b.position - a.position) * t;
            let axis = (b.position - a.position).normalize();
            let outward = rotate_away(axis, std::f64::consts::FRAC_PI_2, self.rng.random());
            let [rlo, rhi] = self.cfg.leaf_radius_range;
            let radius = rlo + (rhi - rlo) * self.rng.random::<f64>();
            let branch_radius = a.radius + (b.radius - a.radius) * t;
            let center = along + outward * (0.8 * radius + branch_radius);
            let jitter = random_unit(&mut self.rng) * 0.35;
            let normal = (outward + Vector3::y() * 0.6 + jitter).normalize();
            leaves.push(LeafDisc {
                center,
                normal,
                radius,
            });
        }
        leaves
    }
}

/// Rotates `dir` by `angle` towards a perpendicular direction picked by `spin` in `[0, 1)`.
fn rotate_away(dir: Vector3<f64>, angle: f64, spin: f64) -> Vector3<f64> {
    let (u, w) = perpendicular_basis(&dir);
    let phi = spin * std::f64::consts::TAU;
    let side = u * phi.cos() + w * phi.sin();
    (dir * angle.cos() + side * angle.sin()).normalize()
}

/// Keeps growth pointing upwards by at least `MIN_UP`.
fn lift(dir: Vector3<f64>) -> Vector3<f64> {
    if dir.y >= MIN_UP {
        return dir;
    }
    let horizontal = Vector3::new(dir.x, 0.0, dir.z);
    let h = if horizontal.norm() < 1e-12 {
        Vector3::x()
    } else {
        horizontal.normalize()
    };
    (h * (1.0 - MIN_UP * MIN_UP).sqrt() + Vector3::y() * MIN_UP).normalize()
}

pub(crate) fn perpendicular_basis(dir: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let d = dir.normalize();
    let helper = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
    let u = d.cross(&helper).normalize();
    let w = d.cross(&u);
    (u, w)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        let n = v.norm();
        if n > 1e-6 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Minimum distance between segments `[p1, q1]` and `[p2, q2]`.
pub(crate) fn segment_distance(
    p1: Vector3<f64>,
    q1: Vector3<f64>,
    p2: Vector3<f64>,
    q2: Vector3<f64>,
) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let eps = 1e-15;
    let (s, t) = if a <= eps && e <= eps {
        (0.0, 0.0)
    } else if a <= eps {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > eps {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

impl PlantModel {
    pub fn skeleton(&self) -> SkeletonGraph {
        SkeletonGraph {
            vertices: self.nodes.iter().map(|n| n.position).collect(),
            edges: self.edges.clone(),
            root: self.root,
        }
    }

    pub fn joint_count(&self) -> Result<usize> {
        graph::joint_count_of(self.nodes.len(), &self.edges, self.root)
    }

    /// Bounding box of branch nodes and leaf discs.
    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let (mut lo, mut hi) = self.skeleton().bounding_box();
        for n in &self.nodes {
            lo = lo.inf(&(n.position - Vector3::repeat(n.radius)));
            hi = hi.sup(&(n.position + Vector3::repeat(n.radius)));
        }
        for leaf in &self.leaves {
            lo = lo.inf(&(leaf.center - Vector3::repeat(leaf.radius)));
            hi = hi.sup(&(leaf.center + Vector3::repeat(leaf.radius)));
        }
        (lo, hi)
    }

    /// Checks every structural invariant of a plant.
    pub fn validate(&self) -> Result<()> {
        let skeleton = self.skeleton();
        skeleton.validate()?;
        if let Some(n) = self.nodes.iter().position(|n| !(n.radius > 0.0)) {
            return Err(Error::Structure(format!("node {n} has non-positive radius")));
        }
        let (parents, _) = skeleton.parents()?;
        for (child, parent) in parents.iter().enumerate() {
            if let Some(p) = *parent {
                if self.nodes[child].radius > self.nodes[p].radius {
                    return Err(Error::Structure(format!(
                        "node {child} is thicker than its parent {p}"
                    )));
                }
            }
        }
        let root_y = self.nodes[self.root].position.y;
        if self.nodes.iter().any(|n| n.position.y < root_y) {
            return Err(Error::Structure("root is not the bottommost node".into()));
        }
        for (i, leaf) in self.leaves.iter().enumerate() {
            if !(leaf.radius > 0.0) || (leaf.normal.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Structure(format!("leaf {i} has bad radius or normal")));
            }
        }
        Ok(())
    }

    pub fn to_doc(&self) -> PlantDoc {
        PlantDoc {
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(id, n)| PlantNodeDoc {
                    id,
                    x: n.position.x,
                    y: n.position.y,
                    z: n.position.z,
                    r: n.radius,
                })
                .collect(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            root: self.root,
            leaves: self
                .leaves
                .iter()
                .map(|l| LeafDoc {
                    cx: l.center.x,
                    cy: l.center.y,
                    cz: l.center.z,
                    nx: l.normal.x,
                    ny: l.normal.y,
                    nz: l.normal.z,
                    r: l.radius,
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &PlantDoc) -> Result<Self> {
        let index: std::collections::HashMap<usize, usize> =
            doc.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let lookup = |id: usize| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Structure(format!("unknown node id {id}")))
        };
        let plant = PlantModel {
            nodes: doc
                .nodes
                .iter()
                .map(|n| PlantNode {
                    position: Vector3::new(n.x, n.y, n.z),
                    radius: n.r,
                })
                .collect(),
            edges: doc
                .edges
                .iter()
                .map(|[a, b]| Ok((lookup(*a)?, lookup(*b)?)))
                .collect::<Result<_>>()?,
            root: lookup(doc.root)?,
            leaves: doc
                .leaves
                .iter()
                .map(|l| LeafDisc {
                    center: Vector3::new(l.cx, l.cy, l.cz),
                    normal: Vector3::new(l.nx, l.ny, l.nz),
                    radius: l.r,
                })
                .collect(),
        };
        plant.validate()?;
        Ok(plant)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.to_doc())?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_doc(&serde_json::from_str(&text)?)
    }

    /// Same plant with all leaves removed.
    pub fn leafless(&self) -> Self {
        PlantModel {
            leaves: Vec::new(),
            ..self.clone()
        }
    }
}

/// Plant document: `{nodes:[{id,x,y,z,r}], edges:[[a,b]], root, leaves:[{cx,cy,cz,nx,ny,nz,r}]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlantDoc {
    pub nodes: Vec<PlantNodeDoc>,
    pub edges: Vec<[usize; 2]>,
    pub root: usize,
    pub leaves: Vec<LeafDoc>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlantNodeDoc {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LeafDoc {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub nx: f64,
    pub ny: f64,
    pub nz: f64,
    pub r: f64,
}
