//! Branch path candidates from particles flowing through the probability volume.
//!
//! Particles are seeded in proportion to the normalised log-probability and
//! advance in lockstep rounds. Each step blends three unit directions: towards
//! the local weighted mass centre (`F_c`), along the local principal axis
//! (`F_d`) and towards the root (`F_r`). Trails that come close to an existing
//! trail are cut and attached there, which is where joints appear.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::VoxelGrid;
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::rng;

const SEED_STREAM: u64 = 0x5EED;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub particle_count: usize,
    /// Radius `r` of the neighbourhood used for the local forces.
    pub neighborhood_radius: f64,
    /// Constant weight of the root-ward force.
    pub lambda_r: f64,
    pub step_length: f64,
    pub max_steps: usize,
    pub root_capture_radius: f64,
    pub merge_radius: f64,
    pub min_weight_to_live: f64,
    /// Minimum normalised weight for a voxel to be considered as the root.
    pub root_threshold: f64,
}

impl FlowConfig {
    /// Defaults expressed in voxels of `grid`.
    pub fn for_grid(grid: &VoxelGrid) -> Self {
        let s = grid.spacing;
        FlowConfig {
            particle_count: 10_000,
            neighborhood_radius: 2.5 * s,
            lambda_r: 0.1,
            step_length: s,
            max_steps: 4 * grid.dims.iter().copied().max().unwrap_or(1),
            root_capture_radius: 2.0 * s,
            merge_radius: 1.5 * s,
            min_weight_to_live: 0.05,
            root_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("neighborhood_radius", self.neighborhood_radius),
            ("step_length", self.step_length),
            ("root_capture_radius", self.root_capture_radius),
            ("merge_radius", self.merge_radius),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.lambda_r) {
            return Err(Error::config("lambda_r", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.min_weight_to_live) {
            return Err(Error::config("min_weight_to_live", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.root_threshold) {
            return Err(Error::config("root_threshold", "must lie in [0, 1]"));
        }
        if self.particle_count == 0 {
            return Err(Error::config("particle_count", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParticleState {
    Moving,
    /// Reached the root.
    Captured,
    /// Attached to another trail at the given vertex.
    Merged { vertex: usize },
    Dead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Particle {
    pub id: usize,
    pub position: Vector3<f64>,
    /// Visited positions, oldest first; the last entry is `position`.
    pub trail: Vec<Vector3<f64>>,
    pub state: ParticleState,
}

impl Particle {
    pub fn new(id: usize, position: Vector3<f64>) -> Self {
        Particle {
            id,
            position,
            trail: vec![position],
            state: ParticleState::Moving,
        }
    }

    pub fn alive(&self) -> bool {
        self.state == ParticleState::Moving
    }
}

/// Traces recorded as a tree hanging from the root vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTraceGraph {
    pub vertices: Vec<Vector3<f64>>,
    /// Parent of each vertex towards the root; `None` only for the root.
    pub parent: Vec<Option<usize>>,
    /// Particle that recorded each vertex; `None` for the root.
    pub provenance: Vec<Option<usize>>,
    pub root: usize,
}

impl RawTraceGraph {
    pub fn to_skeleton(&self) -> Result<SkeletonGraph> {
        SkeletonGraph::from_parents(self.vertices.clone(), &self.parent, self.root)
    }
}

/// Bottommost voxel whose normalised weight reaches `threshold`.
///
/// Ties in height go to the voxel horizontally closest to the weighted
/// centroid of all qualifying voxels, then to the smallest `(i, j, k)`.
pub fn find_root(grid: &VoxelGrid, threshold: f64) -> Result<Vector3<f64>> {
    let candidates: Vec<(usize, f64)> = (0..grid.len())
        .map(|i| (i, grid.normalized_weight(i)))
        .filter(|&(_, w)| w >= threshold && w > 0.0)
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyVolume(format!("no voxel reaches weight {threshold}")));
    }
    let total: f64 = candidates.iter().map(|&(_, w)| w).sum();
    let centroid = candidates
        .iter()
        .fold(Vector3::zeros(), |acc, &(i, w)| acc + grid.center_of(i) * w)
        / total;
    let lowest = candidates.iter().map(|&(i, _)| grid.coords(i)[1]).min().unwrap();
    let horizontal = |i: usize| {
        let c = grid.center_of(i);
        (c.x - centroid.x).powi(2) + (c.z - centroid.z).powi(2)
    };
    let best = candidates
        .iter()
        .map(|&(i, _)| i)
        .filter(|&i| grid.coords(i)[1] == lowest)
        .min_by(|&a, &b| {
            horizontal(a)
                .total_cmp(&horizontal(b))
                .then_with(|| grid.coords(a).cmp(&grid.coords(b)))
        })
        .unwrap();
    Ok(grid.center_of(best))
}

/// Draws particles with probability proportional to the normalised weight,
/// jittered uniformly inside the chosen voxel.
pub fn seed_particles(grid: &VoxelGrid, count: usize, seed: u64) -> Result<Vec<Particle>> {
    let mut cumulative = Vec::with_capacity(grid.len());
    let mut total = 0.0;
    for i in 0..grid.len() {
        total += grid.normalized_weight(i);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::EmptyVolume("every voxel sits at the probability floor".into()));
    }
    let mut rng = rng::stream(seed, &[SEED_STREAM]);
    let particles = (0..count)
        .map(|id| {
            let u = rng.random::<f64>() * total;
            let voxel = cumulative.partition_point(|&c| c <= u).min(grid.len() - 1);
            let jitter = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            Particle::new(id, grid.center_of(voxel) + jitter * grid.spacing)
        })
        .collect();
    Ok(particles)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalForces {
    /// Unit vector towards the mass centre, or zero when the particle sits on it.
    pub f_c: Vector3<f64>,
    /// Unit principal axis, oriented towards the root.
    pub f_d: Vector3<f64>,
    /// Distance to the mass centre.
    pub d_c: f64,
}

/// Neighbourhood carries no weight at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DegenerateNeighborhood;

/// Weighted mass centre and principal axis of the voxels within `r` of `p`.
pub fn local_forces(
    grid: &VoxelGrid,
    p: &Vector3<f64>,
    r: f64,
    root: &Vector3<f64>,
) -> std::result::Result<LocalForces, DegenerateNeighborhood> {
    let [nx, ny, nz] = grid.dims;
    let c = grid.to_voxel(p);
    let reach = r / grid.spacing;
    let range = |center: f64, n: usize| {
        let lo = (center - reach).ceil().max(0.0);
        let hi = (center + reach).floor().min(n as f64 - 1.0);
        (lo as i64, hi as i64)
    };
    let ((i0, i1), (j0, j1), (k0, k1)) = (range(c.x, nx), range(c.y, ny), range(c.z, nz));
    let r2 = r * r;

    let mut total = 0.0;
    let mut first = Vector3::zeros();
    let mut second = Matrix3::zeros();
    for k in k0..=k1 {
        for j in j0..=j1 {
            for i in i0..=i1 {
                let (i, j, k) = (i as usize, j as usize, k as usize);
                let x = grid.center(i, j, k);
                let d = x - p;
                if d.norm_squared() > r2 {
                    continue;
                }
                let w = grid.normalized_weight(grid.index(i, j, k));
                if w <= 0.0 {
                    continue;
                }
                total += w;
                first += d * w;
                second += d * d.transpose() * w;
            }
        }
    }
    if !(total > 0.0) {
        return Err(DegenerateNeighborhood);
    }
    // Moments are taken relative to p to keep the sums well conditioned.
    let offset = first / total;
    let covariance = second / total - offset * offset.transpose();
    let eigen = SymmetricEigen::new(covariance);
    let major = eigen.eigenvalues.imax();
    let mut f_d: Vector3<f64> = eigen.eigenvectors.column(major).into_owned();
    f_d = if f_d.norm() > 0.0 { f_d.normalize() } else { Vector3::y() };
    if f_d.dot(&(root - p)) < 0.0 {
        f_d = -f_d;
    }
    let d_c = offset.norm();
    let f_c = if d_c < 1e-12 { Vector3::zeros() } else { offset / d_c };
    Ok(LocalForces { f_c, f_d, d_c })
}

/// `(λ_c, λ_d)` for a mass-centre distance `d_c`, clamped to `[0, r]`.
///
/// λ_d is formed as `1 − (λ_r + λ_c)`, so `(λ_r + λ_c) + λ_d` is exactly one in floating point.
pub fn blend_weights(d_c: f64, r: f64, lambda_r: f64) -> (f64, f64) {
    let ratio = (d_c / r).clamp(0.0, 1.0);
    let lambda_c = ratio * (1.0 - lambda_r);
    let lambda_d = 1.0 - (lambda_r + lambda_c);
    (lambda_c, lambda_d)
}

/// Unit movement direction from the blended forces, or `None` when they cancel.
pub fn flow_direction(
    forces: &LocalForces,
    p: &Vector3<f64>,
    root: &Vector3<f64>,
    r: f64,
    lambda_r: f64,
) -> Option<Vector3<f64>> {
    let to_root = root - p;
    let f_r = if to_root.norm() > 0.0 {
        to_root.normalize()
    } else {
        Vector3::zeros()
    };
    let (lambda_c, lambda_d) = blend_weights(forces.d_c, r, lambda_r);
    let f = forces.f_c * lambda_c + forces.f_d * lambda_d + f_r * lambda_r;
    let n = f.norm();
    (n >= 1e-9).then(|| f / n)
}

/// Normalised weight of the voxel containing `p`; zero outside the grid.
pub fn weight_at(grid: &VoxelGrid, p: &Vector3<f64>) -> f64 {
    let v = grid.to_voxel(p);
    let idx = [v.x.round(), v.y.round(), v.z.round()];
    if idx.iter().zip(grid.dims).any(|(&c, n)| !(c >= 0.0 && c < n as f64)) {
        return 0.0;
    }
    grid.normalized_weight(grid.index(idx[0] as usize, idx[1] as usize, idx[2] as usize))
}

/// Outcome of one step, before merge resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Proposal {
    Stay(ParticleState),
    Move {
        to: Vector3<f64>,
        then: ParticleState,
    },
}

fn propose(grid: &VoxelGrid, p: &Vector3<f64>, root: &Vector3<f64>, cfg: &FlowConfig) -> Proposal {
    if (p - root).norm() <= cfg.root_capture_radius {
        return Proposal::Stay(ParticleState::Captured);
    }
    let Ok(forces) = local_forces(grid, p, cfg.neighborhood_radius, root) else {
        return Proposal::Stay(ParticleState::Dead);
    };
    let Some(dir) = flow_direction(&forces, p, root, cfg.neighborhood_radius, cfg.lambda_r) else {
        return Proposal::Stay(ParticleState::Dead);
    };
    let to = p + dir * cfg.step_length;
    let then = if (to - root).norm() <= cfg.root_capture_radius {
        ParticleState::Captured
    } else if weight_at(grid, &to) < cfg.min_weight_to_live {
        ParticleState::Dead
    } else {
        ParticleState::Moving
    };
    Proposal::Move { to, then }
}

/// Advances one particle by one step, ignoring other particles.
pub fn step_particle(particle: &Particle, grid: &VoxelGrid, root: &Vector3<f64>, cfg: &FlowConfig) -> Particle {
    let mut next = particle.clone();
    if !particle.alive() {
        return next;
    }
    match propose(grid, &particle.position, root, cfg) {
        Proposal::Stay(state) => next.state = state,
        Proposal::Move { to, then } => {
            next.position = to;
            next.trail.push(to);
            next.state = then;
        }
    }
    next
}

/// Recorded trail vertices with a uniform hash grid for merge queries.
struct TraceStore {
    positions: Vec<Vector3<f64>>,
    owner: Vec<usize>,
    active: Vec<bool>,
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl TraceStore {
    fn key(&self, p: &Vector3<f64>) -> [i64; 3] {
        [
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        ]
    }

    /// Stores a vertex; only indexed vertices can be merge targets.
    fn push(&mut self, p: Vector3<f64>, owner: usize, indexed: bool) -> usize {
        let id = self.positions.len();
        self.positions.push(p);
        self.owner.push(owner);
        self.active.push(indexed);
        if indexed {
            let key = self.key(&p);
            self.buckets.entry(key).or_default().push(id);
        }
        id
    }

    /// Closest active vertex within `radius` accepted by `allow`; ties go to the lower id.
    fn nearest(&self, p: &Vector3<f64>, radius: f64, mut allow: impl FnMut(usize) -> bool) -> Option<usize> {
        let [x, y, z] = self.key(p);
        let r2 = radius * radius;
        let mut best: Option<(f64, usize)> = None;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let Some(bucket) = self.buckets.get(&[x + dx, y + dy, z + dz]) else {
                        continue;
                    };
                    for &v in bucket {
                        if !self.active[v] {
                            continue;
                        }
                        let d2 = (self.positions[v] - p).norm_squared();
                        if d2 > r2 {
                            continue;
                        }
                        let better = match best {
                            None => true,
                            Some((bd, bv)) => d2 < bd || (d2 == bd && v < bv),
                        };
                        if better && allow(v) {
                            best = Some((d2, v));
                        }
                    }
                }
            }
        }
        best.map(|(_, v)| v)
    }
}

/// Runs the particle flow to completion and records the surviving traces.
pub fn simulate(grid: &VoxelGrid, cfg: &FlowConfig, seed: u64) -> Result<RawTraceGraph> {
    cfg.validate()?;
    let particles = seed_particles(grid, cfg.particle_count, seed)?;
    simulate_particles(grid, cfg, particles)
}

/// [`simulate`] from explicitly placed particles; ids must be `0..n` in order.
pub fn simulate_particles(grid: &VoxelGrid, cfg: &FlowConfig, mut particles: Vec<Particle>) -> Result<RawTraceGraph> {
    cfg.validate()?;
    let root = find_root(grid, cfg.root_threshold)?;
    if particles.iter().enumerate().any(|(i, p)| p.id != i) {
        return Err(Error::Usage("particle ids must be 0..n in order".into()));
    }
    let n = particles.len();

    let mut store = TraceStore {
        positions: Vec::new(),
        owner: Vec::new(),
        active: Vec::new(),
        cell: cfg.merge_radius,
        buckets: HashMap::new(),
    };
    let root_vertex = store.push(root, usize::MAX, false);
    // Trails as vertex ids; seeds are stored but are not merge targets.
    let mut trails: Vec<Vec<usize>> = particles
        .iter()
        .map(|p| vec![store.push(p.position, p.id, false)])
        .collect();
    let mut merged_into: Vec<Option<usize>> = vec![None; n];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];

    for _ in 0..cfg.max_steps {
        let moving: Vec<usize> = (0..n).filter(|&i| particles[i].alive()).collect();
        if moving.is_empty() {
            break;
        }
        let proposals: Vec<Proposal> = moving
            .par_iter()
            .map(|&i| propose(grid, &particles[i].position, &root, cfg))
            .collect();

        for (&i, proposal) in moving.iter().zip(proposals) {
            match proposal {
                Proposal::Stay(state) => particles[i].state = state,
                Proposal::Move { to, then } => {
                    let owner = &store.owner;
                    let target = store.nearest(&to, cfg.merge_radius, |v| {
                        let mut o = owner[v];
                        // Reject targets whose trail already drains into particle i.
                        loop {
                            if o == i {
                                return false;
                            }
                            match merged_into[o] {
                                Some(next) => o = next,
                                None => return true,
                            }
                        }
                    });
                    if let Some(v) = target {
                        let o = store.owner[v];
                        merged_into[i] = Some(o);
                        dependents[o].push(i);
                        particles[i].state = ParticleState::Merged { vertex: v };
                        continue;
                    }
                    particles[i].position = to;
                    particles[i].trail.push(to);
                    particles[i].state = then;
                    trails[i].push(store.push(to, i, then != ParticleState::Dead));
                }
            }
            if particles[i].state == ParticleState::Dead {
                retire(i, &trails, &dependents, &mut store);
            }
        }
    }

    // Anything still moving never connected; drop it with whatever hangs from it.
    for i in 0..n {
        if particles[i].alive() {
            particles[i].state = ParticleState::Dead;
        }
    }

    // A particle is kept when its chain of attachments ends at the root.
    let mut reachable: Vec<Option<bool>> = vec![None; n];
    for start in 0..n {
        let mut chain = Vec::new();
        let mut i = start;
        let verdict = loop {
            if let Some(r) = reachable[i] {
                break r;
            }
            chain.push(i);
            match particles[i].state {
                ParticleState::Captured => break true,
                ParticleState::Merged { vertex } => i = store.owner[vertex],
                _ => break false,
            }
        };
        for c in chain {
            reachable[c] = Some(verdict);
        }
    }

    let mut parent_of: Vec<Option<usize>> = vec![None; store.positions.len()];
    let mut keep = vec![false; store.positions.len()];
    keep[root_vertex] = true;
    for i in (0..n).filter(|&i| reachable[i] == Some(true)) {
        let trail = &trails[i];
        for w in trail.windows(2) {
            parent_of[w[0]] = Some(w[1]);
        }
        let last = *trail.last().unwrap();
        parent_of[last] = Some(match particles[i].state {
            ParticleState::Merged { vertex } => vertex,
            _ => root_vertex,
        });
        for &v in trail {
            keep[v] = true;
        }
    }
    if keep.iter().filter(|&&k| k).count() < 2 {
        return Err(Error::ReconstructionFailed(
            "no particle trail reached the root".into(),
        ));
    }

    let mut remap = vec![usize::MAX; keep.len()];
    let mut vertices = Vec::new();
    let mut provenance = Vec::new();
    for (v, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        remap[v] = vertices.len();
        vertices.push(store.positions[v]);
        provenance.push((store.owner[v] != usize::MAX).then_some(store.owner[v]));
    }
    let parent = (0..keep.len())
        .filter(|&v| keep[v])
        .map(|v| parent_of[v].map(|p| remap[p]))
        .collect();
    let graph = RawTraceGraph {
        vertices,
        parent,
        provenance,
        root: remap[root_vertex],
    };
    debug_assert!(graph.to_skeleton().is_ok());
    Ok(graph)
}

/// Removes a dead particle's trail, and every trail attached to it, from the merge index.
fn retire(dead: usize, trails: &[Vec<usize>], dependents: &[Vec<usize>], store: &mut TraceStore) {
    let mut stack = vec![dead];
    while let Some(i) = stack.pop() {
        for &v in &trails[i] {
            store.active[v] = false;
        }
        stack.extend(&dependents[i]);
    }
}
