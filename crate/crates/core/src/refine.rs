//! Turns raw particle traces into a clean skeleton: nearby vertices are
//! unified, weakly supported branches pruned, and the survivors smoothed and
//! pulled onto the ridge of the probability volume.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::aggregate::VoxelGrid;
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::particleflow::RawTraceGraph;
use crate::plantgen::perpendicular_basis;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub iterations: usize,
    /// Vertices closer than this are merged into one.
    pub unify_radius: f64,
    /// Subtrees whose mean vertex weight falls below this are removed.
    pub prune_threshold: f64,
    /// Leaf branches shorter than this, measured from their joint, are removed.
    pub min_branch_length: f64,
    pub ridge_search_radius: f64,
}

impl RefineConfig {
    /// Defaults expressed in voxels of `grid`.
    pub fn for_grid(grid: &VoxelGrid) -> Self {
        let s = grid.spacing;
        RefineConfig {
            iterations: 3,
            unify_radius: 2.5 * s,
            prune_threshold: 0.5,
            min_branch_length: 6.0 * s,
            ridge_search_radius: s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("unify_radius", self.unify_radius),
            ("min_branch_length", self.min_branch_length),
            ("ridge_search_radius", self.ridge_search_radius),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            return Err(Error::config("prune_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Trilinearly interpolated normalised weight; zero outside the grid.
pub fn sample_weight(grid: &VoxelGrid, p: &Vector3<f64>) -> f64 {
    let v = grid.to_voxel(p);
    let mut total = 0.0;
    let base = [v.x.floor(), v.y.floor(), v.z.floor()];
    let frac = [v.x - base[0], v.y - base[1], v.z - base[2]];
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            let c = base[a] + bit as f64;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            if !(c >= 0.0 && c < grid.dims[a] as f64) {
                inside = false;
            }
            idx[a] = c.max(0.0) as usize;
        }
        if inside && w > 0.0 {
            total += w * grid.normalized_weight(grid.index(idx[0], idx[1], idx[2]));
        }
    }
    total
}

/// Moves every vertex except the root and the tips to the mean of itself and its neighbours.
pub fn smooth(graph: &SkeletonGraph) -> Result<SkeletonGraph> {
    let adj = graph.neighbors()?;
    let mut out = graph.clone();
    for (v, nbrs) in adj.iter().enumerate() {
        if v == graph.root || nbrs.len() < 2 {
            continue;
        }
        let sum = nbrs.iter().fold(graph.vertices[v], |acc, &w| acc + graph.vertices[w]);
        out.vertices[v] = sum / (nbrs.len() + 1) as f64;
    }
    Ok(out)
}

/// Moves each non-root vertex to the highest-weight point found within
/// `radius` in the plane perpendicular to the local branch direction, taken
/// as the mean of its root-to-tip oriented incident edge directions.
///
/// Eight directions are probed in half-voxel steps; a probe must beat the
/// current position by more than rounding noise to win.
pub fn snap_to_ridge(graph: &SkeletonGraph, grid: &VoxelGrid, radius: f64) -> Result<SkeletonGraph> {
    let (parent, _) = graph.parents()?;
    let adj = graph.neighbors()?;
    let step = 0.5 * grid.spacing;
    let steps = (radius / step + 1e-9).floor() as usize;
    let mut out = graph.clone();
    for v in 0..graph.len() {
        let Some(p) = parent[v] else { continue };
        let here = graph.vertices[v];
        let unit = |d: Vector3<f64>| if d.norm() > 0.0 { d.normalize() } else { d };
        let tangent = adj[v]
            .iter()
            .filter(|&&w| w != p)
            .fold(unit(here - graph.vertices[p]), |acc, &w| acc + unit(graph.vertices[w] - here));
        if tangent.norm() < 1e-12 {
            continue;
        }
        let (e1, e2) = perpendicular_basis(&tangent.normalize());
        let mut best = (sample_weight(grid, &here), here);
        for d in 0..8 {
            let theta = d as f64 * std::f64::consts::FRAC_PI_4;
            let dir = e1 * theta.cos() + e2 * theta.sin();
            for m in 1..=steps {
                let q = here + dir * (m as f64 * step);
                let w = sample_weight(grid, &q);
                // Ties and rounding noise keep the earlier candidate.
                if w > best.0 + 1e-12 {
                    best = (w, q);
                }
            }
        }
        out.vertices[v] = best.1;
    }
    Ok(out)
}

/// Heap entry for the widest-path tree; ties go to the lower vertex index.
struct Reach {
    width: f64,
    vertex: usize,
    from: Option<usize>,
}

impl PartialEq for Reach {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Reach {}

impl PartialOrd for Reach {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Reach {
    fn cmp(&self, other: &Self) -> Ordering {
        self.width
            .total_cmp(&other.width)
            .then_with(|| other.vertex.cmp(&self.vertex))
            .then_with(|| other.from.cmp(&self.from))
    }
}

/// Greedy clustering: in BFS order, each unassigned vertex claims every
/// unassigned vertex within `radius`. The root's cluster stays at the root.
fn cluster(graph: &SkeletonGraph, order: &[usize], radius: f64) -> (Vec<usize>, Vec<Vector3<f64>>) {
    let cell = radius.max(1e-12);
    let key = |p: &Vector3<f64>| {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    };
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (v, p) in graph.vertices.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(v);
    }
    let mut label = vec![usize::MAX; graph.len()];
    let mut centers = Vec::new();
    for &v in order {
        if label[v] != usize::MAX {
            continue;
        }
        let id = centers.len();
        let c = graph.vertices[v];
        let [x, y, z] = key(&c);
        let mut members = Vec::new();
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    for &w in buckets.get(&[x + dx, y + dy, z + dz]).into_iter().flatten() {
                        if label[w] == usize::MAX && (graph.vertices[w] - c).norm() <= radius {
                            members.push(w);
                        }
                    }
                }
            }
        }
        // `v` itself is among the members, at distance zero.
        let mut sum = Vector3::zeros();
        for &w in &members {
            label[w] = id;
            sum += graph.vertices[w];
        }
        let count = members.len();
        centers.push(if v == graph.root { c } else { sum / count as f64 });
    }
    (label, centers)
}

/// Unifies vertices within `unify_radius`, then removes subtrees with a low
/// mean vertex weight and leaf branches shorter than `min_branch_length`.
pub fn simplify(graph: &SkeletonGraph, grid: &VoxelGrid, cfg: &RefineConfig) -> Result<SkeletonGraph> {
    let (_, order) = graph.parents()?;
    let (label, centers) = cluster(graph, &order, cfg.unify_radius);
    let root = label[graph.root];

    let mut adj = vec![Vec::new(); centers.len()];
    for &(a, b) in &graph.edges {
        let (ca, cb) = (label[a], label[b]);
        if ca != cb {
            adj[ca].push(cb);
            adj[cb].push(ca);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    // Contracting can close loops. Keep the spanning tree that reaches every
    // vertex through its strongest path, so real branches are not attached via
    // a stray trace through the background.
    let weight: Vec<f64> = centers.iter().map(|c| sample_weight(grid, c)).collect();
    let mut parent = vec![None; centers.len()];
    let mut seen = vec![false; centers.len()];
    let mut bfs = Vec::with_capacity(centers.len());
    let mut heap = BinaryHeap::from([Reach {
        width: weight[root],
        vertex: root,
        from: None,
    }]);
    while let Some(Reach { vertex: v, from, .. }) = heap.pop() {
        if seen[v] {
            continue;
        }
        seen[v] = true;
        parent[v] = from;
        bfs.push(v);
        for &w in &adj[v] {
            if !seen[w] {
                heap.push(Reach {
                    width: weight[v].min(weight[w]),
                    vertex: w,
                    from: Some(v),
                });
            }
        }
    }

    // Bottom-up: a subtree is judged by the mean weight of its vertices that
    // survived pruning further down, so weak tips go before their parents.
    let mut mass = weight.clone();
    let mut count = vec![1usize; centers.len()];
    let mut keep = vec![true; centers.len()];
    for &v in bfs.iter().rev() {
        let mean = mass[v] / count[v] as f64;
        match parent[v] {
            Some(p) if mean >= cfg.prune_threshold => {
                mass[p] += mass[v];
                count[p] += count[v];
            }
            Some(_) => keep[v] = false,
            None if mean < cfg.prune_threshold => {
                return Err(Error::ReconstructionFailed(format!(
                    "mean skeleton weight {mean:.3} below prune threshold {}",
                    cfg.prune_threshold
                )));
            }
            None => {}
        }
    }
    for &v in &bfs {
        if let Some(p) = parent[v] {
            keep[v] = keep[v] && keep[p];
        }
    }
    prune_short_leaves(&centers, &mut parent, &mut keep, root, cfg.min_branch_length);

    let mut remap = vec![usize::MAX; centers.len()];
    let mut vertices = Vec::new();
    for &v in bfs.iter().filter(|&&v| keep[v]) {
        remap[v] = vertices.len();
        vertices.push(centers[v]);
    }
    let parents: Vec<Option<usize>> = bfs
        .iter()
        .filter(|&&v| keep[v])
        .map(|&v| parent[v].map(|p| remap[p]))
        .collect();
    SkeletonGraph::from_parents(vertices, &parents, 0)
}

/// Removes leaf chains that end at a joint after less than `min_length`.
fn prune_short_leaves(
    centers: &[Vector3<f64>],
    parent: &mut [Option<usize>],
    keep: &mut [bool],
    root: usize,
    min_length: f64,
) {
    loop {
        let mut children = vec![0usize; centers.len()];
        for v in 0..centers.len() {
            if keep[v] {
                if let Some(p) = parent[v] {
                    children[p] += 1;
                }
            }
        }
        // Each leaf walks up to the first vertex with another child.
        let mut doomed = Vec::new();
        for leaf in (0..centers.len()).filter(|&v| keep[v] && children[v] == 0 && v != root) {
            let mut chain = vec![leaf];
            let mut len = 0.0;
            let mut v = leaf;
            let joint = loop {
                let Some(p) = parent[v] else { break None };
                len += (centers[v] - centers[p]).norm();
                if children[p] > 1 {
                    break Some(p);
                }
                if p == root {
                    break None;
                }
                chain.push(p);
                v = p;
            };
            if joint.is_some() && len < min_length {
                doomed.push((len, chain));
            }
        }
        if doomed.is_empty() {
            return;
        }
        // Drop only the shortest spur per round so sibling spurs are judged after it is gone.
        let (_, chain) = doomed
            .into_iter()
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1[0].cmp(&b.1[0])))
            .unwrap();
        for v in chain {
            keep[v] = false;
            parent[v] = None;
        }
    }
}

/// Runs smoothing, ridge snapping and simplification `cfg.iterations` times.
pub fn refine(raw: &SkeletonGraph, grid: &VoxelGrid, cfg: &RefineConfig) -> Result<SkeletonGraph> {
    cfg.validate()?;
    let mut g = raw.clone();
    for _ in 0..cfg.iterations {
        g = smooth(&g)?;
        g = snap_to_ridge(&g, grid, cfg.ridge_search_radius)?;
        g = simplify(&g, grid, cfg)?;
    }
    Ok(g)
}

/// [`refine`] applied to particle traces.
pub fn refine_loop(raw: &RawTraceGraph, grid: &VoxelGrid, cfg: &RefineConfig) -> Result<SkeletonGraph> {
    refine(&raw.to_skeleton()?, grid, cfg)
}
