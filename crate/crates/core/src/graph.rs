//! Rooted tree graphs shared by ground-truth plants, raw flow traces and
//! refined skeletons, plus their document and PLY encodings.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rooted tree embedded in 3D. Vertex ids are indices into `vertices`;
/// edges are stored as `(parent, child)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    pub vertices: Vec<Vector3<f64>>,
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
}

/// Checks that `edges` form a single tree over `n` vertices containing `root`.
pub fn validate_tree(n: usize, edges: &[(usize, usize)], root: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Structure("graph has no vertices".into()));
    }
    if root >= n {
        return Err(Error::Structure(format!("root {root} out of range ({n} vertices)")));
    }
    if edges.len() != n - 1 {
        return Err(Error::Structure(format!(
            "{} edges for {} vertices; a tree needs {}",
            edges.len(),
            n,
            n - 1
        )));
    }
    let adj = adjacency(n, edges)?;
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    let mut visited = 1;
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                visited += 1;
                queue.push_back(w);
            }
        }
    }
    if visited != n {
        return Err(Error::Structure(format!(
            "only {visited} of {n} vertices reachable from root"
        )));
    }
    Ok(())
}

fn adjacency(n: usize, edges: &[(usize, usize)]) -> Result<Vec<Vec<usize>>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(Error::Structure(format!("edge ({a}, {b}) references a missing vertex")));
        }
        if a == b {
            return Err(Error::Structure(format!("self-loop at vertex {a}")));
        }
        adj[a].push(b);
        adj[b].push(a);
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    Ok(adj)
}

/// Number of vertices with three or more incident edges.
pub fn joint_count_of(n: usize, edges: &[(usize, usize)], root: usize) -> Result<usize> {
    validate_tree(n, edges, root)?;
    let mut degree = vec![0usize; n];
    for &(a, b) in edges {
        degree[a] += 1;
        degree[b] += 1;
    }
    Ok(degree.iter().filter(|&&d| d >= 3).count())
}

impl SkeletonGraph {
    /// Builds a graph from a parent array; `parents[root]` must be `None`.
    pub fn from_parents(
        vertices: Vec<Vector3<f64>>,
        parents: &[Option<usize>],
        root: usize,
    ) -> Result<Self> {
        if parents.len() != vertices.len() {
            return Err(Error::Usage("parent array length differs from vertex count".into()));
        }
        let edges = parents
            .iter()
            .enumerate()
            .filter_map(|(child, p)| p.map(|p| (p, child)))
            .collect();
        let g = SkeletonGraph {
            vertices,
            edges,
            root,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn single_vertex(position: Vector3<f64>) -> Self {
        SkeletonGraph {
            vertices: vec![position],
            edges: Vec::new(),
            root: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        validate_tree(self.vertices.len(), &self.edges, self.root)
    }

    pub fn joint_count(&self) -> Result<usize> {
        joint_count_of(self.vertices.len(), &self.edges, self.root)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut degree = vec![0usize; self.vertices.len()];
        for &(a, b) in &self.edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        degree
    }

    /// Sorted neighbour lists.
    pub fn neighbors(&self) -> Result<Vec<Vec<usize>>> {
        adjacency(self.vertices.len(), &self.edges)
    }

    /// Parent of every vertex when the tree is hung from `root`, plus the BFS order used.
    pub fn parents(&self) -> Result<(Vec<Option<usize>>, Vec<usize>)> {
        self.validate()?;
        let adj = self.neighbors()?;
        let mut parent = vec![None; self.vertices.len()];
        let mut order = Vec::with_capacity(self.vertices.len());
        let mut seen = vec![false; self.vertices.len()];
        let mut queue = VecDeque::from([self.root]);
        seen[self.root] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some(v);
                    queue.push_back(w);
                }
            }
        }
        Ok((parent, order))
    }

    /// Same tree with every edge written as `(parent, child)` relative to the root.
    pub fn reoriented(&self) -> Result<Self> {
        let (parent, _) = self.parents()?;
        Self::from_parents(self.vertices.clone(), &parent, self.root)
    }

    pub fn total_length(&self) -> f64 {
        self.edges
            .iter()
            .map(|&(a, b)| (self.vertices[a] - self.vertices[b]).norm())
            .sum()
    }

    /// Axis-aligned bounding box `(min, max)` of the vertices.
    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        bounding_box(&self.vertices)
    }

    pub fn to_doc(&self) -> SkeletonDoc {
        SkeletonDoc {
            nodes: self
                .vertices
                .iter()
                .enumerate()
                .map(|(id, p)| NodeDoc {
                    id,
                    x: p.x,
                    y: p.y,
                    z: p.z,
                })
                .collect(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            root: self.root,
        }
    }

    pub fn from_doc(doc: &SkeletonDoc) -> Result<Self> {
        let index: HashMap<usize, usize> = doc
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect();
        if index.len() != doc.nodes.len() {
            return Err(Error::Structure("duplicate node ids".into()));
        }
        let lookup = |id: usize| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Structure(format!("unknown node id {id}")))
        };
        let edges = doc
            .edges
            .iter()
            .map(|[a, b]| Ok((lookup(*a)?, lookup(*b)?)))
            .collect::<Result<Vec<_>>>()?;
        let g = SkeletonGraph {
            vertices: doc.nodes.iter().map(|n| Vector3::new(n.x, n.y, n.z)).collect(),
            edges,
            root: lookup(doc.root)?,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.to_doc())?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_doc(&serde_json::from_str(&text)?)
    }

    /// ASCII PLY with a vertex element and an edge element.
    pub fn to_ply(&self) -> String {
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\ncomment branch skeleton\n");
        let _ = writeln!(out, "element vertex {}", self.vertices.len());
        out.push_str("property double x\nproperty double y\nproperty double z\n");
        let _ = writeln!(out, "element edge {}", self.edges.len());
        out.push_str("property int vertex1\nproperty int vertex2\nend_header\n");
        for p in &self.vertices {
            let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
        }
        for &(a, b) in &self.edges {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ply())?;
        Ok(())
    }
}

pub(crate) fn bounding_box(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// On-disk skeleton document: `{nodes:[{id,x,y,z}], edges:[[a,b]], root}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkeletonDoc {
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<[usize; 2]>,
    pub root: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}
