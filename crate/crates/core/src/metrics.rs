//! Geometric and structural comparison of two skeletons.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;

/// Default edge sampling step as a fraction of the reference bounding-box diagonal.
pub const DEFAULT_SAMPLE_FRACTION: f64 = 0.005;

/// Points sampled along a skeleton, with the spacing used to produce them.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Vec<Vector3<f64>>,
    pub source_spacing: f64,
}

/// Vertices plus evenly spaced interior points on every edge.
///
/// An edge of length `L` is cut into `max(1, ceil(L / spacing))` equal pieces,
/// so consecutive samples are never further apart than `spacing` and each
/// vertex appears once.
pub fn sample_edge_points(graph: &SkeletonGraph, spacing: f64) -> Result<PointSet> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::config("sample_spacing", "must be positive"));
    }
    if graph.is_empty() {
        return Err(Error::Usage("cannot sample an empty skeleton".into()));
    }
    let mut points = graph.vertices.clone();
    for &(a, b) in &graph.edges {
        let (pa, pb) = (graph.vertices[a], graph.vertices[b]);
        let n = ((pb - pa).norm() / spacing - 1e-9).ceil().max(1.0) as usize;
        points.extend((1..n).map(|m| pa + (pb - pa) * (m as f64 / n as f64)));
    }
    Ok(PointSet {
        points,
        source_spacing: spacing,
    })
}

fn mean_nearest(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> f64 {
    let nearest: Vec<f64> = from
        .par_iter()
        .map(|p| {
            to.iter()
                .map(|q| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    nearest.iter().sum::<f64>() / from.len() as f64
}

/// Symmetric mean nearest-neighbour distance between two point sets.
pub fn geometric_error(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("cannot compare an empty point set".into()));
    }
    Ok(0.5 * (mean_nearest(a, b) + mean_nearest(b, a)))
}

/// [`geometric_error`] between edge samples of two skeletons.
pub fn skeleton_distance(a: &SkeletonGraph, b: &SkeletonGraph, spacing: f64) -> Result<f64> {
    geometric_error(&sample_edge_points(a, spacing)?.points, &sample_edge_points(b, spacing)?.points)
}

/// Absolute difference in joint counts.
pub fn structure_error(a: &SkeletonGraph, b: &SkeletonGraph) -> Result<usize> {
    Ok(a.joint_count()?.abs_diff(b.joint_count()?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub geometric_error: f64,
    /// Geometric error divided by the reference bounding-box diagonal.
    pub geometric_error_normalized: f64,
    pub structure_error: usize,
    pub reconstructed_joints: usize,
    pub reference_joints: usize,
    pub reference_diagonal: f64,
    pub sample_spacing: f64,
}

/// Scores `reconstructed` against `reference`. Without an explicit `spacing`
/// the sampling step is [`DEFAULT_SAMPLE_FRACTION`] of the reference diagonal.
pub fn evaluate(
    reconstructed: &SkeletonGraph,
    reference: &SkeletonGraph,
    spacing: Option<f64>,
) -> Result<EvalReport> {
    reconstructed.validate()?;
    reference.validate()?;
    let (lo, hi) = reference.bounding_box();
    let diagonal = (hi - lo).norm();
    if !(diagonal > 0.0) {
        return Err(Error::Usage("reference skeleton has a degenerate bounding box".into()));
    }
    let spacing = spacing.unwrap_or(DEFAULT_SAMPLE_FRACTION * diagonal);
    let geometric = skeleton_distance(reconstructed, reference, spacing)?;
    let (rj, gj) = (reconstructed.joint_count()?, reference.joint_count()?);
    Ok(EvalReport {
        geometric_error: geometric,
        geometric_error_normalized: geometric / diagonal,
        structure_error: rj.abs_diff(gj),
        reconstructed_joints: rj,
        reference_joints: gj,
        reference_diagonal: diagonal,
        sample_spacing: spacing,
    })
}
