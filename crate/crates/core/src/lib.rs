//! Reconstruction of 3D plant branch skeletons from multi-view branch
//! probability maps.
//!
//! The stages are: synthetic plants ([`plantgen`]), camera rigs
//! ([`cameras`]), per-view masks and probability maps ([`probmap`]),
//! log-domain back-projection into a voxel grid ([`aggregate`]), particle flow
//! through the grid ([`particleflow`]), skeleton refinement ([`refine`]) and
//! evaluation ([`metrics`]). [`pipeline`] wires them together.

pub mod aggregate;
pub mod cameras;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod particleflow;
pub mod pipeline;
pub mod plantgen;
pub mod probmap;
pub mod refine;
pub mod rng;

pub use error::{Error, Result};
pub use graph::SkeletonGraph;
