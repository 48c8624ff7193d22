//! Chamfer distances with per-direction mean reduction.
//!
//! Nearest neighbors come from [`SpatialIndex`], which resolves ties to the
//! lowest index; per-point terms are summed in index order so results are
//! independent of threading.

use serde::{Deserialize, Serialize};

use crate::geom::{PointCloud, SpatialIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChamferResult {
    /// Mean over `a` of the distance term to the nearest point of `b`.
    pub forward: f64,
    /// Mean over `b` of the distance term to the nearest point of `a`.
    pub backward: f64,
    pub total: f64,
}

/// For every point of `from`, the index of its nearest point in `to` and the
/// squared distance.
pub fn nearest_assignments(from: &PointCloud, to: &SpatialIndex) -> Vec<(usize, f64)> {
    from.iter().map(|p| to.nearest(p)).collect()
}

fn reduce(a: &PointCloud, b: &PointCloud, term: impl Fn(f64) -> f64) -> ChamferResult {
    let ib = SpatialIndex::build(b);
    let ia = SpatialIndex::build(a);
    let mean = |v: Vec<(usize, f64)>| {
        let n = v.len() as f64;
        v.into_iter().map(|(_, d2)| term(d2)).sum::<f64>() / n
    };
    let forward = mean(nearest_assignments(a, &ib));
    let backward = mean(nearest_assignments(b, &ia));
    ChamferResult {
        forward,
        backward,
        total: forward + backward,
    }
}

/// Squared-L2 Chamfer distance (deformation supervision).
pub fn chamfer_l2sq(a: &PointCloud, b: &PointCloud) -> ChamferResult {
    reduce(a, b, |d2| d2)
}

/// L1 Chamfer distance: Euclidean (not squared) nearest distances.
pub fn chamfer_l1(a: &PointCloud, b: &PointCloud) -> ChamferResult {
    reduce(a, b, f64::sqrt)
}
