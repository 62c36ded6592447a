use super::{NeighborIndex, Point3};
use crate::error::{Error, Result};

/// Symmetric Chamfer distance with squared Euclidean distances, summing the
/// mean nearest-neighbor term of each direction:
///
/// `CD(A, B) = mean_{a in A} min_b |a - b|^2 + mean_{b in B} min_a |a - b|^2`
pub fn chamfer(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("chamfer distance of an empty cloud"));
    }
    Ok(directed(a, &NeighborIndex::new(b)) + directed(b, &NeighborIndex::new(a)))
}

fn directed(from: &[Point3], to: &NeighborIndex) -> f64 {
    let sum: f64 = from
        .iter()
        .map(|p| to.nearest(p).expect("index is non-empty").dist2)
        .sum();
    sum / from.len() as f64
}
