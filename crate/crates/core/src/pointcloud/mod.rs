//! Point cloud values, normalization, subsampling, neighbor queries,
//! Chamfer distance and file formats.

mod chamfer;
mod index;
pub mod io;

pub use chamfer::chamfer;
pub use index::{Neighbor, NeighborIndex};
pub use io::{load, load_auto, load_dir, save, Format};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub type Point3 = [f64; 3];

/// Smallest cloud the model pipeline (encoder, Patch-Gen, scoring) accepts.
pub const MIN_POINTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Clean,
    Anomalous,
    Unknown,
}

/// Ordered 3D points plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    label: Label,
    point_mask: Option<Vec<bool>>,
    source_id: String,
}

impl PointCloud {
    /// Builds a cloud; rejects empty input and non-finite coordinates.
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("point cloud is empty"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite {
                context: format!("point {i} of point cloud"),
            });
        }
        Ok(Self {
            points,
            label: Label::Unknown,
            point_mask: None,
            source_id: String::new(),
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.cols() != 3 {
            return Err(Error::contract(format!(
                "expected an N x 3 tensor, got {:?}",
                t.shape()
            )));
        }
        Self::new(t.to_points())
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.points.len() {
            return Err(Error::contract(format!(
                "mask has {} entries for {} points",
                mask.len(),
                self.points.len()
            )));
        }
        self.point_mask = Some(mask);
        Ok(self)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn point_mask(&self) -> Option<&[bool]> {
        self.point_mask.as_deref()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.points)
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    /// Largest absolute coordinate.
    pub fn max_abs(&self) -> f64 {
        self.points
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Checks the minimum size the model pipeline needs.
    pub fn require_min_points(&self) -> Result<()> {
        if self.points.len() < MIN_POINTS {
            return Err(Error::contract(format!(
                "cloud '{}' has {} points, at least {MIN_POINTS} required",
                self.source_id,
                self.points.len()
            )));
        }
        Ok(())
    }

    /// Copy with the same provenance but new coordinates.
    pub(crate) fn with_points(&self, points: Vec<Point3>) -> Self {
        Self {
            points,
            label: self.label,
            point_mask: self.point_mask.clone(),
            source_id: self.source_id.clone(),
        }
    }
}

fn centroid(points: &[Point3]) -> Point3 {
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = points.len() as f64;
    c.map(|v| v / n)
}

/// Centers the cloud at its centroid and scales by the largest absolute
/// coordinate so every coordinate lies in `[-1, 1]`. A cloud whose points
/// all coincide maps to the origin.
pub fn normalize(pc: &PointCloud) -> Result<PointCloud> {
    if pc.is_empty() {
        return Err(Error::contract("normalize on an empty cloud"));
    }
    let c = pc.centroid();
    let centered: Vec<Point3> = pc
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let scale = centered
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let points = if scale == 0.0 {
        vec![[0.0; 3]; centered.len()]
    } else {
        centered.iter().map(|p| p.map(|v| v / scale)).collect()
    };
    Ok(pc.with_points(points))
}

/// Draws `m` distinct points uniformly at random. The per-point mask, if
/// present, follows the selected points.
pub fn subsample_uniform<R: Rng + ?Sized>(pc: &PointCloud, m: usize, rng: &mut R) -> Result<PointCloud> {
    if m > pc.len() {
        return Err(Error::contract(format!(
            "cannot draw {m} points from a cloud of {}",
            pc.len()
        )));
    }
    if m == 0 {
        return Err(Error::contract("subsample size must be positive"));
    }
    let picks = rand::seq::index::sample(rng, pc.len(), m);
    let points = picks.iter().map(|i| pc.points[i]).collect();
    let mask = pc
        .point_mask
        .as_ref()
        .map(|mask| picks.iter().map(|i| mask[i]).collect());
    Ok(PointCloud {
        points,
        label: pc.label,
        point_mask: mask,
        source_id: pc.source_id.clone(),
    })
}

pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[cfg(test)]
mod tests;
