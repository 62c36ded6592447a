//! Synthetic local defects.
//!
//! A pivot is drawn uniformly from the cloud; its `patch_size` nearest
//! neighbors are pushed along their direction from the pivot, scaled
//! elementwise by one Gaussian translation triple shared by the whole patch:
//!
//! `p <- p + S * normalize(p - pivot) ⊙ T`

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pointcloud::{Label, NeighborIndex, Point3, PointCloud};

const NORMALIZED_BOUND: f64 = 1.0 + 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchMode {
    /// Displace away from the pivot direction (`+S`).
    Bulge,
    /// Displace toward it (`-S`).
    Concavity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PatchSize {
    /// Fraction of the cloud, rounded, at least one point.
    Fraction(f64),
    Count(usize),
}

impl PatchSize {
    pub fn resolve(self, cloud_len: usize) -> usize {
        match self {
            PatchSize::Fraction(f) => ((f * cloud_len as f64).round() as usize).max(1),
            PatchSize::Count(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGenConfig {
    /// Displacement scale `S`, in normalized units.
    pub scale: f64,
    pub patch_size: PatchSize,
    /// Standard deviation of each entry of `T`.
    pub translation_sigma: f64,
    pub mode: PatchMode,
}

impl Default for PatchGenConfig {
    fn default() -> Self {
        Self {
            scale: 0.05,
            patch_size: PatchSize::Fraction(0.05),
            translation_sigma: 1.0,
            mode: PatchMode::Bulge,
        }
    }
}

impl PatchGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::contract(format!("patchgen scale must be >= 0, got {}", self.scale)));
        }
        if !(self.translation_sigma > 0.0 && self.translation_sigma.is_finite()) {
            return Err(Error::contract(format!(
                "patchgen translation_sigma must be > 0, got {}",
                self.translation_sigma
            )));
        }
        match self.patch_size {
            PatchSize::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                Err(Error::contract(format!("patch fraction must be in (0, 1], got {f}")))
            }
            PatchSize::Count(0) => Err(Error::contract("patch size must be positive")),
            _ => Ok(()),
        }
    }

    fn signed_scale(&self) -> f64 {
        match self.mode {
            PatchMode::Bulge => self.scale,
            PatchMode::Concavity => -self.scale,
        }
    }
}

/// Result of one perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    /// Labeled anomalous, with `mask` attached as its point mask.
    pub cloud: PointCloud,
    pub mask: Vec<bool>,
    pub pivot: usize,
    pub translation: [f64; 3],
}

/// Applies one Patch-Gen defect to a normalized cloud.
pub fn perturb<R: Rng + ?Sized>(pc: &PointCloud, cfg: &PatchGenConfig, rng: &mut R) -> Result<Perturbation> {
    cfg.validate()?;
    pc.require_min_points()?;
    if pc.max_abs() > NORMALIZED_BOUND {
        return Err(Error::contract(format!(
            "Patch-Gen expects a normalized cloud, found |coordinate| = {}",
            pc.max_abs()
        )));
    }
    let n = pc.len();
    let patch_size = cfg.patch_size.resolve(n);
    let pivot = rng.random_range(0..n);
    let pivot_pt = pc.points()[pivot];

    // Points coincident with the pivot have no direction and are skipped.
    let index = NeighborIndex::new(pc.points());
    let patch: Vec<usize> = index
        .knn(&pivot_pt, n)
        .into_iter()
        .filter(|nb| nb.dist2 > 0.0)
        .take(patch_size)
        .map(|nb| nb.index)
        .collect();
    if patch.len() < patch_size {
        return Err(Error::contract(format!(
            "degenerate cloud: only {} points differ from the pivot, patch needs {patch_size}",
            patch.len()
        )));
    }

    let translation: [f64; 3] = std::array::from_fn(|_| {
        let z: f64 = StandardNormal.sample(rng);
        cfg.translation_sigma * z
    });
    let mut points = pc.points().to_vec();
    displace(&mut points, pivot_pt, &patch, cfg.signed_scale(), translation);

    let mut mask = vec![false; n];
    for &i in &patch {
        mask[i] = true;
    }
    let cloud = PointCloud::new(points)?
        .with_label(Label::Anomalous)
        .with_source(pc.source_id())
        .with_mask(mask.clone())?;
    Ok(Perturbation {
        cloud,
        mask,
        pivot,
        translation,
    })
}

/// In-place displacement of the `patch` points.
pub fn displace(points: &mut [Point3], pivot: Point3, patch: &[usize], signed_scale: f64, translation: [f64; 3]) {
    for &i in patch {
        let p = points[i];
        let d = [p[0] - pivot[0], p[1] - pivot[1], p[2] - pivot[2]];
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if norm == 0.0 {
            continue;
        }
        for k in 0..3 {
            points[i][k] = p[k] + signed_scale * (d[k] / norm) * translation[k];
        }
    }
}
