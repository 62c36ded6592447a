//! Few-step reconstruction and reconstruction-error anomaly scoring.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::network::{ConsistencyModel, Which};
use crate::numerics::{flops, Tensor};
use crate::pointcloud::{NeighborIndex, Point3, PointCloud};

/// Source of the points an input is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scorer {
    /// Distance to the model's reconstruction of the input.
    Reconstruction,
    /// Distance to the union of the (normalized) training clouds.
    TrainingSetNn,
}

impl std::str::FromStr for Scorer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(Scorer::Reconstruction),
            "train_nn" => Ok(Scorer::TrainingSetNn),
            other => Err(Error::Config(format!("scorer must be reconstruction or train_nn, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Scorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scorer::Reconstruction => "reconstruction",
            Scorer::TrainingSetNn => "train_nn",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Noise levels, one per network evaluation, strictly decreasing.
    pub tau: Vec<f64>,
    pub use_target_net: bool,
    /// Neighborhood size of the per-point score smoothing (self included).
    pub smoothing_k: usize,
    /// Fraction of highest smoothed scores averaged into the object score.
    pub top_fraction: f64,
    pub scorer: Scorer,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            tau: vec![80.0, 0.5],
            use_target_net: true,
            smoothing_k: 5,
            top_fraction: 0.01,
            scorer: Scorer::Reconstruction,
        }
    }
}

/// Default noise levels for `steps` evaluations: `T`, then `0.5` halved at
/// every further step.
pub fn default_tau(steps: usize, t_max: f64) -> Vec<f64> {
    (0..steps)
        .map(|i| if i == 0 { t_max } else { 0.5 * 0.5f64.powi(i as i32 - 1) })
        .collect()
}

impl SamplerConfig {
    pub fn steps(&self) -> usize {
        self.tau.len()
    }

    pub fn with_steps(&self, steps: usize, t_max: f64) -> Self {
        Self {
            tau: default_tau(steps, t_max),
            ..self.clone()
        }
    }

    pub fn validate(&self, eps: f64) -> Result<()> {
        if self.tau.is_empty() {
            return Err(Error::Config("sampler needs at least one noise level".into()));
        }
        if self.tau.iter().any(|&t| !(t >= eps && t.is_finite())) {
            return Err(Error::Config(format!("sampler.tau values must be >= eps = {eps}: {:?}", self.tau)));
        }
        if self.tau.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!("sampler.tau must be strictly decreasing: {:?}", self.tau)));
        }
        if self.smoothing_k == 0 || !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config("sampler.smoothing_k must be > 0 and top_fraction in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Network evaluations performed by one call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub backbone: usize,
    pub encoder: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub reconstruction: PointCloud,
    pub counts: EvalCounts,
    /// FLOPs spent in consistency-function evaluations.
    pub backbone_flops: u64,
    pub encoder_flops: u64,
}

/// Anything that maps an input cloud to a reconstruction.
pub trait Reconstructor: Sync {
    fn reconstruct(&self, input: &PointCloud, cfg: &SamplerConfig, rng: &mut dyn rand::RngCore) -> Result<Sample>;
}

impl Reconstructor for ConsistencyModel {
    fn reconstruct(&self, input: &PointCloud, cfg: &SamplerConfig, rng: &mut dyn rand::RngCore) -> Result<Sample> {
        sample(self, input, cfg, rng)
    }
}

/// Returns the input unchanged; a perfect reconstructor for pipeline tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityReconstructor;

impl Reconstructor for IdentityReconstructor {
    fn reconstruct(&self, input: &PointCloud, _cfg: &SamplerConfig, _rng: &mut dyn rand::RngCore) -> Result<Sample> {
        Ok(Sample {
            reconstruction: input.clone(),
            counts: EvalCounts::default(),
            backbone_flops: 0,
            encoder_flops: 0,
        })
    }
}

fn gaussian_like<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Noises the input to `tau[0]` and denoises, then alternates re-noising to
/// `sqrt(tau_i^2 - eps^2)` and denoising for each further level.
pub fn sample<R: Rng + ?Sized>(
    model: &ConsistencyModel,
    input: &PointCloud,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Sample> {
    let eps = model.config().eps;
    cfg.validate(eps)?;
    if !model.is_finite() {
        return Err(Error::NonFinite {
            context: "model parameters".into(),
        });
    }
    let which = if cfg.use_target_net { Which::Target } else { Which::Online };
    let mut counts = EvalCounts::default();
    let (c, encoder_flops) = flops::measure(|| model.encode(which, input));
    let c = c?;
    counts.encoder += 1;
    let mut backbone_flops = 0;

    let x0 = input.to_tensor();
    let mut x = Tensor::zeros(x0.shape());
    for (i, &tau) in cfg.tau.iter().enumerate() {
        let z = gaussian_like(x0.shape(), rng)?;
        let (base, scale) = if i == 0 {
            (&x0, tau)
        } else {
            (&x, (tau * tau - eps * eps).max(0.0).sqrt())
        };
        let noisy = crate::schedule::add_noise(base, scale, &z)?;
        let (y, f) = flops::measure(|| model.forward(which, &noisy, tau, &c));
        x = y?;
        backbone_flops += f;
        counts.backbone += 1;
    }
    Ok(Sample {
        reconstruction: PointCloud::from_tensor(&x)?.with_source(input.source_id()),
        counts,
        backbone_flops,
        encoder_flops,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyReport {
    /// Input positions the scores refer to.
    pub points: Vec<Point3>,
    /// Smoothed per-point scores, aligned with `points`.
    pub per_point_scores: Vec<f64>,
    pub object_score: f64,
    pub reconstruction: PointCloud,
    pub eval_counts: EvalCounts,
}

/// Squared nearest-neighbor distance from each input point to `reference`,
/// averaged over each point's `k` nearest input neighbors.
pub fn smoothed_scores(input: &[Point3], reference: &NeighborIndex, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = input
        .iter()
        .map(|p| reference.nearest(p).map_or(0.0, |n| n.dist2))
        .collect();
    let own = NeighborIndex::new(input);
    input
        .iter()
        .map(|p| {
            let nb = own.knn(p, k);
            nb.iter().map(|n| raw[n.index]).sum::<f64>() / nb.len() as f64
        })
        .collect()
}

/// Mean of the top `max(1, floor(fraction * n))` scores.
pub fn object_score(scores: &[f64], fraction: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = ((fraction * scores.len() as f64).floor() as usize).max(1);
    sorted[..top].iter().sum::<f64>() / top as f64
}

/// Reconstructs `input` and scores each point by its distance to the
/// reconstruction.
pub fn score(
    model: &dyn Reconstructor,
    input: &PointCloud,
    cfg: &SamplerConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<AnomalyReport> {
    let sample = model.reconstruct(input, cfg, rng)?;
    let index = NeighborIndex::new(sample.reconstruction.points());
    Ok(report_from(input, &index, cfg, sample.reconstruction, sample.counts))
}

fn report_from(input: &PointCloud, index: &NeighborIndex, cfg: &SamplerConfig, reconstruction: PointCloud, counts: EvalCounts) -> AnomalyReport {
    let per_point = smoothed_scores(input.points(), index, cfg.smoothing_k);
    AnomalyReport {
        points: input.points().to_vec(),
        object_score: object_score(&per_point, cfg.top_fraction),
        per_point_scores: per_point,
        reconstruction,
        eval_counts: counts,
    }
}

/// Baseline scorer: distance to the nearest point of any training cloud.
pub struct TrainingSetScorer {
    index: NeighborIndex,
}

impl TrainingSetScorer {
    pub fn new(training: &[PointCloud]) -> Result<Self> {
        let pts: Vec<Point3> = training.iter().flat_map(|pc| pc.points().iter().copied()).collect();
        if pts.is_empty() {
            return Err(Error::contract("training-set scorer needs at least one cloud"));
        }
        Ok(Self {
            index: NeighborIndex::new(&pts),
        })
    }

    pub fn score(&self, input: &PointCloud, cfg: &SamplerConfig) -> AnomalyReport {
        let reference = PointCloud::new(self.index.points().to_vec()).expect("non-empty");
        report_from(input, &self.index, cfg, reference, EvalCounts::default())
    }
}

/// Writes `x,y,z,score,score_norm`, with `score_norm` min-max scaled over
/// the cloud (all zeros when every score is equal).
pub fn export_heatmap(report: &AnomalyReport, path: &Path) -> Result<()> {
    let s = &report.per_point_scores;
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = String::from("x,y,z,score,score_norm\n");
    for (p, &v) in report.points.iter().zip(s) {
        let norm = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        let _ = writeln!(out, "{},{},{},{},{}", p[0], p[1], p[2], v, norm);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
