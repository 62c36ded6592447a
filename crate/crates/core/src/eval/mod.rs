//! Detection metrics, synthetic data, Chamfer sweeps, loss ablations and
//! efficiency benchmarks.

mod bench;
mod metrics;
pub mod synth;

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use bench::{bench, iterative_sample, BenchConfig, BenchRecord, SamplerKind, StageTimes, BENCH_HEADER};
pub use metrics::{auroc, LabeledScore};
pub use synth::{dir_digest, read_manifest, synth_dataset, ManifestEntry, Shape, SynthConfig};

use crate::error::{Error, Result};
use crate::inference::{self, Reconstructor, SamplerConfig, Scorer, TrainingSetScorer};
use crate::network::ModelConfig;
use crate::pointcloud::{self, PointCloud};
use crate::training::{self, LossVariant, TrainConfig};

pub const SCORES_HEADER: &str = "file,label,object_score";
pub const SWEEP_HEADER: &str = "steps,mean_chamfer";
pub const ABLATION_HEADER: &str = "loss_variant,i_auroc";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    /// Test clouds larger than this are uniformly subsampled first.
    pub points_per_cloud: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            points_per_cloud: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloudScore {
    pub file: String,
    pub anomalous: bool,
    pub object_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub auroc: f64,
    /// In manifest order.
    pub clouds: Vec<CloudScore>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SCORES_HEADER}\n");
        for c in &self.clouds {
            let _ = writeln!(out, "{},{},{}", c.file, u8::from(c.anomalous), c.object_score);
        }
        out
    }
}

/// Per-file randomness, keyed by the file name so that results do not
/// depend on the order files are visited in.
fn cloud_rng(seed: u64, file: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(file.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
    rng
}

fn prepare_input(path: &Path, cfg: &EvalConfig, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let pc = pointcloud::load_auto(path)?;
    pc.require_min_points()?;
    let pc = if pc.len() > cfg.points_per_cloud {
        pointcloud::subsample_uniform(&pc, cfg.points_per_cloud, rng)?
    } else {
        pc
    };
    pointcloud::normalize(&pc)
}

/// Scores every manifest entry with `score_fn` and computes I-AUROC.
pub fn evaluate_with<F>(root: &Path, cfg: &EvalConfig, score_fn: F) -> Result<EvalReport>
where
    F: Fn(&PointCloud, &mut ChaCha8Rng) -> Result<f64> + Sync,
{
    let entries = read_manifest(root)?;
    let clouds = entries
        .par_iter()
        .map(|e| {
            let mut rng = cloud_rng(cfg.seed, &e.file);
            let input = prepare_input(&root.join(&e.file), cfg, &mut rng)?;
            Ok(CloudScore {
                file: e.file.clone(),
                anomalous: e.anomalous,
                object_score: score_fn(&input, &mut rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labeled: Vec<LabeledScore> = clouds
        .iter()
        .map(|c| LabeledScore {
            score: c.object_score,
            label: c.anomalous,
        })
        .collect();
    Ok(EvalReport {
        auroc: auroc(&labeled)?,
        clouds,
    })
}

/// I-AUROC of `model` on the dataset at `root`, with the scorer selected by
/// `cfg.sampler.scorer`.
pub fn evaluate(model: &dyn Reconstructor, root: &Path, cfg: &EvalConfig) -> Result<EvalReport> {
    match cfg.sampler.scorer {
        Scorer::Reconstruction => evaluate_with(root, cfg, |input, rng| {
            Ok(inference::score(model, input, &cfg.sampler, rng)?.object_score)
        }),
        Scorer::TrainingSetNn => {
            let train = pointcloud::load_dir(&root.join("train"))?
                .iter()
                .map(pointcloud::normalize)
                .collect::<Result<Vec<_>>>()?;
            let scorer = TrainingSetScorer::new(&train)?;
            evaluate_with(root, cfg, |input, _| Ok(scorer.score(input, &cfg.sampler).object_score))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub steps: usize,
    pub mean_chamfer: f64,
}

/// Mean Chamfer distance between reconstructions of the clean test clouds
/// and their references under `cfg.sampler`.
pub fn mean_chamfer(model: &dyn Reconstructor, root: &Path, cfg: &EvalConfig) -> Result<f64> {
    let entries: Vec<(ManifestEntry, std::path::PathBuf)> = read_manifest(root)?
        .into_iter()
        .filter(|e| !e.anomalous)
        .filter_map(|e| synth::reference_path(root, &e).map(|r| (e, r)))
        .collect();
    if entries.is_empty() {
        return Err(Error::contract(format!("no clean test clouds with references under {}", root.display())));
    }
    let cds = entries
        .par_iter()
        .map(|(e, reference)| {
            let mut rng = cloud_rng(cfg.seed, &e.file);
            let input = prepare_input(&root.join(&e.file), cfg, &mut rng)?;
            let reference = prepare_input(reference, cfg, &mut cloud_rng(cfg.seed, &e.file))?;
            let recon = model.reconstruct(&input, &cfg.sampler, &mut rng)?;
            pointcloud::chamfer(recon.reconstruction.points(), reference.points())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(cds.iter().sum::<f64>() / cds.len() as f64)
}

/// [`mean_chamfer`] for each sampler step count, using the default noise
/// levels for that many evaluations.
pub fn chamfer_sweep(
    model: &dyn Reconstructor,
    root: &Path,
    cfg: &EvalConfig,
    step_counts: &[usize],
    t_max: f64,
) -> Result<Vec<SweepRow>> {
    step_counts
        .iter()
        .map(|&steps| {
            let cfg = EvalConfig {
                sampler: cfg.sampler.with_steps(steps, t_max),
                ..cfg.clone()
            };
            Ok(SweepRow {
                steps,
                mean_chamfer: mean_chamfer(model, root, &cfg)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", r.steps, r.mean_chamfer);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: LossVariant,
    pub auroc: f64,
}

/// Trains each loss variant from the same seed on `root/train` (outputs in
/// `out_dir/<variant>`) and evaluates it on the test split.
pub fn ablate_losses(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    root: &Path,
    eval_cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    LossVariant::ALL
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig {
                loss_variant: variant,
                ..train_cfg.clone()
            };
            log::info!("ablation: training {variant}");
            let model = training::train(model_cfg, &cfg, &root.join("train"), &out_dir.join(variant.to_string()))?;
            let report = evaluate(&model, root, eval_cfg)?;
            Ok(AblationRow {
                variant,
                auroc: report.auroc,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", r.variant, r.auroc);
    }
    out
}
