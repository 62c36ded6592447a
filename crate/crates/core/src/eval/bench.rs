//! Latency, FLOP and working-set instrumentation of the samplers.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::inference::{self, EvalCounts, Sample, SamplerConfig};
use crate::network::{ConsistencyModel, Which};
use crate::numerics::{flops, Tensor};
use crate::pointcloud::{NeighborIndex, PointCloud};
use crate::schedule::{self, KarrasSchedule};

pub const BENCH_HEADER: &str =
    "sampler,steps,encode_s,sample_s,score_s,backbone_evals,encoder_evals,backbone_flops,encoder_flops,peak_tape_bytes";

/// Which sampling procedure a record measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Consistency,
    /// Many-step Euler integration of the probability-flow ODE, driven by
    /// the same network.
    Iterative,
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Consistency => "consistency",
            SamplerKind::Iterative => "iterative",
        })
    }
}

/// Median wall-clock seconds per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub encode: f64,
    /// Full reconstruction, encoder included.
    pub sample: f64,
    /// Nearest-neighbor scoring of a finished reconstruction.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub sampler: SamplerKind,
    pub steps: usize,
    pub median: StageTimes,
    pub counts: EvalCounts,
    pub backbone_flops: u64,
    pub encoder_flops: u64,
    /// Largest tape value storage seen during one reconstruction.
    pub peak_tape_bytes: usize,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{},{},{},{},{}",
            self.sampler,
            self.steps,
            self.median.encode,
            self.median.sample,
            self.median.score,
            self.counts.backbone,
            self.counts.encoder,
            self.backbone_flops,
            self.encoder_flops,
            self.peak_tape_bytes
        )
    }
}

/// Euler integration of `dx/dt = (x - f(x, t, c)) / t` from `T` down to
/// `eps` over a Karras grid of `steps + 1` levels: one backbone evaluation
/// per step, no re-noising.
pub fn iterative_sample<R: rand::Rng + ?Sized>(
    model: &ConsistencyModel,
    input: &PointCloud,
    steps: usize,
    t_max: f64,
    rho: f64,
    use_target_net: bool,
    rng: &mut R,
) -> Result<Sample> {
    if steps == 0 {
        return Err(Error::contract("iterative sampler needs at least one step"));
    }
    if !model.is_finite() {
        return Err(Error::NonFinite {
            context: "model parameters".into(),
        });
    }
    let which = if use_target_net { Which::Target } else { Which::Online };
    let eps = model.config().eps;
    let mut grid = schedule::timesteps(&KarrasSchedule::new(eps, t_max, rho, steps + 1)?)?;
    grid.reverse();

    let (c, encoder_flops) = flops::measure(|| model.encode(which, input));
    let c = c?;
    let x0 = input.to_tensor();
    let z = Tensor::new(
        x0.shape().to_vec(),
        (0..x0.len()).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut *rng)).collect(),
    )?;
    let mut x = schedule::add_noise(&x0, t_max, &z)?;
    let mut backbone_flops = 0;
    for w in grid.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let (den, f) = flops::measure(|| model.forward(which, &x, t, &c));
        let den = den?;
        backbone_flops += f;
        let h = (t_next - t) / t;
        for (xv, dv) in x.data_mut().iter_mut().zip(den.data()) {
            *xv += h * (*xv - dv);
        }
    }
    Ok(Sample {
        reconstruction: PointCloud::from_tensor(&x)?,
        counts: EvalCounts {
            backbone: steps,
            encoder: 1,
        },
        backbone_flops,
        encoder_flops,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub sampler: SamplerConfig,
    pub iterative_steps: usize,
    /// Karras warping of the iterative sampler's grid.
    pub rho: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            iterative_steps: 1000,
            rho: 7.0,
            repeats: 5,
            seed: 0,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `repeats` runs of one sampler on `input`. The first run is a
/// warm-up and is excluded from the medians; FLOPs, counts and the
/// working-set estimate come from it and are identical for every run.
pub fn bench(model: &ConsistencyModel, input: &PointCloud, sampler: SamplerKind, bc: &BenchConfig) -> Result<BenchRecord> {
    let BenchConfig {
        sampler: ref cfg,
        iterative_steps,
        rho,
        repeats,
        seed,
    } = *bc;
    if repeats < 3 {
        return Err(Error::contract(format!("bench needs at least 3 repeats, got {repeats}")));
    }
    let which = if cfg.use_target_net { Which::Target } else { Which::Online };
    let t_max = cfg.tau.first().copied().unwrap_or(80.0);
    let mut times = (Vec::new(), Vec::new(), Vec::new());
    let mut first: Option<(Sample, usize)> = None;
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = Instant::now();
        model.encode(which, input)?;
        let encode = start.elapsed().as_secs_f64();

        flops::reset_peak_bytes();
        let start = Instant::now();
        let s = match sampler {
            SamplerKind::Consistency => inference::sample(model, input, cfg, &mut rng)?,
            SamplerKind::Iterative => {
                iterative_sample(model, input, iterative_steps, t_max, rho, cfg.use_target_net, &mut rng)?
            }
        };
        let sample = start.elapsed().as_secs_f64();
        let peak = flops::peak_bytes();

        let start = Instant::now();
        let index = NeighborIndex::new(s.reconstruction.points());
        let scores = inference::smoothed_scores(input.points(), &index, cfg.smoothing_k);
        std::hint::black_box(inference::object_score(&scores, cfg.top_fraction));
        let score = start.elapsed().as_secs_f64();

        if r == 0 {
            first = Some((s, peak));
        } else {
            times.0.push(encode);
            times.1.push(sample);
            times.2.push(score);
        }
    }
    let (s, peak) = first.expect("repeats >= 3");
    Ok(BenchRecord {
        sampler,
        steps: s.counts.backbone,
        median: StageTimes {
            encode: median(times.0),
            sample: median(times.1),
            score: median(times.2),
        },
        counts: s.counts,
        backbone_flops: s.backbone_flops,
        encoder_flops: s.encoder_flops,
        peak_tape_bytes: peak,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    fn tiny() -> ConsistencyModel {
        let cfg = ModelConfig {
            latent_dim: 4,
            hidden: vec![8, 8, 8, 8, 8],
            encoder_hidden: vec![8, 8],
            ..ModelConfig::default()
        };
        ConsistencyModel::new(cfg, 3).unwrap()
    }

    fn cloud() -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        PointCloud::new(crate::eval::synth::sample_shape(crate::eval::Shape::Sphere, 64, 0.0, &mut rng)).unwrap()
    }

    fn run(m: &ConsistencyModel, kind: SamplerKind, sampler: SamplerConfig, repeats: usize, seed: u64) -> Result<BenchRecord> {
        let bc = BenchConfig {
            sampler,
            repeats,
            seed,
            ..BenchConfig::default()
        };
        bench(m, &cloud(), kind, &bc)
    }

    #[test]
    fn two_step_flops_double_one_step() {
        let m = tiny();
        let a = run(&m, SamplerKind::Consistency, SamplerConfig::default().with_steps(1, 80.0), 3, 1).unwrap();
        let b = run(&m, SamplerKind::Consistency, SamplerConfig::default(), 3, 1).unwrap();
        assert_eq!(b.backbone_flops, 2 * a.backbone_flops);
        assert_eq!(a.encoder_flops, b.encoder_flops);
        assert_eq!(b.counts, EvalCounts { backbone: 2, encoder: 1 });
        assert!(a.peak_tape_bytes > 0);
    }

    #[test]
    fn iterative_stub_is_500x_two_step() {
        let m = tiny();
        let two = run(&m, SamplerKind::Consistency, SamplerConfig::default(), 3, 1).unwrap();
        let it = run(&m, SamplerKind::Iterative, SamplerConfig::default(), 3, 1).unwrap();
        assert_eq!(it.counts, EvalCounts { backbone: 1000, encoder: 1 });
        assert_eq!(it.backbone_flops, 500 * two.backbone_flops);
    }

    #[test]
    fn flops_are_deterministic() {
        let m = tiny();
        let a = run(&m, SamplerKind::Consistency, SamplerConfig::default(), 3, 1).unwrap();
        let b = run(&m, SamplerKind::Consistency, SamplerConfig::default(), 4, 2).unwrap();
        assert_eq!(
            (a.backbone_flops, a.encoder_flops, a.peak_tape_bytes),
            (b.backbone_flops, b.encoder_flops, b.peak_tape_bytes)
        );
        assert!(a.median.sample > 0.0);
    }

    #[test]
    fn too_few_repeats() {
        assert!(run(&tiny(), SamplerKind::Consistency, SamplerConfig::default(), 2, 1).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
