//! Consistency training with the hybrid reconstruction objective.

mod optim;
mod state;

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{consistency_on, encode_on, ConsistencyModel, ModelConfig, Which};
use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::patchgen::{self, PatchGenConfig};
use crate::pointcloud::{self, PointCloud};
use crate::schedule::{self, ScheduleConfig};

pub use optim::{ema_update, Adam, AdamConfig};
pub use state::TrainState;

pub const METRICS_HEADER: &str = "step,lr,n_k,mu_k,loss_total,loss_ct,loss_online,loss_target";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    /// `L_CT + λ (L_Online + L_Target)`
    Hybrid,
    /// `L_CT + λ L_Online`
    CtOnline,
    /// `L_CT + λ L_Target`
    CtTarget,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [LossVariant::Hybrid, LossVariant::CtOnline, LossVariant::CtTarget];
}

impl std::str::FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(LossVariant::Hybrid),
            "ct_online" => Ok(LossVariant::CtOnline),
            "ct_target" => Ok(LossVariant::CtTarget),
            other => Err(Error::Config(format!(
                "loss_variant must be hybrid, ct_online or ct_target, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossVariant::Hybrid => "hybrid",
            LossVariant::CtOnline => "ct_online",
            LossVariant::CtTarget => "ct_target",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub points_per_cloud: usize,
    /// Checkpoint every this many steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub loss_variant: LossVariant,
    pub lambda_hybrid: f64,
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    pub patchgen: PatchGenConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            steps: 5000,
            batch_size: 1,
            points_per_cloud: 500,
            checkpoint_every: 1000,
            loss_variant: LossVariant::Hybrid,
            lambda_hybrid: 1.0,
            adam: AdamConfig::default(),
            schedule: ScheduleConfig::default(),
            patchgen: PatchGenConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.points_per_cloud == 0 {
            return Err(Error::Config("train.batch_size and train.points_per_cloud must be positive".into()));
        }
        if !(self.lambda_hybrid >= 0.0) {
            return Err(Error::Config("train.lambda_hybrid must be >= 0".into()));
        }
        self.schedule.adaptive(self.steps)?;
        self.patchgen.validate()
    }
}

/// Loss components of one cloud or the mean over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ct: f64,
    pub online: f64,
    pub target: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.ct += o.ct;
        self.online += o.online;
        self.target += o.target;
    }

    fn scaled(mut self, f: f64) -> Self {
        self.total *= f;
        self.ct *= f;
        self.online *= f;
        self.target *= f;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub lambda: f64,
    pub sigma_data: f64,
}

/// Hybrid loss on the tape, given the online output `y`.
///
/// `y_target` and `x_raw` enter as constants, so the consistency term and
/// the target reconstruction term carry no gradient through the target.
/// Distances are means over points of squared 3-vector norms.
pub fn hybrid_loss_on(
    tape: &mut Tape<'_>,
    y: Var,
    y_target: &Tensor,
    x_raw: &Tensor,
    t_n: f64,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let shape = tape.value(y).shape().to_vec();
    if y_target.shape() != shape.as_slice() || x_raw.shape() != shape.as_slice() {
        return Err(Error::contract(format!(
            "loss shapes differ: y {:?}, y_target {:?}, x_raw {:?}",
            shape,
            y_target.shape(),
            x_raw.shape()
        )));
    }
    let inv_n = 1.0 / tape.value(y).rows() as f64;
    let weight = schedule::lambda_weight(t_n, cfg.sigma_data)?;

    let yt = tape.constant(y_target.clone());
    let xr = tape.constant(x_raw.clone());
    let d = tape.sub(y, yt)?;
    let ct = tape.sum_squares(d)?;
    let ct = tape.scale(ct, weight * inv_n)?;
    let d = tape.sub(y, xr)?;
    let online = tape.sum_squares(d)?;
    let online = tape.scale(online, inv_n)?;
    let d = tape.sub(yt, xr)?;
    let target = tape.sum_squares(d)?;
    let target = tape.scale(target, inv_n)?;

    let recon = match cfg.variant {
        LossVariant::Hybrid => tape.add(online, target)?,
        LossVariant::CtOnline => online,
        LossVariant::CtTarget => target,
    };
    let recon = tape.scale(recon, cfg.lambda)?;
    let total = tape.add(ct, recon)?;
    let parts = LossBreakdown {
        total: tape.value(total).item()?,
        ct: tape.value(ct).item()?,
        online: tape.value(online).item()?,
        target: tape.value(target).item()?,
    };
    Ok((total, parts))
}

/// Tensor-level evaluation of [`hybrid_loss_on`].
pub fn hybrid_loss(y: &Tensor, y_target: &Tensor, x_raw: &Tensor, t_n: f64, cfg: &LossConfig) -> Result<LossBreakdown> {
    let empty = crate::numerics::ParamSet::new();
    let mut tape = Tape::frozen(&empty);
    let yv = tape.constant(y.clone());
    Ok(hybrid_loss_on(&mut tape, yv, y_target, x_raw, t_n, cfg)?.1)
}

/// Everything the online pass of one cloud needs, with the target output
/// already evaluated.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    /// Patch-Gen output the trajectory starts from.
    pub perturbed: Tensor,
    /// Clean cloud the reconstruction terms compare against.
    pub x_raw: Tensor,
    pub x_next: Tensor,
    pub t_n: f64,
    pub t_next: f64,
    pub y_target: Tensor,
}

/// Patch-Gen, noise pair, and target evaluation for one clean cloud.
pub fn prepare_cloud<R: Rng + ?Sized>(
    model: &ConsistencyModel,
    cfg: &TrainConfig,
    clean: &PointCloud,
    n_k: u64,
    rng: &mut R,
) -> Result<PreparedCloud> {
    let perturbed = patchgen::perturb(clean, &cfg.patchgen, rng)?.cloud;
    let ts = schedule::timesteps(&cfg.schedule.karras(model.config().eps, n_k as usize)?)?;
    let n = rng.random_range(0..ts.len() - 1);
    let (t_n, t_next) = (ts[n], ts[n + 1]);

    let p0 = perturbed.to_tensor();
    let noise: Vec<f64> = (0..p0.len()).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let noise = Tensor::new(p0.shape().to_vec(), noise)?;
    let x_n = schedule::add_noise(&p0, t_n, &noise)?;
    let x_next = schedule::euler_step(&x_n, &p0, t_n, t_next)?;

    // The target shares the online latent, detached.
    let c = model.encode(Which::Online, &perturbed)?;
    let y_target = model.forward(Which::Target, &x_n, t_n, &c)?;
    Ok(PreparedCloud {
        perturbed: p0,
        x_raw: clean.to_tensor(),
        x_next,
        t_n,
        t_next,
        y_target,
    })
}

/// Online forward and loss for a prepared cloud, recorded on `tape`.
pub fn online_loss_on(
    tape: &mut Tape<'_>,
    model: &ConsistencyModel,
    loss: &LossConfig,
    prep: &PreparedCloud,
) -> Result<(Var, LossBreakdown)> {
    let p0 = tape.constant(prep.perturbed.clone());
    let c = encode_on(tape, model.arch(), p0)?;
    let x = tape.constant(prep.x_next.clone());
    let y = consistency_on(tape, model.arch(), model.config(), x, prep.t_next, c)?;
    hybrid_loss_on(tape, y, &prep.y_target, &prep.x_raw, prep.t_n, loss)
}

/// Summary of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub n_k: u64,
    pub mu_k: f64,
    pub loss: LossBreakdown,
    /// `(t_n, t_{n+1})` drawn for each cloud of the batch.
    pub pairs: Vec<(f64, f64)>,
}

impl StepReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{},{:?},{:?},{:?},{:?},{:?}",
            self.step, self.lr, self.n_k, self.mu_k, self.loss.total, self.loss.ct, self.loss.online, self.loss.target
        )
    }
}

fn loss_config(cfg: &TrainConfig, model: &ModelConfig) -> LossConfig {
    LossConfig {
        variant: cfg.loss_variant,
        lambda: cfg.lambda_hybrid,
        sigma_data: model.sigma_data,
    }
}

/// One step of the training loop over a batch of clean, normalized clouds.
///
/// Per-cloud seeds are drawn from the state stream in batch order; clouds
/// are processed in parallel and their gradients summed in batch order, so
/// the result does not depend on the thread count.
pub fn training_step(state: &mut TrainState, cfg: &TrainConfig, batch: &[PointCloud]) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let k = state.step;
    let adaptive = cfg.schedule.adaptive(cfg.steps)?;
    let n_k = adaptive.n_of_k(k.min(adaptive.total_steps))?;
    let mu_k = adaptive.mu_for_n(n_k);
    let lr = cfg.schedule.lr(cfg.steps).learning_rate(k);
    let loss_cfg = loss_config(cfg, state.model.config());

    let seeds: Vec<u64> = batch.iter().map(|_| state.rng.random()).collect();
    let model = &state.model;
    let results: Vec<Result<(Gradients, LossBreakdown, (f64, f64))>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(clean, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prep = prepare_cloud(model, cfg, clean, n_k, &mut rng)?;
            let mut tape = Tape::recording(model.params(Which::Online));
            let (loss, parts) = online_loss_on(&mut tape, model, &loss_cfg, &prep)?;
            Ok((tape.backward(loss)?, parts, (prep.t_n, prep.t_next)))
        })
        .collect();

    let mut grads = Gradients::zeros_like(model.params(Which::Online));
    let mut loss = LossBreakdown::default();
    let mut pairs = Vec::with_capacity(batch.len());
    for r in results {
        let (g, parts, pair) = r.map_err(|e| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("training step {k} (N_k = {n_k}, lr = {lr:e}): {context}"),
            },
            other => other,
        })?;
        grads.add(&g);
        loss.accumulate(&parts);
        pairs.push(pair);
    }
    let inv_b = 1.0 / batch.len() as f64;
    grads.scale(inv_b);
    let loss = loss.scaled(inv_b);
    if !loss.total.is_finite() {
        return Err(Error::NonFinite {
            context: format!("training step {k}: loss {loss:?}"),
        });
    }

    let (online, target) = state.model.split_mut();
    online.zero_grad();
    online.accumulate(&grads)?;
    state.adam.step(online, lr)?;
    ema_update(target, online, mu_k)?;
    state.step += 1;
    Ok(StepReport {
        step: k,
        lr,
        n_k,
        mu_k,
        loss,
        pairs,
    })
}

/// Draws a batch: uniform cloud choice with replacement, uniform subsample
/// to `points_per_cloud`, then normalization.
pub fn draw_batch(state: &mut TrainState, cfg: &TrainConfig, clouds: &[PointCloud]) -> Result<Vec<PointCloud>> {
    (0..cfg.batch_size)
        .map(|_| {
            let pc = &clouds[state.rng.random_range(0..clouds.len())];
            let m = cfg.points_per_cloud.min(pc.len());
            let sub = pointcloud::subsample_uniform(pc, m, &mut state.rng)?;
            pointcloud::normalize(&sub)
        })
        .collect()
}

/// Runs `cfg.steps` training steps on the clouds in `train_dir`, writing
/// `metrics.csv`, periodic `checkpoint_<step>.ckpt` plus `train_state.bin`,
/// and the final `model.ckpt` into `out_dir`.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, train_dir: &Path, out_dir: &Path) -> Result<ConsistencyModel> {
    cfg.validate()?;
    let clouds = pointcloud::load_dir(train_dir)?;
    if clouds.is_empty() {
        return Err(Error::contract(format!("no training clouds in {}", train_dir.display())));
    }
    for pc in &clouds {
        pc.require_min_points()?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = TrainState::new(model_cfg.clone(), cfg)?;
    run(&mut state, cfg, &clouds, out_dir, cfg.steps)?;
    Ok(state.model)
}

/// Continues a saved state to `cfg.steps`, appending to `metrics.csv`.
pub fn resume(cfg: &TrainConfig, state_path: &Path, train_dir: &Path, out_dir: &Path) -> Result<ConsistencyModel> {
    cfg.validate()?;
    let clouds = pointcloud::load_dir(train_dir)?;
    let mut state = TrainState::load(state_path)?;
    run(&mut state, cfg, &clouds, out_dir, cfg.steps)?;
    Ok(state.model)
}

fn run(state: &mut TrainState, cfg: &TrainConfig, clouds: &[PointCloud], out_dir: &Path, stop: u64) -> Result<()> {
    let metrics_path = out_dir.join("metrics.csv");
    let fresh = state.step == 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = std::io::BufWriter::new(file);
    let io = |e| Error::io(&metrics_path, e);
    if fresh {
        writeln!(metrics, "{METRICS_HEADER}").map_err(io)?;
    }
    while state.step < stop.min(cfg.steps) {
        let batch = draw_batch(state, cfg, clouds)?;
        let report = training_step(state, cfg, &batch)?;
        writeln!(metrics, "{}", report.csv_row()).map_err(io)?;
        if report.step % 100 == 0 {
            log::info!(
                "step {} lr {:.3e} N {} mu {:.5} loss {:.5} (ct {:.5}, online {:.5}, target {:.5})",
                report.step,
                report.lr,
                report.n_k,
                report.mu_k,
                report.loss.total,
                report.loss.ct,
                report.loss.online,
                report.loss.target
            );
        }
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
            metrics.flush().map_err(io)?;
            state.model.save(&out_dir.join(format!("checkpoint_{:06}.ckpt", state.step)))?;
            state.save(&out_dir.join("train_state.bin"))?;
        }
    }
    metrics.flush().map_err(io)?;
    state.model.save(&out_dir.join("model.ckpt"))
}
