//! Flat `key = value` run configuration.
//!
//! Keys are namespaced by section (`schedule.T`, `train.batch_size`).
//! Blank lines and lines starting with `#` are skipped; unknown keys are
//! errors. [`RunConfig::canonical`] prints every resolved key in a fixed
//! order and is what `run.meta` records.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{BenchConfig, EvalConfig, SynthConfig};
use crate::inference::{default_tau, SamplerConfig};
use crate::network::ModelConfig;
use crate::patchgen::{PatchGenConfig, PatchMode, PatchSize};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_kv(text: &str, source_name: &str) -> Result<Vec<KvEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("line {}", i + 1),
            message: format!("expected `key = value`, found {line:?}"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                location: format!("line {}", i + 1),
                message: "empty key".into(),
            });
        }
        out.push(KvEntry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

/// Comma-separated list; an empty string is an empty list.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

pub(crate) fn fmt_list<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_patch_size(key: &str, value: &str) -> Result<PatchSize> {
    if value.contains('.') || value.contains('e') {
        Ok(PatchSize::Fraction(parse_value(key, value)?))
    } else {
        Ok(PatchSize::Count(parse_value(key, value)?))
    }
}

fn fmt_patch_size(p: PatchSize) -> String {
    match p {
        PatchSize::Fraction(f) => format!("{f:?}"),
        PatchSize::Count(n) => n.to_string(),
    }
}

fn parse_mode(key: &str, value: &str) -> Result<PatchMode> {
    match value {
        "bulge" => Ok(PatchMode::Bulge),
        "concavity" => Ok(PatchMode::Concavity),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}, expected bulge or concavity"))),
    }
}

fn fmt_mode(m: PatchMode) -> &'static str {
    match m {
        PatchMode::Bulge => "bulge",
        PatchMode::Concavity => "concavity",
    }
}

fn set_patchgen(cfg: &mut PatchGenConfig, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "scale" => cfg.scale = parse_value(key, value)?,
        "patch_size" => cfg.patch_size = parse_patch_size(key, value)?,
        "translation_sigma" => cfg.translation_sigma = parse_value(key, value)?,
        "mode" => cfg.mode = parse_mode(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn patchgen_lines(prefix: &str, cfg: &PatchGenConfig) -> String {
    format!(
        "{prefix}scale = {:?}\n{prefix}patch_size = {}\n{prefix}translation_sigma = {:?}\n{prefix}mode = {}\n",
        cfg.scale,
        fmt_patch_size(cfg.patch_size),
        cfg.translation_sigma,
        fmt_mode(cfg.mode)
    )
}

/// Every setting of a pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seeds data synthesis, initialization, training and evaluation.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: SynthConfig,
    pub eval_points_per_cloud: usize,
    pub sweep_steps: Vec<usize>,
    pub bench_repeats: usize,
    pub iterative_steps: usize,
    tau_set: bool,
    sampler_steps: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: train.seed,
            model: ModelConfig::default(),
            sampler: SamplerConfig {
                tau: default_tau(2, train.schedule.t_max),
                ..SamplerConfig::default()
            },
            train,
            data: SynthConfig::default(),
            eval_points_per_cloud: 500,
            sweep_steps: vec![1, 2, 3, 4, 5],
            bench_repeats: 5,
            iterative_steps: 1000,
            tau_set: false,
            sampler_steps: None,
        }
    }
}

impl RunConfig {
    /// Parses a config file body over the defaults.
    pub fn from_text(text: &str, source_name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in parse_kv(text, source_name)? {
            cfg.set(&e.key, &e.value).map_err(|err| Error::Parse {
                source_name: source_name.to_string(),
                location: format!("line {}", e.line),
                message: err.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_file(path)?, &path.display().to_string())
    }

    /// Applies one setting. Call [`RunConfig::resolve`] after the last one.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or((key, ""));
        let known = match section {
            "run" => match field {
                "seed" => {
                    self.seed = parse_value(key, value)?;
                    true
                }
                _ => false,
            },
            "model" => {
                self.model.set(key, value)?;
                true
            }
            "schedule" => {
                let s = &mut self.train.schedule;
                match field {
                    "eps" => self.model.set(key, value).map(|_| true)?,
                    "T" => {
                        s.t_max = parse_value(key, value)?;
                        true
                    }
                    "rho" => {
                        s.rho = parse_value(key, value)?;
                        true
                    }
                    "s0" => {
                        s.s0 = parse_value(key, value)?;
                        true
                    }
                    "s1" => {
                        s.s1 = parse_value(key, value)?;
                        true
                    }
                    "mu0" => {
                        s.mu0 = parse_value(key, value)?;
                        true
                    }
                    "n_k_form" => {
                        s.n_k_form = parse_value(key, value)?;
                        true
                    }
                    "lr_initial" => {
                        s.lr_initial = parse_value(key, value)?;
                        true
                    }
                    "lr_final" => {
                        s.lr_final = parse_value(key, value)?;
                        true
                    }
                    _ => false,
                }
            }
            "train" => {
                let t = &mut self.train;
                match field {
                    "steps" => t.steps = parse_value(key, value)?,
                    "batch_size" => t.batch_size = parse_value(key, value)?,
                    "points_per_cloud" => t.points_per_cloud = parse_value(key, value)?,
                    "checkpoint_every" => t.checkpoint_every = parse_value(key, value)?,
                    "loss_variant" => t.loss_variant = parse_value(key, value)?,
                    "lambda_hybrid" => t.lambda_hybrid = parse_value(key, value)?,
                    "adam_beta1" => t.adam.beta1 = parse_value(key, value)?,
                    "adam_beta2" => t.adam.beta2 = parse_value(key, value)?,
                    "adam_eps" => t.adam.eps = parse_value(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "patchgen" => set_patchgen(&mut self.train.patchgen, field, key, value)?,
            "sampler" => {
                let s = &mut self.sampler;
                match field {
                    "tau" => {
                        s.tau = parse_list(key, value)?;
                        self.tau_set = true;
                    }
                    "steps" => self.sampler_steps = Some(parse_value(key, value)?),
                    "use_target_net" => s.use_target_net = parse_bool(key, value)?,
                    "smoothing_k" => s.smoothing_k = parse_value(key, value)?,
                    "top_fraction" => s.top_fraction = parse_value(key, value)?,
                    "scorer" => s.scorer = parse_value(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "data" => {
                let d = &mut self.data;
                match field {
                    "shape" => d.shape = parse_value(key, value)?,
                    "n_train" => d.n_train = parse_value(key, value)?,
                    "n_test_clean" => d.n_test_clean = parse_value(key, value)?,
                    "n_test_anomalous" => d.n_test_anomalous = parse_value(key, value)?,
                    "points" => d.points = parse_value(key, value)?,
                    "jitter" => d.jitter = parse_value(key, value)?,
                    f => match f.strip_prefix("anomaly_") {
                        Some(rest) if set_patchgen(&mut d.anomaly, rest, key, value)? => {}
                        _ => return Err(unknown(key)),
                    },
                }
                true
            }
            "eval" => {
                match field {
                    "points_per_cloud" => self.eval_points_per_cloud = parse_value(key, value)?,
                    "sweep_steps" => self.sweep_steps = parse_list(key, value)?,
                    "bench_repeats" => self.bench_repeats = parse_value(key, value)?,
                    "iterative_steps" => self.iterative_steps = parse_value(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err(unknown(key))
        }
    }

    /// Derives dependent values and validates the whole configuration.
    /// Unless `sampler.tau` was given, the noise levels follow
    /// `sampler.steps` (default 2) starting at `schedule.T`.
    pub fn resolve(&mut self) -> Result<()> {
        self.train.seed = self.seed;
        if !self.tau_set {
            self.sampler.tau = default_tau(self.sampler_steps.unwrap_or(2), self.train.schedule.t_max);
        } else if let Some(n) = self.sampler_steps {
            if n != self.sampler.tau.len() {
                return Err(Error::Config(format!(
                    "sampler.steps = {n} disagrees with sampler.tau of length {}",
                    self.sampler.tau.len()
                )));
            }
        }
        self.tau_set = true;
        self.sampler_steps = None;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate(self.model.eps)?;
        if self.sampler.tau[0] > self.train.schedule.t_max {
            return Err(Error::Config(format!(
                "sampler.tau starts above schedule.T = {}",
                self.train.schedule.t_max
            )));
        }
        self.data.validate()?;
        if self.eval_points_per_cloud < crate::pointcloud::MIN_POINTS {
            return Err(Error::Config("eval.points_per_cloud is below the minimum cloud size".into()));
        }
        if self.sweep_steps.is_empty() || self.sweep_steps.contains(&0) {
            return Err(Error::Config("eval.sweep_steps must list positive step counts".into()));
        }
        if self.bench_repeats < 3 || self.iterative_steps == 0 {
            return Err(Error::Config("eval.bench_repeats must be >= 3 and eval.iterative_steps > 0".into()));
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            sampler: self.sampler.clone(),
            points_per_cloud: self.eval_points_per_cloud,
            seed: self.seed,
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            sampler: self.sampler.clone(),
            iterative_steps: self.iterative_steps,
            rho: self.train.schedule.rho,
            repeats: self.bench_repeats,
            seed: self.seed,
        }
    }

    /// Every key with its resolved value, one `key = value` per line in a
    /// fixed order; parsing the output reproduces the configuration.
    pub fn canonical(&self) -> String {
        let t = &self.train;
        let s = &t.schedule;
        let mut out = format!("run.seed = {}\n", self.seed);
        out += &self.model.canonical();
        out += &format!(
            "schedule.T = {:?}\nschedule.rho = {:?}\nschedule.s0 = {}\nschedule.s1 = {}\nschedule.mu0 = {:?}\nschedule.n_k_form = {}\nschedule.lr_initial = {:?}\nschedule.lr_final = {:?}\n",
            s.t_max, s.rho, s.s0, s.s1, s.mu0, s.n_k_form, s.lr_initial, s.lr_final
        );
        out += &format!(
            "train.steps = {}\ntrain.batch_size = {}\ntrain.points_per_cloud = {}\ntrain.checkpoint_every = {}\ntrain.loss_variant = {}\ntrain.lambda_hybrid = {:?}\ntrain.adam_beta1 = {:?}\ntrain.adam_beta2 = {:?}\ntrain.adam_eps = {:?}\n",
            t.steps, t.batch_size, t.points_per_cloud, t.checkpoint_every, t.loss_variant, t.lambda_hybrid, t.adam.beta1, t.adam.beta2, t.adam.eps
        );
        out += &patchgen_lines("patchgen.", &t.patchgen);
        let sm = &self.sampler;
        out += &format!(
            "sampler.tau = {}\nsampler.use_target_net = {}\nsampler.smoothing_k = {}\nsampler.top_fraction = {:?}\nsampler.scorer = {}\n",
            fmt_list(&sm.tau), sm.use_target_net, sm.smoothing_k, sm.top_fraction, sm.scorer
        );
        let d = &self.data;
        out += &format!(
            "data.shape = {}\ndata.n_train = {}\ndata.n_test_clean = {}\ndata.n_test_anomalous = {}\ndata.points = {}\ndata.jitter = {:?}\n",
            d.shape, d.n_train, d.n_test_clean, d.n_test_anomalous, d.points, d.jitter
        );
        out += &patchgen_lines("data.anomaly_", &d.anomaly);
        out += &format!(
            "eval.points_per_cloud = {}\neval.sweep_steps = {}\neval.bench_repeats = {}\neval.iterative_steps = {}\n",
            self.eval_points_per_cloud,
            fmt_list(&self.sweep_steps),
            self.bench_repeats,
            self.iterative_steps
        );
        out
    }
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key {key:?}"))
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
