//! `cmad`: the anomaly-detection pipeline as subcommands.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
//! Results go to stdout as `key=value` lines; logs go to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cmad_core::eval::{self, SamplerKind};
use cmad_core::inference::{self, IdentityReconstructor, Scorer};
use cmad_core::pointcloud::{self, Format};
use cmad_core::network::CHECKPOINT_VERSION;
use cmad_core::{training, ConsistencyModel, PointCloud, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "cmad", version, about = "Point cloud anomaly detection with consistency models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset into the output directory.
    Synth,
    /// Train a model on a dataset's training clouds.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a saved `train_state.bin`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct one cloud.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score one cloud and export its per-point heatmap.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// I-AUROC over a dataset's test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Latency, FLOPs and evaluation counts of few-step vs iterative sampling.
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// Cloud to sample; a synthetic one is drawn when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train and evaluate every loss variant.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Mean Chamfer distance per sampler step count.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train { .. } => "train",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Score { .. } => "score",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Ablate { .. } => "ablate",
            Command::Sweep { .. } => "sweep",
        }
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let mut v = Vec::new();
        match self {
            Command::Synth => {}
            Command::Train { data, resume } => {
                v.push(("data", data.as_path()));
                if let Some(r) = resume {
                    v.push(("resume", r.as_path()));
                }
            }
            Command::Reconstruct { model, input } | Command::Score { model, input } => {
                v.push(("model", model.as_path()));
                v.push(("input", input.as_path()));
            }
            Command::Eval { model, data } | Command::Sweep { model, data } => {
                v.push(("model", model.as_path()));
                v.push(("data", data.as_path()));
            }
            Command::Bench { model, input } => {
                v.push(("model", model.as_path()));
                if let Some(i) = input {
                    v.push(("input", i.as_path()));
                }
            }
            Command::Ablate { data } => v.push(("data", data.as_path())),
        }
        v
    }
}

enum Failure {
    Usage(String),
    Runtime(cmad_core::Error),
}

impl From<cmad_core::Error> for Failure {
    fn from(e: cmad_core::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn set_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("CM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("CM_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size thread pool: {e}")))
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::Usage(format!("config file {} not found", path.display())));
            }
            RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|e| Failure::Usage(format!("--set {kv}: {e}")))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.resolve().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(cmad_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn write_meta(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    std::fs::create_dir_all(&cli.out).map_err(|e| {
        Failure::Runtime(cmad_core::Error::Io {
            path: cli.out.clone(),
            source: e,
        })
    })?;
    let mut meta = format!(
        "# cmad run metadata\n# cmad_version = {}\n# checkpoint_version = {}\n# subcommand = {}\n",
        env!("CARGO_PKG_VERSION"),
        CHECKPOINT_VERSION,
        cli.command.name()
    );
    for (k, p) in cli.command.inputs() {
        meta += &format!("# input.{k} = {}\n", p.display());
    }
    meta += &cfg.canonical();
    write(&cli.out.join("run.meta"), &meta)
}

fn load_model(path: &Path) -> Result<ConsistencyModel, Failure> {
    Ok(ConsistencyModel::load(path, None)?)
}

/// Loads a cloud and brings it to the evaluation size and normalization.
fn load_input(path: &Path, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<PointCloud, Failure> {
    let pc = pointcloud::load_auto(path)?;
    pc.require_min_points()?;
    let pc = if pc.len() > cfg.eval_points_per_cloud {
        pointcloud::subsample_uniform(&pc, cfg.eval_points_per_cloud, rng)?
    } else {
        pc
    };
    Ok(pointcloud::normalize(&pc)?)
}

fn train_dir(data: &Path) -> PathBuf {
    let sub = data.join("train");
    if sub.is_dir() {
        sub
    } else {
        data.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    set_threads()?;
    let cfg = resolve_config(&cli)?;
    write_meta(&cli, &cfg)?;
    let out = &cli.out;
    match &cli.command {
        Command::Synth => {
            let digest = eval::synth_dataset(&cfg.data, cfg.seed, out)?;
            println!("dataset={}", out.display());
            println!("digest={digest}");
        }
        Command::Train { data, resume } => {
            let dir = train_dir(data);
            match resume {
                Some(state) => training::resume(&cfg.train, state, &dir, out)?,
                None => training::train(&cfg.model, &cfg.train, &dir, out)?,
            };
            println!("checkpoint={}", out.join("model.ckpt").display());
        }
        Command::Reconstruct { model, input } => {
            let model = load_model(model)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let pc = load_input(input, &cfg, &mut rng)?;
            let s = inference::sample(&model, &pc, &cfg.sampler, &mut rng)?;
            let path = out.join("reconstruction.xyz");
            pointcloud::save(&s.reconstruction, &path, Format::XyzText)?;
            println!("reconstruction={}", path.display());
            println!("backbone_evals={}", s.counts.backbone);
            println!("encoder_evals={}", s.counts.encoder);
        }
        Command::Score { model, input } => {
            let model = load_model(model)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let pc = load_input(input, &cfg, &mut rng)?;
            let report = inference::score(&model, &pc, &cfg.sampler, &mut rng)?;
            let path = out.join("heatmap.csv");
            inference::export_heatmap(&report, &path)?;
            println!("heatmap={}", path.display());
            println!("object_score={}", report.object_score);
        }
        Command::Eval { model, data } => {
            let report = if cfg.sampler.scorer == Scorer::TrainingSetNn {
                // The baseline never consults a model.
                eval::evaluate(&IdentityReconstructor, data, &cfg.eval_config())?
            } else {
                eval::evaluate(&load_model(model)?, data, &cfg.eval_config())?
            };
            write(&out.join("scores.csv"), &report.to_csv())?;
            println!("i_auroc={}", report.auroc);
        }
        Command::Bench { model, input } => {
            let model = load_model(model)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let pc = match input {
                Some(p) => load_input(p, &cfg, &mut rng)?,
                None => pointcloud::normalize(&PointCloud::new(eval::synth::sample_shape(
                    cfg.data.shape,
                    cfg.eval_points_per_cloud,
                    cfg.data.jitter,
                    &mut rng,
                ))?)?,
            };
            let bc = cfg.bench_config();
            let few = eval::bench(&model, &pc, SamplerKind::Consistency, &bc)?;
            let iterative = eval::bench(&model, &pc, SamplerKind::Iterative, &bc)?;
            let mut csv = format!("{}\n", eval::BENCH_HEADER);
            for r in [&few, &iterative] {
                csv += &r.csv_row();
                csv.push('\n');
            }
            write(&out.join("bench.csv"), &csv)?;
            println!("backbone_evals={}", few.counts.backbone);
            println!("encoder_evals={}", few.counts.encoder);
            println!("backbone_flops={}", few.backbone_flops);
            println!("iterative_backbone_flops={}", iterative.backbone_flops);
            println!("flops_ratio={}", iterative.backbone_flops as f64 / few.backbone_flops as f64);
            println!("time_ratio={}", iterative.median.sample / few.median.sample);
        }
        Command::Ablate { data } => {
            let rows = eval::ablate_losses(&cfg.model, &cfg.train, data, &cfg.eval_config(), out)?;
            write(&out.join("ablation.csv"), &eval::ablation_csv(&rows))?;
            for r in rows {
                println!("{}={}", r.variant, r.auroc);
            }
        }
        Command::Sweep { model, data } => {
            let model = load_model(model)?;
            let rows = eval::chamfer_sweep(&model, data, &cfg.eval_config(), &cfg.sweep_steps, cfg.train.schedule.t_max)?;
            write(&out.join("sweep.csv"), &eval::sweep_csv(&rows))?;
            for r in rows {
                println!("chamfer_steps_{}={}", r.steps, r.mean_chamfer);
            }
        }
    }
    Ok(())
}
