//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion does.
//!
//! Run alone with `cargo test -p cmad-core --test acceptance -- --nocapture`.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use cmad_core::eval::{
    auroc, bench, chamfer_sweep, evaluate, synth::sample_shape, synth_dataset, LabeledScore, SamplerKind,
    Shape,
};
use cmad_core::inference::SamplerConfig;
use cmad_core::network::Which;
use cmad_core::numerics::{grad_check, sample_coords, Tensor};
use cmad_core::pointcloud::{self, chamfer, PointCloud, Point3};
use cmad_core::schedule::{self, AdaptiveSchedule, KarrasSchedule};
use cmad_core::training::{self, online_loss_on, prepare_cloud, training_step, LossConfig, TrainState};
use cmad_core::{ConsistencyModel, LossVariant, ModelConfig, RunConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sphere(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let pc = PointCloud::new(sample_shape(Shape::Sphere, n, 0.01, rng)).unwrap();
    pointcloud::normalize(&pc).unwrap()
}

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.set("run.seed", "42").unwrap();
    cfg.set("train.checkpoint_every", "0").unwrap();
    cfg.resolve().unwrap();
    cfg
}

fn boundary_condition() -> Outcome {
    let start = Instant::now();
    let model = ConsistencyModel::new(ModelConfig::default(), 1).unwrap();
    let eps = model.config().eps;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(8..64);
        let x = Tensor::new(vec![n, 3], (0..n * 3).map(|_| 3.0 * normal(&mut rng)).collect()).unwrap();
        let c: Vec<f64> = (0..model.config().latent_dim).map(|_| normal(&mut rng)).collect();
        for which in [Which::Online, Which::Target] {
            worst = worst.max(model.forward(which, &x, eps, &c).unwrap().max_abs_diff(&x));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-9 && secs < 5.0, format!("max |f(x,eps,c) - x| = {worst:.3e}, {secs:.2}s"))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cfg = desk_config();
    let mut model = ConsistencyModel::new(cfg.model.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Move the target away from the online net so every loss term is active.
    for p in model.params_mut(Which::Target).iter_mut() {
        for v in p.value_mut().data_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
    }
    let clean = sphere(8, &mut rng);
    let prep = prepare_cloud(&model, &cfg.train, &clean, 20, &mut rng).unwrap();
    let coords = sample_coords(model.params(Which::Online), 150, &mut rng);
    let frozen = model.clone();
    let lc = LossConfig { variant: LossVariant::Hybrid, lambda: cfg.train.lambda_hybrid, sigma_data: cfg.model.sigma_data };
    let report = grad_check(model.params_mut(Which::Online), &coords, 1e-6, |tape| {
        Ok(online_loss_on(tape, &frozen, &lc, &prep)?.0)
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        report.max_rel_error < 1e-4 && report.checked >= 100 && secs < 60.0,
        format!("max rel err {:.3e} over {} coords, {secs:.1}s", report.max_rel_error, report.checked),
    )
}

fn schedule_exactness() -> Outcome {
    let mut failures = Vec::new();
    for n in [2, 3, 18, 1026] {
        let ts = schedule::timesteps(&KarrasSchedule::new(0.002, 80.0, 7.0, n).unwrap()).unwrap();
        if (ts[0] - 0.002).abs() > 1e-12 || (ts[n - 1] - 80.0).abs() > 1e-12 {
            failures.push(format!("endpoints at N={n}"));
        }
    }
    let k = 5000;
    let adaptive = AdaptiveSchedule::new(2, 1025, 0.95, k).unwrap();
    let (n0, nk) = (adaptive.n_of_k(0).unwrap(), adaptive.n_of_k(k).unwrap());
    if (n0, nk) != (2, 1026) {
        failures.push(format!("N(0)={n0}, N(K)={nk}"));
    }
    for step in 0..=k {
        if adaptive.n_of_k(step).unwrap() == 2 && (adaptive.mu_of_k(step).unwrap() - 0.95).abs() > 1e-15 {
            failures.push(format!("mu at step {step}"));
            break;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x0 = Tensor::new(vec![4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let z = Tensor::new(vec![4, 3], (0..12).map(|_| normal(&mut rng)).collect()).unwrap();
        let t_n = rng.random_range(0.002..80.0);
        let t_next = rng.random_range(0.002..80.0);
        let x_n = schedule::add_noise(&x0, t_n, &z).unwrap();
        let stepped = schedule::euler_step(&x_n, &x0, t_n, t_next).unwrap();
        worst = worst.max(stepped.max_abs_diff(&schedule::add_noise(&x0, t_next, &z).unwrap()));
    }
    if worst >= 1e-9 {
        failures.push(format!("euler vs direct noising {worst:.3e}"));
    }
    outcome(failures.is_empty(), if failures.is_empty() { format!("N(0)=2, N(K)=1026, euler err {worst:.1e}") } else { failures.join("; ") })
}

fn stop_gradient_and_ema() -> Outcome {
    let cfg = desk_config();
    let train = training::TrainConfig { batch_size: 2, points_per_cloud: 64, ..cfg.train.clone() };
    let mut state = TrainState::new(cfg.model.clone(), &train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch: Vec<_> = (0..2).map(|_| sphere(64, &mut rng)).collect();
    let mut checked = 0usize;
    for _ in 0..5 {
        let before = state.model.params(Which::Target).clone();
        let report = training_step(&mut state, &train, &batch).unwrap();
        let target = state.model.params(Which::Target);
        let online = state.model.params(Which::Online);
        for ((_, t), ((_, prev), (_, o))) in target.iter().zip(before.iter().zip(online.iter())) {
            if t.grad().data().iter().any(|&g| g != 0.0) {
                return outcome(false, format!("nonzero target gradient at step {}", report.step));
            }
            for ((&a, &p), &b) in t.value().data().iter().zip(prev.value().data()).zip(o.value().data()) {
                if a.to_bits() != (report.mu_k * p + (1.0 - report.mu_k) * b).to_bits() {
                    return outcome(false, format!("EMA mismatch at step {}", report.step));
                }
                checked += 1;
            }
        }
    }
    outcome(true, format!("5 steps, {checked} target values bitwise, all target grads zero"))
}

fn brute_auroc(s: &[LabeledScore]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for p in s.iter().filter(|x| x.label) {
        for n in s.iter().filter(|x| !x.label) {
            pairs += 1.0;
            if p.score > n.score {
                wins += 1.0;
            } else if p.score == n.score {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn brute_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    let directed = |from: &[Point3], to: &[Point3]| {
        let sum: f64 = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
                        dx * dx + dy * dy + dz * dz
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        sum / from.len() as f64
    };
    directed(a, b) + directed(b, a)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let n = rng.random_range(2..60);
        let levels = rng.random_range(2..12);
        let mut s: Vec<LabeledScore> = (0..n)
            .map(|_| LabeledScore { score: rng.random_range(0..levels) as f64 * 0.25, label: rng.random_bool(0.5) })
            .collect();
        s[0].label = true;
        s[1].label = false;
        let (got, want) = (auroc(&s).unwrap(), brute_auroc(&s));
        if got != want {
            return outcome(false, format!("auroc case {case}: {got} vs {want}"));
        }
    }
    for case in 0..50 {
        let cloud = |rng: &mut ChaCha8Rng| -> Vec<Point3> {
            let n = rng.random_range(1..200);
            (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()
        };
        let (a, b) = (cloud(&mut rng), cloud(&mut rng));
        let (got, want) = (chamfer(&a, &b).unwrap(), brute_chamfer(&a, &b));
        if got != want {
            return outcome(false, format!("chamfer case {case}: {got} vs {want}"));
        }
    }
    outcome(true, "200 auroc cases and 50 chamfer pairs exact")
}

struct Desk {
    cfg: RunConfig,
    data: std::path::PathBuf,
    model: ConsistencyModel,
    auroc: f64,
}

fn desk_detection(dir: &Path) -> (Outcome, Desk) {
    let cfg = desk_config();
    let start = Instant::now();
    let data = dir.join("data");
    synth_dataset(&cfg.data, cfg.seed, &data).unwrap();
    let model = training::train(&cfg.model, &cfg.train, &data.join("train"), &dir.join("hybrid")).unwrap();
    let auroc = evaluate(&model, &data, &cfg.eval_config()).unwrap().auroc;
    let secs = start.elapsed().as_secs_f64();
    let threads = rayon::current_num_threads();
    let o = outcome(
        auroc >= 0.80 && secs < 600.0,
        format!(
            "I-AUROC {auroc:.4} over {}+{} clouds, {} steps, {secs:.0}s on {threads} thread(s)",
            cfg.data.n_test_clean, cfg.data.n_test_anomalous, cfg.train.steps
        ),
    );
    (o, Desk { cfg, data, model, auroc })
}

fn step_count_trend(desk: &Desk) -> Outcome {
    let rows = chamfer_sweep(&desk.model, &desk.data, &desk.cfg.eval_config(), &[1, 2, 5], desk.cfg.train.schedule.t_max).unwrap();
    let cd: Vec<f64> = rows.iter().map(|r| r.mean_chamfer).collect();
    outcome(
        cd[1] < cd[0] && (cd[2] - cd[1]).abs() <= 0.5 * cd[1],
        format!("CD steps 1/2/5 = {:.4}/{:.4}/{:.4}", cd[0], cd[1], cd[2]),
    )
}

fn efficiency_structure() -> Outcome {
    let cfg = desk_config();
    let model = ConsistencyModel::new(cfg.model.clone(), 9).unwrap();
    let input = sphere(128, &mut ChaCha8Rng::seed_from_u64(10));
    let mut bc = cfg.bench_config();
    bc.sampler = SamplerConfig::default().with_steps(2, cfg.train.schedule.t_max);
    bc.repeats = 3;
    let two = bench(&model, &input, SamplerKind::Consistency, &bc).unwrap();
    let iter = bench(&model, &input, SamplerKind::Iterative, &bc).unwrap();
    let flops_exact = iter.backbone_flops == 500 * two.backbone_flops;
    let time_ratio = iter.median.sample / two.median.sample;
    outcome(
        two.counts.backbone == 2 && two.counts.encoder == 1 && flops_exact && time_ratio >= 100.0,
        format!(
            "2-step: {} backbone + {} encoder evals; {}-step FLOPs ratio {}, time ratio {time_ratio:.0}",
            two.counts.backbone,
            two.counts.encoder,
            bc.iterative_steps,
            iter.backbone_flops as f64 / two.backbone_flops as f64
        ),
    )
}

fn loss_ablation(dir: &Path, desk: &Desk) -> Outcome {
    let mut rows = vec![format!("hybrid {:.4}", desk.auroc)];
    let mut pass = true;
    for variant in [LossVariant::CtOnline, LossVariant::CtTarget] {
        let train = training::TrainConfig { loss_variant: variant, ..desk.cfg.train.clone() };
        let model = training::train(&desk.cfg.model, &train, &desk.data.join("train"), &dir.join(variant.to_string())).unwrap();
        let a = evaluate(&model, &desk.data, &desk.cfg.eval_config()).unwrap().auroc;
        pass &= desk.auroc >= a - 0.02;
        rows.push(format!("{variant} {a:.4}"));
    }
    outcome(pass, rows.join(", "))
}

fn determinism(dir: &Path) -> Outcome {
    let mut cfg = desk_config();
    // Shorter training: bitwise reproducibility does not depend on the step count.
    cfg.set("train.steps", "200").unwrap();
    cfg.resolve().unwrap();
    let run = |sub: &str| {
        let root = dir.join(sub);
        let digest = synth_dataset(&cfg.data, cfg.seed, &root.join("data")).unwrap();
        training::train(&cfg.model, &cfg.train, &root.join("data/train"), &root.join("run")).unwrap();
        let model = ConsistencyModel::load(&root.join("run/model.ckpt"), Some(&cfg.model)).unwrap();
        let auroc = evaluate(&model, &root.join("data"), &cfg.eval_config()).unwrap().auroc;
        (digest, std::fs::read(root.join("run/model.ckpt")).unwrap(), auroc)
    };
    let (a, b) = (run("a"), run("b"));
    outcome(
        a.0 == b.0 && a.1 == b.1 && a.2.to_bits() == b.2.to_bits(),
        format!("dataset digest, {}-byte checkpoint and AUROC {:.4} identical", a.1.len(), a.2),
    )
}

/// Mean online reconstruction loss over the first and last 100 logged steps.
fn recon_loss_trend(metrics: &Path) -> (f64, f64) {
    let text = std::fs::read_to_string(metrics).unwrap();
    let mut lines = text.lines();
    let col = lines.next().unwrap().split(',').position(|h| h == "loss_online").unwrap();
    let online: Vec<f64> = lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&online[..100]), mean(&online[online.len() - 100..]))
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "boundary condition", boundary_condition()),
        (2, "gradient fidelity", gradient_fidelity()),
        (3, "schedule exactness", schedule_exactness()),
        (4, "stop-gradient and EMA", stop_gradient_and_ema()),
        (5, "oracle equivalence", oracle_equivalence()),
    ];
    let (o, desk) = desk_detection(dir.path());
    let (first, last) = recon_loss_trend(&dir.path().join("hybrid/metrics.csv"));
    println!("desk training: mean online reconstruction loss first 100 steps {first:.4}, last 100 {last:.4}");
    results.push((6, "desk-scale detection", o));
    results.push((7, "step-count trend", step_count_trend(&desk)));
    results.push((8, "efficiency structure", efficiency_structure()));
    results.push((9, "loss-ablation direction", loss_ablation(dir.path(), &desk)));
    results.push((10, "determinism", determinism(dir.path())));

    for (i, name, o) in &results {
        println!("criterion {i:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(
        failed.is_empty() && last < first,
        "failed criteria: {failed:?}; desk reconstruction loss decreased: {}",
        last < first
    );
}
