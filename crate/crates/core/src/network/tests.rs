use super::*;
use crate::numerics::{grad_check, sample_coords};

fn small_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 8,
        hidden: vec![16, 16, 32, 16, 16],
        encoder_hidden: vec![8, 16],
        ..ModelConfig::default()
    }
}

/// Replaces every parameter with uniform noise so no path is zero.
fn randomize(ps: &mut ParamSet, rng: &mut ChaCha8Rng, scale: f64) {
    for p in ps.iter_mut() {
        for v in p.value_mut().data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect()
}

fn random_model(seed: u64) -> ConsistencyModel {
    let mut model = ConsistencyModel::new(small_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    randomize(model.params_mut(Which::Online), &mut rng, 0.4);
    let online = model.params(Which::Online).clone();
    *model.params_mut(Which::Target) = online;
    model
}

#[test]
fn scalings_at_boundary() {
    let (skip, out, cin) = scalings(0.002, 0.5, 0.002).unwrap();
    assert_eq!(skip, 1.0);
    assert_eq!(out, 0.0);
    assert!((cin - 1.0 / (0.002f64 * 0.002 + 0.25).sqrt()).abs() < 1e-15);
    assert!((cin - 1.999984).abs() < 1e-6);
    let (skip, _, cin) = scalings(1e6, 0.5, 0.002).unwrap();
    assert!(skip < 1e-12 && cin < 1e-5);
    assert!(scalings(0.001, 0.5, 0.002).is_err());
}

#[test]
fn boundary_condition_is_identity() {
    let model = random_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let x = Tensor::from_points(&random_points(&mut rng, 16));
        let c: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = model.forward(Which::Online, &x, 0.002, &c).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-9);
    }
}

#[test]
fn zero_output_layer_gives_skip_scaling() {
    let model = ConsistencyModel::new(small_config(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_points(&random_points(&mut rng, 10));
    let c = vec![0.3; 8];
    for t in [0.002, 0.1, 1.0, 80.0] {
        let (skip, _, _) = scalings(t, 0.5, 0.002).unwrap();
        let y = model.forward(Which::Online, &x, t, &c).unwrap();
        assert_eq!(y, x.map(|v| v * skip));
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let model = random_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_points(&random_points(&mut rng, 30));
    let c = vec![0.1; 8];
    let a = model.forward(Which::Online, &x, 3.0, &c).unwrap();
    let b = model.forward(Which::Online, &x, 3.0, &c).unwrap();
    assert_eq!(a.data(), b.data());
    let t = model.forward(Which::Target, &x, 3.0, &c).unwrap();
    assert_eq!(a.data(), t.data());
}

#[test]
fn encoder_is_permutation_invariant() {
    let model = random_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pts = random_points(&mut rng, 64);
    let mut rev = pts.clone();
    rev.reverse();
    let a = model.encode(Which::Online, &PointCloud::new(pts).unwrap()).unwrap();
    let b = model.encode(Which::Online, &PointCloud::new(rev).unwrap()).unwrap();
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
}

#[test]
fn encoder_sees_changes_unless_pooled_away() {
    let model = random_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pts = random_points(&mut rng, 20);
    pts[19] = pts[0];
    let base = model.encode(Which::Online, &PointCloud::new(pts.clone()).unwrap()).unwrap();

    // Swapping a duplicate for another existing point leaves the point set,
    // and therefore every channel maximum, unchanged.
    let mut same_set = pts.clone();
    same_set[19] = pts[1];
    let pooled = model.encode(Which::Online, &PointCloud::new(same_set).unwrap()).unwrap();
    assert_eq!(base, pooled);

    let mut moved = pts.clone();
    moved[19] = [5.0, -4.0, 3.0];
    let changed = model.encode(Which::Online, &PointCloud::new(moved).unwrap()).unwrap();
    assert_ne!(base, changed);
}

#[test]
fn backbone_is_permutation_equivariant() {
    let model = random_model(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts = random_points(&mut rng, 25);
    let mut rev = pts.clone();
    rev.reverse();
    let c = vec![-0.2; 8];
    let a = model.forward(Which::Online, &Tensor::from_points(&pts), 0.7, &c).unwrap();
    let b = model.forward(Which::Online, &Tensor::from_points(&rev), 0.7, &c).unwrap();
    let mut a_rev = a.to_points();
    a_rev.reverse();
    assert_eq!(a_rev, b.to_points());
}

#[test]
fn forward_gradients_match_finite_differences() {
    let mut model = random_model(12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pts = random_points(&mut rng, 8);
    let arch = model.arch().clone();
    let cfg = model.config().clone();
    let params = model.params_mut(Which::Online);
    let coords = sample_coords(params, 150, &mut rng);
    let report = grad_check(params, &coords, 1e-6, |tape| {
        let x = tape.constant(Tensor::from_points(&pts));
        let c = encode_on(tape, &arch, x)?;
        let y = consistency_on(tape, &arch, &cfg, x, 1.3, c)?;
        tape.sum_squares(y)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn non_finite_activation_names_layer() {
    let mut model = random_model(14);
    let id = model.params(Which::Online).find("backbone.2.main_w").unwrap();
    for v in model.params_mut(Which::Online).get_mut(id).value_mut().data_mut() {
        *v = f64::MAX;
    }
    let x = Tensor::from_points(&[[1.0, 1.0, 1.0]; 4]);
    let err = model.forward(Which::Online, &x, 1.0, &[1.0; 8]).unwrap_err();
    match err {
        Error::NonFinite { context } => assert!(context.contains("backbone layer 2"), "{context}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn init_is_seeded_and_target_matches_online() {
    let a = ConsistencyModel::new(small_config(), 77).unwrap();
    let b = ConsistencyModel::new(small_config(), 77).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let online = a.params(Which::Online);
    let target = a.params(Which::Target);
    assert!(online.is_congruent(target));
    for ((_, p), (_, q)) in online.iter().zip(target.iter()) {
        assert_eq!(p.value(), q.value());
    }
}

#[test]
fn default_widths() {
    let model = ConsistencyModel::new(ModelConfig::default(), 0).unwrap();
    let ps = model.params(Which::Online);
    let shape = |n: &str| ps.get(ps.find(n).unwrap()).value().shape().to_vec();
    assert_eq!(model.arch().backbone.len(), 6);
    assert_eq!(shape("backbone.0.main_w"), vec![3, 128]);
    assert_eq!(shape("backbone.2.main_w"), vec![256, 512]);
    assert_eq!(shape("backbone.5.main_w"), vec![128, 3]);
    assert_eq!(shape("backbone.0.gate_w"), vec![131, 128]);
    assert_eq!(shape("encoder.2.w"), vec![128, 128]);
    assert_eq!(shape("encoder.out.w"), vec![128, 128]);
}

mod checkpoints {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = random_model(20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = ConsistencyModel::load(&path, None).unwrap();
        let path2 = dir.path().join("m2.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"CMAD");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = random_model(21).to_bytes().unwrap();
        for cut in [0, 3, 8, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = ConsistencyModel::from_bytes(&bytes[..cut], None).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "cut {cut}: {err:?}");
        }
    }

    #[test]
    fn mismatched_latent_dim_names_parameter() {
        let bytes = random_model(22).to_bytes().unwrap();
        let other = ModelConfig {
            latent_dim: 9,
            ..small_config()
        };
        match ConsistencyModel::from_bytes(&bytes, Some(&other)).unwrap_err() {
            Error::Checkpoint(msg) => assert!(msg.contains("online/backbone.0.gate_w"), "{msg}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = random_model(23).to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            ConsistencyModel::from_bytes(&bytes, None),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn config_round_trips_through_header() {
        let cfg = small_config();
        assert_eq!(ModelConfig::from_canonical(&cfg.canonical()).unwrap(), cfg);
    }
}
