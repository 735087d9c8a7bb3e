use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsm_core::envs::*;
use rsm_core::eval::*;
use rsm_core::model::*;

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::for_env(EnvKind::Shapes).with_hidden(16);
    c.cnn_channels = 4;
    c
}

fn dataset(kind: EnvKind, split: Split, count: usize, seed: u64) -> Dataset {
    generate_dataset(&EnvConfig::for_split(kind, split), split, count, EPISODE_LEN, seed).unwrap()
}

/// Random non-zero mechanism outputs so rollouts move.
fn perturbed(model: &mut WorldModel<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("tr.mech"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        model.store.get_mut(id).value.mapv_inplace(|v| v + rng.gen_range(-0.3f32..0.3));
    }
}

/// Index of the nearest pool row by exhaustive search, ties to the smallest index.
fn oracle_nearest(pred: &[f64], pool: &Array2<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, row) in pool.outer_iter().enumerate() {
        let d: f64 = row.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

#[test]
fn hits_at_1_basic_cases() {
    let pool = ndarray::arr2(&[[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
    assert!(hits_at_1(ndarray::arr1(&[0.1, 0.0]).view(), &pool, 0).unwrap());
    assert!(hits_at_1(ndarray::arr1(&[1.0, 0.0]).view(), &pool, 1).unwrap());
    // an exact duplicate at a smaller index wins the tie
    assert!(!hits_at_1(ndarray::arr1(&[1.0, 0.0]).view(), &pool, 2).unwrap());
    let single = ndarray::arr2(&[[5.0, -3.0]]);
    assert!(hits_at_1(ndarray::arr1(&[100.0, 100.0]).view(), &single, 0).unwrap());
    assert!(hits_at_1(ndarray::arr1(&[0.0]).view(), &pool, 0).is_err());
    assert!(hits_at_1(ndarray::arr1(&[0.0, 0.0]).view(), &pool, 3).is_err());
}

#[test]
fn perfect_predictions_score_100() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool = Array2::from_shape_fn((300, 20), |_| rng.gen_range(-1.0..1.0));
    assert_eq!(hits_at_1_rate(&pool, &pool).unwrap(), 100.0);
}

#[test]
fn chance_level_is_one_over_the_pool_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trials = 4000;
    let mut hits = 0;
    for _ in 0..trials {
        let pool = Array2::from_shape_fn((100, 8), |_| rng.gen_range(-1.0..1.0));
        let pred = Array2::from_shape_fn((1, 8), |_| rng.gen_range(-1.0..1.0));
        hits += hits_at_1(pred.row(0), &pool, rng.gen_range(0..100)).unwrap() as usize;
    }
    let expect = trials as f64 * 0.01;
    let sd = (trials as f64 * 0.01 * 0.99).sqrt();
    assert!((hits as f64 - expect).abs() <= 3.0 * sd, "{hits} hits");
}

proptest! {
    #[test]
    fn hits_agree_with_exhaustive_search(seed in any::<u64>(), rows in 1usize..40, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // a coarse lattice makes ties common
        let pool = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-2i32..3) as f64);
        let pred: Vec<f64> = (0..cols).map(|_| rng.gen_range(-2i32..3) as f64).collect();
        let nearest = oracle_nearest(&pred, &pool);
        for i in 0..rows {
            prop_assert_eq!(hits_at_1(ndarray::aview1(&pred), &pool, i).unwrap(), i == nearest);
        }
    }

    #[test]
    fn rate_is_translation_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = Array2::from_shape_fn((30, 4), |_| rng.gen_range(-1.0..1.0));
        let preds = pool.mapv(|v| v + rng.gen_range(-0.4..0.4));
        let a = hits_at_1_rate(&preds, &pool).unwrap();
        let b = hits_at_1_rate(&(preds + shift), &(pool + shift)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn a_fresh_model_is_the_identity_baseline() {
    let model = WorldModel::<f32>::new(small_config(), 3).unwrap();
    let ds = dataset(EnvKind::Shapes, Split::TestIid, 12, 4);
    let learned = eval_rollout(&model, &ds, &DEFAULT_HORIZONS, 5).unwrap();
    let identity = identity_baseline(&model, &ds, &DEFAULT_HORIZONS, 5).unwrap();
    assert_eq!(learned.hits_at_1, identity.hits_at_1);
    assert_eq!(identity.selection, "identity");
    assert_eq!(learned.horizons, vec![1, 5, 10]);
    assert_eq!(learned.episodes, 12);
}

#[test]
fn reports_are_pure_functions_of_their_inputs() {
    let mut model = WorldModel::<f32>::new(small_config(), 6).unwrap();
    perturbed(&mut model, 7);
    let ds = dataset(EnvKind::Shapes, Split::TestIid, 20, 8);
    let a = eval_rollout(&model, &ds, &DEFAULT_HORIZONS, 9).unwrap();
    let b = eval_rollout(&model, &ds, &DEFAULT_HORIZONS, 9).unwrap();
    assert_eq!(a, b);
    let r = random_mech_eval(&model, &ds, &[1, 3], 9).unwrap();
    assert_eq!(r, random_mech_eval(&model, &ds, &[1, 3], 9).unwrap());
    assert_eq!(r.selection, "random");
    assert!(a.hits_at_1.iter().chain(&r.hits_at_1).all(|v| (0.0..=100.0).contains(v)));
    // usage counts one selection per slot, step and episode
    assert_eq!(a.usage.total(), (20 * 10 * 5) as u64);
    let usage = mechanism_usage(&model, &ds, 9).unwrap();
    assert_eq!(usage, a.usage);
    let target: u64 = usage.target.iter().flatten().sum();
    assert_eq!(target, 20 * 10);
}

#[test]
fn evaluation_rejects_bad_requests() {
    let model = WorldModel::<f32>::new(small_config(), 10).unwrap();
    let ds = dataset(EnvKind::Shapes, Split::TestIid, 3, 11);
    assert!(eval_rollout(&model, &ds, &[11], 0).is_err());
    assert!(eval_rollout(&model, &ds, &[0, 1], 0).is_err());
    assert!(eval_rollout(&model, &ds, &[], 0).is_err());
    assert!(eval_rollout(&model, &ds.truncated(0), &[1], 0).is_err());

    let mut cfg = ModelConfig::for_env(EnvKind::Balls).with_hidden(8);
    cfg.transition.slots = 2;
    cfg.cnn_channels = 4;
    let balls_model = WorldModel::<f32>::new(cfg, 0).unwrap();
    let balls = dataset(EnvKind::Balls, Split::TestIid, 2, 12);
    let err = eval_rollout(&balls_model, &balls, &[1], 0).unwrap_err();
    assert!(err.to_string().contains("checkpoint has N=2 slots but the dataset has 3 balls"), "{err}");
    assert!(matches!(eval_rollout(&model, &balls, &[1], 0), Err(rsm_core::Error::ConfigMismatch(_))));
}

#[test]
fn usage_pluralities_need_a_strict_winner() {
    let mut u = MechanismUsage::new(EnvKind::Shapes, 3);
    assert_eq!(u.directions, vec!["up", "right", "down", "left"]);
    u.target[0] = vec![5, 1, 0];
    u.target[1] = vec![2, 2, 0];
    u.target[2] = vec![0, 0, 1];
    u.other[0] = vec![1, 1, 1];
    assert_eq!(u.target_pluralities(), vec![Some(0), None, Some(2), None]);
    assert_eq!(u.combined()[0], vec![6, 2, 1]);
    assert_eq!(u.total(), 14);
    assert_eq!(MechanismUsage::new(EnvKind::Balls, 7).directions, vec!["none"]);
}

#[test]
fn mean_and_standard_error() {
    assert_eq!(mean_stderr(&[50.0, 50.0, 50.0]), (50.0, 0.0));
    assert_eq!(mean_stderr(&[42.0]), (42.0, 0.0));
    let (m, s) = mean_stderr(&[1.0, 2.0, 3.0]);
    assert!((m - 2.0).abs() < 1e-15);
    assert!((s - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    assert!(mean_stderr(&[]).0.is_nan());
}

#[test]
fn aggregation_groups_by_cell() {
    let model = WorldModel::<f32>::new(small_config(), 13).unwrap();
    let ds = dataset(EnvKind::Shapes, Split::TestIid, 4, 14);
    let mut reports = Vec::new();
    for seed in 0..3 {
        let mut r = eval_rollout(&model, &ds, &[1, 5], seed).unwrap();
        r.hits_at_1 = vec![10.0 * (seed + 1) as f64, 50.0];
        reports.push(r);
    }
    let summary = aggregate(&reports);
    assert_eq!(summary.len(), 2);
    assert_eq!((summary[0].horizon, summary[0].runs, summary[0].mean), (1, 3, 20.0));
    assert_eq!((summary[1].mean, summary[1].stderr), (50.0, 0.0));
    let table = render_table(&summary);
    assert!(table.contains("H@1 1 step") && table.contains("H@1 5 steps"));
    assert!(table.contains("20.0 ± 5.8") && table.contains("50.0 ± 0.0"), "{table}");
}

#[test]
fn object_cells_recover_rendered_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..200 {
        let state = grid_init(5, GRID_SIZE, &mut rng).unwrap();
        let frame = grid_render(&state);
        let colors: Vec<[u8; 3]> = PALETTE_SPECS.iter().map(|s| s.rgb()).collect();
        assert_eq!(object_cells(&frame, &colors), state.positions);
    }
}

#[test]
fn reconstruction_export_writes_every_image() {
    let model = WorldModel::<f32>::new(small_config(), 16).unwrap();
    let decoder = Decoder::<f32>::new(
        DecoderConfig {
            model: model.config.clone(),
            hidden: 8,
        },
        17,
    )
    .unwrap();
    let ds = dataset(EnvKind::Shapes, Split::TestIid, 1, 18);
    let dir = tempfile::tempdir().unwrap();
    let files = export_reconstructions(&model, &decoder, &ds.episodes[0], &DEFAULT_HORIZONS, dir.path(), 0).unwrap();
    assert_eq!(files.len(), 1 + 3 * (2 + 5 + 5));
    for f in &files {
        let img = image::open(f).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (50, 50));
    }
    assert!(dir.path().join("h10_mech4.png").exists());
    assert!(export_reconstructions(&model, &decoder, &ds.episodes[0], &[11], dir.path(), 0).is_err());
    let rows = Array2::<f32>::from_elem((2, FRAME_BYTES), 0.5);
    let frames = frames_from_rows(&rows).unwrap();
    assert!(frames[0].pixels().iter().all(|&p| p == 128 || p == 127));
}
