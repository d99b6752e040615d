//! Property-based checks of the invariants each module promises.

use ndarray::Array2;
use proptest::prelude::*;

use speechleak::dsp::{deemphasize, power_to_db, preemphasize, NUM_SAMPLES};
use speechleak::harness::{grid_from_text, grid_to_text, read_grid, write_grid, ExperimentConfig};
use speechleak::inversion::gaussian_grid;
use speechleak::model::NUM_CLASSES;
use speechleak::recon::nnls_solve;
use speechleak::{
    adam_update, cosine_similarity, db_to_power, extract_features, init_params, mse_feature, mse_waveform,
    param_gradients, restore_label, tv_norm, AdamState, AttackConfig, FeatureGrid, FeatureKind, FrontendConfig,
    InputGradient, Label, Waveform,
};

fn kind() -> impl Strategy<Value = FeatureKind> {
    prop_oneof![
        Just(FeatureKind::MelDb),
        Just(FeatureKind::MelPower),
        Just(FeatureKind::MfccCmvn)
    ]
}

fn grid_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 32 * 32)
}

fn grid(values: Vec<f64>, kind: FeatureKind) -> FeatureGrid {
    FeatureGrid::new(Array2::from_shape_vec((32, 32), values).unwrap(), kind).unwrap()
}

fn wave(samples: Vec<f64>) -> Waveform {
    Waveform::new(samples).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deemphasis_inverts_preemphasis(x in prop::collection::vec(-1.0f64..1.0, 1..4000), coeff in 0.0f64..0.99) {
        let y = deemphasize(preemphasize(&wave(x.clone()), coeff).samples(), coeff);
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn db_round_trip_above_floor(values in prop::collection::vec(1e-9f64..1e4, 1..200)) {
        let n = values.len();
        let p = Array2::from_shape_vec((1, n), values).unwrap();
        let back = db_to_power(&power_to_db(&p, 1e-10));
        for (a, b) in p.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }
    }

    #[test]
    fn feature_mse_is_a_symmetric_nonnegative_discrepancy(a in grid_values(), b in grid_values(), k in kind()) {
        let (ga, gb) = (grid(a, k), grid(b.clone(), k));
        let ab = mse_feature(&ga, &gb).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, mse_feature(&gb, &ga).unwrap());
        prop_assert_eq!(mse_feature(&ga, &ga).unwrap(), 0.0);
        prop_assert_eq!(ab == 0.0, ga == gb);
    }

    #[test]
    fn feature_mse_rejects_mixed_kinds(a in grid_values()) {
        let err = mse_feature(&grid(a.clone(), FeatureKind::MelDb), &grid(a, FeatureKind::MfccCmvn));
        prop_assert!(err.is_err());
    }

    #[test]
    fn waveform_mse_is_a_symmetric_nonnegative_discrepancy(
        a in prop::collection::vec(-1.0f64..1.0, 1..2000),
        shift in -0.5f64..0.5,
    ) {
        let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let (wa, wb) = (wave(a), wave(b));
        let ab = mse_waveform(&wa, &wb).unwrap();
        prop_assert_eq!(ab, mse_waveform(&wb, &wa).unwrap());
        prop_assert!((ab - shift * shift).abs() <= 1e-12);
        prop_assert_eq!(mse_waveform(&wa, &wa).unwrap(), 0.0);
    }

    #[test]
    fn cosine_is_bounded_symmetric_and_scale_invariant(
        pair in (1usize..64).prop_flat_map(|n| (prop::collection::vec(-10.0f64..10.0, n), prop::collection::vec(-10.0f64..10.0, n))),
        s in 0.01f64..100.0,
        t in 0.01f64..100.0,
    ) {
        let (a, b) = pair;
        prop_assume!(a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0));
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((c - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
        let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
        let tb: Vec<f64> = b.iter().map(|v| v * t).collect();
        prop_assert!((c - cosine_similarity(&sa, &tb).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tv_is_a_seminorm_blind_to_offsets(values in grid_values(), offset in -100.0f64..100.0, scale in -5.0f64..5.0) {
        let g = grid(values.clone(), FeatureKind::MelDb);
        let tv = tv_norm(&g);
        prop_assert!(tv >= 0.0);
        let shifted = grid(values.iter().map(|v| v + offset).collect(), FeatureKind::MelDb);
        prop_assert!((tv_norm(&shifted) - tv).abs() <= 1e-9 * tv.max(1.0));
        let scaled = grid(values.iter().map(|v| v * scale).collect(), FeatureKind::MelDb);
        prop_assert!((tv_norm(&scaled) - scale.abs() * tv).abs() <= 1e-9 * tv.max(1.0));
        let transposed = FeatureGrid::new(g.values().t().to_owned(), FeatureKind::MelDb).unwrap();
        prop_assert!((tv_norm(&transposed) - tv).abs() <= 1e-9 * tv.max(1.0));
    }

    #[test]
    fn grid_files_round_trip_exactly(values in grid_values(), k in kind()) {
        let g = grid(values, k);
        let mut bytes = Vec::new();
        write_grid(&mut bytes, &g).unwrap();
        prop_assert_eq!(&read_grid(bytes.as_slice()).unwrap(), &g);
        prop_assert_eq!(&grid_from_text(&grid_to_text(&g)).unwrap(), &g);
    }

    #[test]
    fn adam_first_step_moves_each_cell_by_the_learning_rate(
        g in prop::collection::vec(prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3], 32 * 32),
        lr in 1e-4f64..1.0,
    ) {
        let cfg = AttackConfig { learning_rate: lr, ..AttackConfig::default() };
        let start = FeatureGrid::zeros(FeatureKind::MelDb);
        let grad = InputGradient(Array2::from_shape_vec((32, 32), g.clone()).unwrap());
        let (_, next) = adam_update(&AdamState::new((32, 32)), &start, &grad, &cfg).unwrap();
        for (x, gi) in next.as_slice().iter().zip(&g) {
            // m̂ = g and v̂ = g², so the step is lr·g / (|g| + ε).
            let expected = -lr * gi / (gi.abs() + cfg.adam_epsilon);
            prop_assert!((x - expected).abs() <= 1e-12 * lr);
        }
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u32>(),
        iterations in 0usize..20000,
        lr in 1e-5f64..1.0,
        lambda in 0.0f64..1.0,
        trials in 1usize..5,
        n in 1usize..500,
        gl in 1usize..100,
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("iterations", &iterations.to_string()).unwrap();
        cfg.set("lr", &lr.to_string()).unwrap();
        cfg.set("lambda", &lambda.to_string()).unwrap();
        cfg.set("trials", &trials.to_string()).unwrap();
        cfg.set("n", &n.to_string()).unwrap();
        cfg.set("gl_iters", &gl.to_string()).unwrap();
        cfg.set("feature", "both").unwrap();
        let back = ExperimentConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    // Each case runs the full network once or more.
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn label_is_restored_from_any_single_sample_gradient(
        model_seed in any::<u64>(),
        grid_seed in any::<u64>(),
        scale in 0.01f64..20.0,
        label in 0usize..NUM_CLASSES,
    ) {
        let params = init_params(model_seed);
        let g = gaussian_grid(grid_seed, scale, FeatureKind::MelDb);
        let label = Label::new(label).unwrap();
        let grads = param_gradients(&params, &g, label).unwrap();
        prop_assert_eq!(restore_label(&grads), label);
        // The output-bias gradient is softmax − onehot: it sums to zero.
        prop_assert!(grads.fc2_b.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn features_are_32_by_32_and_finite_for_any_utterance(
        samples in prop::collection::vec(-1.0f64..1.0, NUM_SAMPLES),
        gain in 1e-4f64..1.0,
        k in kind(),
    ) {
        let w = wave(samples.iter().map(|v| v * gain).collect());
        let (g, stats) = extract_features(&w, &FrontendConfig::with_kind(k)).unwrap();
        prop_assert_eq!(g.dim(), (32, 32));
        prop_assert_eq!(g.kind(), k);
        prop_assert!(g.as_slice().iter().all(|v| v.is_finite()));
        prop_assert_eq!(stats.is_some(), k == FeatureKind::MfccCmvn);
        if k == FeatureKind::MelPower {
            prop_assert!(g.as_slice().iter().all(|v| *v >= 0.0));
        }
        if k == FeatureKind::MfccCmvn {
            for row in g.values().rows() {
                let mean = row.sum() / 32.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nnls_stays_feasible_and_never_increases_the_residual(
        target in prop::collection::vec(0.0f64..10.0, 32 * 8),
    ) {
        let fb = FrontendConfig::default().filterbank().unwrap();
        let m = Array2::from_shape_vec((32, 8), target).unwrap();
        let (s, residuals) = nnls_solve(&m, fb.weights(), 200).unwrap();
        prop_assert!(s.iter().all(|v| *v >= 0.0));
        prop_assert!(residuals.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }
}
