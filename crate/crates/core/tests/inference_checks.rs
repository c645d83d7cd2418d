//! Simulation-backed checks of the inference pipeline: σ̂ accuracy, the
//! influence-norm equivalences on trained models, interval monotonicity,
//! shift equivariance, and the variable-importance test under the null.

use infebm::boost::{train, TrainConfig, Variant};
use infebm::data::{bin_features, Dataset};
use infebm::experiments::{generate, SyntheticDgp};
use infebm::inference::{
    build_cache, estimate_sigma, feature_ci, feature_significance, intercept_ci, overall_ci,
    prediction_interval, OverallMode, SigmaMode,
};
use infebm::model::{fit_dataset, FitOptions};
use infebm::trees::TreeParams;
use infebm::verify::check_woodbury;

fn fig3_fit(n: usize, seed: u64, rounds: usize) -> (infebm::EnsembleModel, infebm::InferenceCache, Dataset, infebm::BinnedDataset) {
    let dgp = SyntheticDgp::fig3(1.0);
    let ds = generate(&dgp, n, seed);
    let binned = bin_features(&ds, 128);
    let mut cfg = TrainConfig::new(Variant::LeaveOneOut, rounds, seed ^ 0xF1);
    cfg.tree = Some(TreeParams {
        max_depth: 8,
        min_leaf_samples: TreeParams::default_for(n).min_leaf_samples,
    });
    let (model, acc) = train(&binned, ds.y(), cfg).unwrap();
    let sigma = estimate_sigma(&model, &binned, ds.y(), SigmaMode::InSample).unwrap();
    let cache = build_cache(&acc, &binned, sigma, model.c_e_inv, model.variant).unwrap();
    (model, cache, ds, binned)
}

#[test]
fn sigma_estimates_recover_unit_noise() {
    // y = f + N(0,1): a well-fit model's σ̂ lands in [0.85, 1.15], and the
    // out-of-bag estimate agrees with the in-sample one within 20%.
    let (model, _, ds, binned) = fig3_fit(4000, 21, 300);
    let in_sample = estimate_sigma(&model, &binned, ds.y(), SigmaMode::InSample).unwrap();
    let oob = estimate_sigma(&model, &binned, ds.y(), SigmaMode::Oob).unwrap();
    assert!((0.85..=1.15).contains(&in_sample), "in-sample σ̂ {in_sample}");
    assert!((oob - in_sample).abs() / in_sample < 0.20, "oob {oob} vs {in_sample}");
}

#[test]
fn perfect_fit_has_zero_sigma_and_zero_width() {
    // Constant response: zero residuals, zero-width intervals at the
    // point estimate.
    let n = 60;
    let col: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let ds = Dataset::from_columns(vec!["x1".into()], vec![col], vec![4.5; n]).unwrap();
    let binned = bin_features(&ds, 8);
    let cfg = TrainConfig::new(Variant::Parallel, 40, 1);
    let (model, acc) = train(&binned, ds.y(), cfg).unwrap();
    let sigma = estimate_sigma(&model, &binned, ds.y(), SigmaMode::InSample).unwrap();
    assert_eq!(sigma, 0.0);
    let cache = build_cache(&acc, &binned, sigma, model.c_e_inv, model.variant).unwrap();
    let ci = feature_ci(&model, &cache, 0, 0.5, 0.05);
    assert_eq!(ci.half_width, 0.0);
    assert_eq!(ci.lower, ci.center);
    let ici = intercept_ci(&model, &cache, 0.05);
    assert_eq!(ici.lower, 4.5);
    assert_eq!(ici.upper, 4.5);
}

#[test]
fn woodbury_equivalence_on_trained_models_both_variants() {
    for (t, variant) in [(0u64, Variant::Parallel), (1, Variant::LeaveOneOut)] {
        let dgp = SyntheticDgp::fig3(0.5);
        let ds = generate(&dgp, 150, 40 + t);
        let binned = bin_features(&ds, 12);
        let mut cfg = TrainConfig::new(variant, 60, 50 + t);
        cfg.subsample = 0.6;
        cfg.tree = Some(TreeParams {
            max_depth: 3,
            min_leaf_samples: 4,
        });
        let (model, acc) = train(&binned, ds.y(), cfg).unwrap();
        let cache = build_cache(&acc, &binned, 1.0, model.c_e_inv, model.variant).unwrap();
        let dev = check_woodbury(&cache, &binned, 6, 60 + t);
        let tol = match variant {
            Variant::LeaveOneOut => 1e-6,
            _ => 1e-8,
        };
        assert!(dev <= tol, "{variant:?}: dev {dev}");
    }
}

#[test]
fn prediction_interval_dominates_overall_ci() {
    // √(1 + ‖r‖²) ≥ √(1/n + ‖r‖²) always; conservative ≥ orthogonal too.
    let (model, cache, ds, _) = fig3_fit(500, 33, 150);
    for i in (0..20).map(|i| i * 20) {
        let x = ds.row(i);
        let ci = overall_ci(&model, &cache, &x, 0.05, OverallMode::OrthogonalSum);
        let ci_cons = overall_ci(&model, &cache, &x, 0.05, OverallMode::Conservative);
        let pi = prediction_interval(&model, &cache, None, &x, 0.05, false).unwrap();
        assert!(pi.half_width >= ci.half_width);
        assert!(ci_cons.half_width >= ci.half_width);
        assert!(ci.lower <= ci.center && ci.center <= ci.upper);
    }
}

#[test]
fn adding_a_constant_shifts_centers_not_widths() {
    let dgp = SyntheticDgp::one_dim(0.4);
    let ds = generate(&dgp, 300, 8);
    let shifted =
        Dataset::from_columns(vec!["x1".into()], vec![ds.column(0).to_vec()], ds.y().iter().map(|&v| v + 10.0).collect())
            .unwrap();
    let fit = |d: &Dataset| {
        let binned = bin_features(d, 32);
        let cfg = TrainConfig::new(Variant::Parallel, 120, 5);
        let (model, acc) = train(&binned, d.y(), cfg).unwrap();
        let sigma = estimate_sigma(&model, &binned, d.y(), SigmaMode::InSample).unwrap();
        let cache = build_cache(&acc, &binned, sigma, model.c_e_inv, model.variant).unwrap();
        (model, cache)
    };
    let (m0, c0) = fit(&ds);
    let (m1, c1) = fit(&shifted);
    assert!((m1.intercept - m0.intercept - 10.0).abs() < 1e-6);
    for &x in &[0.1, 0.5, 0.9] {
        let a = feature_ci(&m0, &c0, 0, x, 0.05);
        let b = feature_ci(&m1, &c1, 0, x, 0.05);
        assert!((a.center - b.center).abs() < 1e-6, "centers {} {}", a.center, b.center);
        assert!((a.half_width - b.half_width).abs() < 1e-8 * (1.0 + a.half_width));
        let oa = overall_ci(&m0, &c0, &[x], 0.05, OverallMode::OrthogonalSum);
        let ob = overall_ci(&m1, &c1, &[x], 0.05, OverallMode::OrthogonalSum);
        assert!((ob.center - oa.center - 10.0).abs() < 1e-6);
        assert!((ob.half_width - oa.half_width).abs() < 1e-8 * (1.0 + oa.half_width));
    }
}

#[test]
fn significance_arithmetic_and_null_feature_rate() {
    // Arithmetic: effect 1.0 over denominator 0.2 gives z = 5 and a
    // two-sided p-value near 5.7e-7 — checked in stats; here the pipeline
    // yields matching z from its parts.
    let (model, cache, _, _) = fig3_fit(800, 55, 200);
    let s = feature_significance(&model, &cache, 0, 0.25).unwrap();
    let rn = cache.r_norm(0, model.bin_of(0, 0.25));
    let expect = model.feature_effect(0, 0.25) / (cache.c_e_inv() * cache.sigma() * rn);
    assert!((s.z - expect).abs() < 1e-12);

    // Null feature: a pure-noise column rejects at the 5% level in at
    // most 10% of simulations.
    let mut rejections = 0;
    let trials = 80;
    for t in 0..trials {
        fn zero(_: f64) -> f64 {
            0.0
        }
        fn signal(x: f64) -> f64 {
            (2.0 * std::f64::consts::PI * x).sin()
        }
        let dgp = SyntheticDgp {
            name: "null",
            intercept: 0.0,
            components: vec![signal, zero],
            noise_sd: 1.0,
        };
        let ds = generate(&dgp, 800, 900 + t);
        let binned = bin_features(&ds, 64);
        let mut cfg = TrainConfig::new(Variant::LeaveOneOut, 400, 700 + t);
        cfg.tree = Some(TreeParams {
            max_depth: 8,
            min_leaf_samples: 12,
        });
        let (model, acc) = train(&binned, ds.y(), cfg).unwrap();
        let sigma = estimate_sigma(&model, &binned, ds.y(), SigmaMode::InSample).unwrap();
        let cache = build_cache(&acc, &binned, sigma, model.c_e_inv, model.variant).unwrap();
        if let Some(s) = feature_significance(&model, &cache, 1, 0.5) {
            if s.p_value < 0.05 {
                rejections += 1;
            }
        }
    }
    assert!(
        rejections as f64 <= 0.10 * trials as f64,
        "null feature rejected {rejections}/{trials}"
    );
}

#[test]
fn boundary_bins_have_wider_bands() {
    // Leaf membership is one-sided at the edges, so the influence norm at
    // the extreme bins exceeds the interior average.
    let (_model, cache, _, binned) = fig3_fit(1000, 66, 200);
    for k in 0..2 {
        let m = binned.bins(k);
        let edge = 0.5 * (cache.r_norm(k, 0) + cache.r_norm(k, m - 1));
        let interior: f64 =
            (m / 4..3 * m / 4).map(|b| cache.r_norm(k, b)).sum::<f64>() / (m / 2) as f64;
        assert!(edge > interior, "feature {k}: edge {edge} vs interior {interior}");
    }
}

#[test]
fn conformal_requires_calibration_and_scales_widths() {
    let dgp = SyntheticDgp::fig3(1.0);
    let ds = generate(&dgp, 600, 77);
    let cfg = TrainConfig::new(Variant::LeaveOneOut, 150, 3);
    let opts = FitOptions {
        max_bins: 64,
        calibration_fraction: 0.25,
        sigma_mode: SigmaMode::InSample,
    };
    let fitted = fit_dataset(&ds, cfg.clone(), &opts).unwrap();
    let x = ds.row(0);
    let plain = prediction_interval(&fitted.ensemble, &fitted.cache, None, &x, 0.05, false).unwrap();
    let conf = prediction_interval(
        &fitted.ensemble,
        &fitted.cache,
        fitted.calibration.as_ref(),
        &x,
        0.05,
        true,
    )
    .unwrap();
    assert!(conf.half_width > 0.0 && plain.half_width > 0.0);
    assert_eq!(conf.center, plain.center);

    // Without a calibration split, conformal mode errors out.
    let opts = FitOptions {
        max_bins: 64,
        calibration_fraction: 0.0,
        sigma_mode: SigmaMode::InSample,
    };
    let unfit = fit_dataset(&ds, cfg, &opts).unwrap();
    assert!(prediction_interval(&unfit.ensemble, &unfit.cache, None, &x, 0.05, true).is_err());
}
