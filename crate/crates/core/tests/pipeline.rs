use apsmon::calibration::{calibrate, CalibrationModel, Hygiene, LabeledSample};
use apsmon::detector::{DetectorConfig, DetectorState};
use apsmon::metrics::{avg_set_size, largest_softmax_histogram, null_rate, Marker, MEAN_MARKER};
use apsmon::rng::derive_seed;
use apsmon::simulator::{sample, sample_segments, severity_sweep, ModelProfile, StreamSpec};

fn stream(profile: &ModelProfile, severity: u8, count: usize, seed: u64) -> Vec<LabeledSample> {
    sample(&StreamSpec {
        profile: profile.clone(),
        severity,
        count,
        seed,
    })
    .unwrap()
}

#[test]
fn coverage_holds_on_exchangeable_data() {
    let profile = ModelProfile::uncertain(10);
    for eps in [0.05, 0.1, 0.2] {
        for seed in 0..10 {
            let cal = stream(&profile, 0, 2000, derive_seed(seed, 1));
            let test = stream(&profile, 0, 5000, derive_seed(seed, 2));
            let model = calibrate(&cal, eps, seed).unwrap();
            let cov = model.empirical_coverage(&test, seed).unwrap();
            assert!(cov >= 1.0 - eps - 0.02, "eps {eps} seed {seed}: {cov}");
        }
    }
}

#[test]
fn shuffled_calibration_keeps_threshold() {
    // Scores depend on each sample's own u, so shuffling the (sample, u)
    // pairs must leave the order statistic unchanged.
    let profile = ModelProfile::uncertain(10);
    let cal = stream(&profile, 0, 999, 4);
    let model = calibrate(&cal, 0.1, 4).unwrap();
    let mut scores = model.scores_sorted().to_vec();
    scores.reverse();
    scores.rotate_left(311);
    scores.sort_by(f64::total_cmp);
    assert_eq!(scores[model.k_index() - 1], model.q_threshold());
}

#[test]
fn model_is_bit_identical_across_runs() {
    let cal = stream(&ModelProfile::intermediate(10), 0, 1500, 8);
    let a = calibrate(&cal, 0.05, 77).unwrap();
    let b = calibrate(&cal, 0.05, 77).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(CalibrationModel::from_json(&a.to_json()).unwrap(), a);
}

#[test]
fn set_size_shrinks_as_epsilon_grows() {
    for profile in [ModelProfile::uncertain(10), ModelProfile::overconfident(10)] {
        let cal = stream(&profile, 0, 2000, 1);
        for severity in [0, 3] {
            let test = stream(&profile, severity, 3000, 2);
            let sizes: Vec<f64> = [0.05, 0.1, 0.2]
                .iter()
                .map(|&e| {
                    let m = calibrate(&cal, e, 1).unwrap();
                    let probs: Vec<_> = test.iter().map(|s| &s.probs).collect();
                    avg_set_size(&m.predict_all(probs, 9).unwrap()).unwrap()
                })
                .collect();
            assert!(sizes[0] >= sizes[1] && sizes[1] >= sizes[2], "{sizes:?}");
        }
    }
}

#[test]
fn uncertain_sweep_grows_with_severity() {
    let rows = severity_sweep(&ModelProfile::uncertain(10), &[0.05], 2000, 5000, 3).unwrap();
    let s0 = rows[0].avg_set_size;
    assert!((0.9..=1.4).contains(&s0), "severity-0 size {s0}");
    assert!(rows[5].avg_set_size > 4.0 * s0);
    assert!(rows[0].coverage >= 0.95 - 0.02);
}

#[test]
fn overconfident_sweep_is_flat() {
    let rows = severity_sweep(
        &ModelProfile::overconfident(10),
        &[0.05, 0.1, 0.2],
        2000,
        5000,
        3,
    )
    .unwrap();
    for block in rows.chunks(6) {
        let base = block[0].avg_set_size;
        for r in block {
            assert!((r.avg_set_size - base).abs() <= 0.1 * base, "{r:?}");
        }
        assert!(block[0].coverage >= 1.0 - block[0].epsilon - 0.02);
    }
}

#[test]
fn peaked_stream_produces_null_sets() {
    let profile = ModelProfile::overconfident(10);
    let cal = stream(&profile, 0, 2000, 5);
    let test = stream(&profile, 0, 5000, 6);
    let model = calibrate(&cal, 0.2, 5).unwrap();
    let probs: Vec<_> = test.iter().map(|s| &s.probs).collect();
    let sets = model.predict_all(probs, 1).unwrap();
    assert!(null_rate(&sets).unwrap() > 0.0);
    assert!(avg_set_size(&sets).unwrap() < 1.0);
    assert!(model.baseline_null_rate() > 0.0);
    assert!(model.baseline_avg_size() < 1.0);
}

#[test]
fn noisy_histogram_mean_moves_left_of_threshold() {
    let profile = ModelProfile::uncertain(10);
    let cal = stream(&profile, 0, 2000, 11);
    let model = calibrate(&cal, 0.05, 11).unwrap();
    let marker = Marker::new("Q_1-0.05", model.q_threshold());

    let clean = stream(&profile, 0, 5000, 12);
    let h = largest_softmax_histogram(
        clean.iter().map(|s| &s.probs),
        50,
        std::slice::from_ref(&marker),
    )
    .unwrap();
    assert!(h.marker(MEAN_MARKER).unwrap() > model.q_threshold());

    let noisy = stream(&profile, 3, 5000, 12);
    let h = largest_softmax_histogram(noisy.iter().map(|s| &s.probs), 50, &[marker]).unwrap();
    assert_eq!(h.observations(), 5000);
    assert!(h.marker(MEAN_MARKER).unwrap() < h.marker("Q_1-0.05").unwrap());
}

#[test]
fn detector_catches_severity_switch() {
    let profile = ModelProfile::uncertain(10);
    let cal = stream(&profile, 0, 2000, 21);
    let model = calibrate(&cal, 0.1, 21).unwrap();
    let data = sample_segments(&profile, &[(0, 1000), (2, 1000)], 22).unwrap();
    let sets = model
        .predict_all(data.iter().map(|s| &s.probs), 22)
        .unwrap();

    let mut state = DetectorState::new(&model, DetectorConfig::with_window(500)).unwrap();
    let mut first = None;
    for (i, set) in sets.iter().enumerate() {
        state.update(set);
        if state.alarm() && first.is_none() {
            first = Some(i);
        }
    }
    let first = first.expect("alarm raised");
    assert!((1000..2000).contains(&first), "first alarm at {first}");
}

#[test]
fn held_out_evaluation_allows_reuse_with_warning() {
    let profile = ModelProfile::uncertain(10);
    let cal = stream(&profile, 0, 500, 1);
    let model = calibrate(&cal, 0.1, 1).unwrap();
    let e = model.evaluate(&cal, 3, Hygiene::Warn).unwrap();
    assert_eq!(e.n, 500);
    assert!(model.empirical_coverage(&cal, 3).is_err());
}
