use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;
use simtrack_core::geometry::WorldPoint;
use simtrack_core::rf_preproc::RFCapture;
use simtrack_core::tdoa_loc::*;

const FS: f64 = 10e6;

/// Band-limited complex noise occupying |f| < 0.3·fs, delayed by `delays`
/// samples through an explicit DFT phase ramp. Returns one stream per delay.
fn delayed_streams(n: usize, delays: &[f64], seed: u64) -> Vec<Vec<Complex64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Normal::new(0.0, 1.0).unwrap();
    let mut planner = FftPlanner::<f64>::new();
    let inv = planner.plan_fft_inverse(n);
    let spectrum: Vec<Complex64> = (0..n)
        .map(|k| {
            let f = if k < n / 2 {
                k as f64
            } else {
                k as f64 - n as f64
            } / n as f64;
            if f.abs() < 0.3 {
                Complex64::new(g.sample(&mut rng), g.sample(&mut rng))
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    delays
        .iter()
        .map(|&d| {
            let mut s: Vec<Complex64> = spectrum
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    let f = if k < n / 2 {
                        k as f64
                    } else {
                        k as f64 - n as f64
                    } / n as f64;
                    v * Complex64::from_polar(1.0, -std::f64::consts::TAU * f * d)
                })
                .collect();
            inv.process(&mut s);
            let scale = 1.0 / (n as f64).sqrt();
            s.iter_mut().for_each(|v| *v *= scale);
            s
        })
        .collect()
}

fn capture(samples: Vec<Complex64>, id: u32) -> RFCapture {
    RFCapture::new(samples, FS, 2.4e9, 0.0, id)
}

fn add_noise(x: &mut [Complex64], snr_db: f64, rng: &mut ChaCha8Rng) {
    let p = x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64;
    let sigma = (p / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
    let g = Normal::new(0.0, sigma).unwrap();
    for v in x {
        *v += Complex64::new(g.sample(rng), g.sample(rng));
    }
}

#[test]
fn integer_delay_gives_exact_tdoa() {
    let s = delayed_streams(8192, &[0.0], 1).remove(0);
    // b is a delayed by exactly 17 samples.
    let b: Vec<Complex64> = (0..s.len())
        .map(|i| s[(i + s.len() - 17) % s.len()])
        .collect();
    let m = estimate_tdoa(
        &capture(s, 1),
        &capture(b, 2),
        5e-6,
        DEFAULT_MIN_PEAK_QUALITY,
    )
    .unwrap();
    assert_eq!(m.pair, (1, 2));
    assert!(
        (m.delta_tau - (-1.7e-6)).abs() <= 0.05 / FS,
        "{}",
        m.delta_tau
    );
    assert!(m.peak_quality >= 2.0);
}

#[test]
fn fractional_delay_monte_carlo() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut v = delayed_streams(4096, &[0.0, 17.4], seed);
        let mut b = v.pop().unwrap();
        let mut a = v.pop().unwrap();
        add_noise(&mut a, 20.0, &mut rng);
        add_noise(&mut b, 20.0, &mut rng);
        let m = estimate_tdoa(
            &capture(a, 1),
            &capture(b, 2),
            5e-6,
            DEFAULT_MIN_PEAK_QUALITY,
        )
        .unwrap();
        let err = (m.delta_tau * FS + 17.4).abs();
        worst = worst.max(err);
    }
    assert!(worst <= 0.2, "worst error {worst} samples");
}

#[test]
fn independent_noise_has_no_peak() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = Normal::new(0.0, 1.0).unwrap();
    let mut noise = || {
        (0..4096)
            .map(|_| Complex64::new(g.sample(&mut rng), g.sample(&mut rng)))
            .collect()
    };
    let err = estimate_tdoa(
        &capture(noise(), 1),
        &capture(noise(), 2),
        5e-6,
        DEFAULT_MIN_PEAK_QUALITY,
    );
    assert!(matches!(err, Err(TdoaError::NoPeak { .. })), "{err:?}");
}

#[test]
fn silent_streams_have_no_peak() {
    let z = vec![Complex64::new(0.0, 0.0); 1000];
    let err = estimate_tdoa(
        &capture(z.clone(), 1),
        &capture(z, 2),
        5e-6,
        DEFAULT_MIN_PEAK_QUALITY,
    );
    assert!(matches!(err, Err(TdoaError::NoPeak { .. })));
}

#[test]
fn clock_offsets_enter_the_estimate() {
    let s = delayed_streams(4096, &[0.0, 5.0], 3);
    let mut a = capture(s[0].clone(), 1);
    let mut b = capture(s[1].clone(), 2);
    let base = estimate_tdoa(&a, &b, 5e-6, 2.0).unwrap().delta_tau;
    // Sensor 2's clock runs 3 samples ahead of the unified timeline; the same
    // samples then describe an arrival 3 samples earlier.
    b.clock_offset = 3.0 / FS;
    let shifted = estimate_tdoa(&a, &b, 5e-6, 2.0).unwrap().delta_tau;
    assert!((shifted - (base + 3.0 / FS)).abs() < 1e-12);
    a.clock_offset = 3.0 / FS;
    let both = estimate_tdoa(&a, &b, 5e-6, 2.0).unwrap().delta_tau;
    assert!((both - base).abs() < 1e-12);
}

#[test]
fn antisymmetry_and_triangle_consistency() {
    let s = delayed_streams(8192, &[0.0, 6.3, 13.9], 5);
    let caps: Vec<RFCapture> = s
        .into_iter()
        .zip(1..)
        .map(|(x, id)| capture(x, id))
        .collect();
    let est = |i: usize, j: usize| {
        estimate_tdoa(&caps[i], &caps[j], 5e-6, 2.0)
            .unwrap()
            .delta_tau
    };
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        assert!((est(i, j) + est(j, i)).abs() <= 1e-12, "pair {i},{j}");
    }
    let gap = est(0, 1) + est(1, 2) - est(0, 2);
    assert!(gap.abs() <= 0.05 / FS, "{} samples", gap * FS);
}

#[test]
fn lag_search_is_confined() {
    let s = delayed_streams(4096, &[0.0, 40.0], 9);
    let (a, b) = (capture(s[0].clone(), 1), capture(s[1].clone(), 2));
    // True lag is 4 µs; a 2 µs window cannot contain the peak.
    match estimate_tdoa(&a, &b, 2e-6, 2.0) {
        Err(TdoaError::NoPeak { .. }) => {}
        Ok(m) => assert!(m.delta_tau.abs() <= 2e-6 + 1e-12),
        Err(e) => panic!("{e}"),
    }
    let ok = estimate_tdoa(&a, &b, 5e-6, 2.0).unwrap();
    assert!((ok.delta_tau + 4e-6).abs() < 0.05 / FS);
}

// ---------------------------------------------------------------------------
// Localization
// ---------------------------------------------------------------------------

fn site(id: u32, x: f64, y: f64, z: f64) -> SensorSite {
    SensorSite {
        id,
        position: WorldPoint::new(x, y, z),
    }
}

/// Independent forward model: arrival-time differences from ranges.
fn forward(layout: &SensorLayout, p: &WorldPoint, pairs: &[(u32, u32)]) -> Vec<TdoaMeasurement> {
    let range = |id: u32| {
        let s = layout.sensors.iter().find(|s| s.id == id).unwrap().position;
        ((s.x - p.x).powi(2) + (s.y - p.y).powi(2) + (s.z - p.z).powi(2)).sqrt()
    };
    pairs
        .iter()
        .map(|&(a, b)| TdoaMeasurement {
            pair: (a, b),
            delta_tau: (range(a) - range(b)) / 299_792_458.0,
            t: 0.0,
            peak_quality: 10.0,
        })
        .collect()
}

/// Square with alternating corner heights: symmetric about the vertical axis
/// through its centre but not coplanar.
fn tilted_square() -> SensorLayout {
    SensorLayout::new(
        vec![
            site(1, -400.0, -400.0, 0.0),
            site(2, 400.0, -400.0, 60.0),
            site(3, 400.0, 400.0, 0.0),
            site(4, -400.0, 400.0, 60.0),
        ],
        1,
    )
    .unwrap()
}

/// Four sensors spread around a surveillance area ~500 m north of a camera
/// at the origin; one sensor on a mast.
fn field_layout() -> SensorLayout {
    SensorLayout::new(
        vec![
            site(101, 0.0, 150.0, 2.0),
            site(102, 350.0, 450.0, 5.0),
            site(103, -320.0, 520.0, 3.0),
            site(105, 60.0, 850.0, 80.0),
        ],
        101,
    )
    .unwrap()
}

const REF_PAIRS_SQ: [(u32, u32); 3] = [(2, 1), (3, 1), (4, 1)];
const REF_PAIRS_FIELD: [(u32, u32); 3] = [(102, 101), (103, 101), (105, 101)];

#[test]
fn sx_target_at_centroid() {
    let layout = tilted_square();
    let p = WorldPoint::new(0.0, 0.0, 30.0);
    let fix = spherical_intersection(&forward(&layout, &p, &REF_PAIRS_SQ), &layout).unwrap();
    assert!(fix.position.distance(&p) < 1e-6, "{:?}", fix.position);
    assert_eq!(fix.method, LocalizationMethod::SphericalIntersection);
}

#[test]
fn sx_random_targets_exact() {
    let layout = field_layout();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let p = WorldPoint::new(
            rng.random_range(-250.0..300.0),
            rng.random_range(250.0..750.0),
            rng.random_range(10.0..120.0),
        );
        let fix = spherical_intersection(&forward(&layout, &p, &REF_PAIRS_FIELD), &layout).unwrap();
        assert!(
            fix.position.distance(&p) < 1e-6,
            "{p:?} -> {:?}",
            fix.position
        );
        assert!(fix.residual >= 0.0);
    }
}

#[test]
fn sx_fixed_point_round_trip() {
    let layout = field_layout();
    let p = WorldPoint::new(80.0, 430.0, 45.0);
    let first = spherical_intersection(&forward(&layout, &p, &REF_PAIRS_FIELD), &layout).unwrap();
    let again = spherical_intersection(
        &forward(&layout, &first.position, &REF_PAIRS_FIELD),
        &layout,
    )
    .unwrap();
    assert!(again.position.distance(&first.position) < 1e-9);
}

#[test]
fn sx_perturbed_monte_carlo() {
    let layout = field_layout();
    let truth = WorldPoint::new(20.0, 500.0, 40.0);
    let exact = forward(&layout, &truth, &REF_PAIRS_FIELD);
    let mut errors = Vec::new();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy: Vec<TdoaMeasurement> = exact
            .iter()
            .map(|m| TdoaMeasurement {
                delta_tau: m.delta_tau + rng.random_range(-0.2..0.2) / FS,
                ..*m
            })
            .collect();
        let err = match spherical_intersection(&noisy, &layout) {
            Ok(fix) => fix.position.distance(&truth),
            Err(_) => f64::INFINITY,
        };
        errors.push(err);
    }
    errors.sort_by(f64::total_cmp);
    assert!(errors[50] <= 50.0, "median error {} m", errors[50]);
}

#[test]
fn sx_negative_discriminant_is_no_real_root() {
    let layout = tilted_square();
    // Range differences larger than the baselines cannot be realised.
    let bogus: Vec<TdoaMeasurement> = REF_PAIRS_SQ
        .iter()
        .map(|&pair| TdoaMeasurement {
            pair,
            delta_tau: 5e-6,
            t: 0.0,
            peak_quality: 10.0,
        })
        .collect();
    assert!(matches!(
        spherical_intersection(&bogus, &layout),
        Err(TdoaError::NoRealRoot)
    ));
}

fn triad() -> SensorLayout {
    SensorLayout::new(
        vec![
            site(101, 0.0, 150.0, 0.0),
            site(102, 350.0, 450.0, 0.0),
            site(103, -320.0, 520.0, 0.0),
        ],
        101,
    )
    .unwrap()
}

const TRIAD_PAIRS: [(u32, u32); 2] = [(102, 101), (103, 101)];

#[test]
fn ml_exact_with_pinned_altitude() {
    let layout = triad();
    let params = MlParams {
        sigma_z: 0.0,
        ..MlParams::default()
    };
    for p in [
        WorldPoint::new(20.0, 400.0, 40.0),
        WorldPoint::new(-120.0, 330.0, 40.0),
    ] {
        let fix = ml_localize(&forward(&layout, &p, &TRIAD_PAIRS), &layout, 40.0, &params).unwrap();
        let dh = ((fix.location.position.x - p.x).powi(2)
            + (fix.location.position.y - p.y).powi(2))
        .sqrt();
        assert!(
            dh < 1e-4,
            "{p:?} -> {:?} ({:?})",
            fix.location.position,
            fix.status
        );
        assert_eq!(fix.location.method, LocalizationMethod::MlConstrained);
    }
}

#[test]
fn ml_equilateral_zero_tdoa_lands_on_axis() {
    let r = 300.0;
    let ang = |k: f64| (k * 120.0f64).to_radians();
    let layout = SensorLayout::new(
        (0..3)
            .map(|k| site(k + 1, r * ang(k as f64).cos(), r * ang(k as f64).sin(), 0.0))
            .collect(),
        1,
    )
    .unwrap();
    let zero: Vec<TdoaMeasurement> = [(2, 1), (3, 1)]
        .iter()
        .map(|&pair| TdoaMeasurement {
            pair,
            delta_tau: 0.0,
            t: 0.0,
            peak_quality: 10.0,
        })
        .collect();
    let fix = ml_localize(&zero, &layout, 50.0, &MlParams::default()).unwrap();
    let p = fix.location.position;
    assert!(p.x.hypot(p.y) < 1e-6, "{p:?}");
    assert!((p.z - 50.0).abs() < 1e-6);
}

#[test]
fn ml_result_beats_local_verification_grid() {
    let layout = triad();
    let params = MlParams::default();
    let truth = WorldPoint::new(60.0, 420.0, 45.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noisy: Vec<TdoaMeasurement> = forward(&layout, &truth, &TRIAD_PAIRS)
        .into_iter()
        .map(|m| TdoaMeasurement {
            delta_tau: m.delta_tau + rng.random_range(-0.2..0.2) / FS,
            ..m
        })
        .collect();
    let fix = ml_localize(&noisy, &layout, 40.0, &params).unwrap();
    let best = ml_objective(&fix.location.position, &noisy, &layout, 40.0, &params).unwrap();
    let c = fix.location.position;
    for i in -2..=2 {
        for j in -2..=2 {
            for k in -2..=2 {
                let q = WorldPoint::new(
                    c.x + 10.0 * i as f64,
                    c.y + 10.0 * j as f64,
                    c.z + 10.0 * k as f64,
                );
                let f = ml_objective(&q, &noisy, &layout, 40.0, &params).unwrap();
                assert!(best <= f + 1e-12, "{q:?}: {f} < {best}");
            }
        }
    }
}

#[test]
fn ml_translation_equivariance() {
    let base = triad();
    let truth = WorldPoint::new(-40.0, 380.0, 35.0);
    let shift = (1234.5, -678.25, 9.0);
    let moved = SensorLayout::new(
        base.sensors
            .iter()
            .map(|s| {
                site(
                    s.id,
                    s.position.x + shift.0,
                    s.position.y + shift.1,
                    s.position.z + shift.2,
                )
            })
            .collect(),
        base.reference_id,
    )
    .unwrap();
    let moved_truth = WorldPoint::new(truth.x + shift.0, truth.y + shift.1, truth.z + shift.2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise: Vec<f64> = (0..2).map(|_| rng.random_range(-0.2..0.2) / FS).collect();
    let perturb = |v: Vec<TdoaMeasurement>| -> Vec<TdoaMeasurement> {
        v.into_iter()
            .zip(&noise)
            .map(|(m, n)| TdoaMeasurement {
                delta_tau: m.delta_tau + n,
                ..m
            })
            .collect()
    };
    let params = MlParams::default();
    let a = ml_localize(
        &perturb(forward(&base, &truth, &TRIAD_PAIRS)),
        &base,
        35.0,
        &params,
    )
    .unwrap();
    let b = ml_localize(
        &perturb(forward(&moved, &moved_truth, &TRIAD_PAIRS)),
        &moved,
        35.0 + shift.2,
        &params,
    )
    .unwrap();
    let ea = a.location.position.distance(&truth);
    let eb = b.location.position.distance(&moved_truth);
    assert!((ea - eb).abs() < 1e-9, "{ea} vs {eb}");
}

#[test]
fn ml_reports_ambiguity_or_convergence() {
    let layout = triad();
    let p = WorldPoint::new(20.0, 400.0, 40.0);
    let fix = ml_localize(
        &forward(&layout, &p, &TRIAD_PAIRS),
        &layout,
        40.0,
        &MlParams::default(),
    )
    .unwrap();
    match fix.status {
        MlStatus::Converged => {}
        MlStatus::AmbiguousMinimum { alternate, .. } => assert!(alternate.distance(&p) > 1.0),
        MlStatus::NonConvergence => panic!("exact data must converge"),
    }
    assert!(
        fix.location.position.distance(&p) < 1e-3,
        "{:?}",
        fix.location.position
    );
}

#[test]
fn empty_location_table_keeps_its_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rf_locations.csv");
    write_locations(&path, &[]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.trim(), "t,x,y,z,method,residual,label");
    assert!(read_locations(&path).unwrap().is_empty());
}
