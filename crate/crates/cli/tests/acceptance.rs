//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Oracles here are written independently of the library: SVD via the
//! symmetric eigendecomposition of `MᵀM`, assignment by exhaustive
//! permutation, TDOAs from an explicit range model, and so on.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3, Vector4};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;

use simtrack_core::eo_detection::{Detection2D, DetectionSource};
use simtrack_core::evaluate::Metrics;
use simtrack_core::fingerprint::{average_confidence, classify, train_templates, ClassSet, ConfidenceVector};
use simtrack_core::frames::FrameStack;
use simtrack_core::fusion_tracker::{hungarian_assign, FusionConfig, TrackStatus, Tracker};
use simtrack_core::geometry::{calibrate_extrinsics, CameraModel, PixelPoint, WorldPoint};
use simtrack_core::rf_preproc::{extract_fingerprints, FingerprintVector, RFCapture};
use simtrack_core::rpca::{
    decompose, error_update, low_rank_update, nuclear_norm, rpca_tiled, soft_threshold, sparse_update,
    spectral_norm, svt, RpcaParams,
};
use simtrack_core::simulator::fingerprint_pass;
use simtrack_core::tdoa_loc::{
    estimate_tdoa, ml_localize, ml_objective, spherical_intersection, MlParams, SensorLayout, SensorSite,
    TdoaMeasurement, DEFAULT_MIN_PEAK_QUALITY,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, || {
        format!("runtime {:.1} s exceeds {limit_s} s", elapsed.as_secs_f64())
    })
}

// ---------------------------------------------------------------------------
// 1. RPCA operators
// ---------------------------------------------------------------------------

fn shrink_oracle(x: f64, a: f64) -> f64 {
    if x > a {
        x - a
    } else if x < -a {
        x + a
    } else {
        0.0
    }
}

/// `U·diag((σ−τ)₊)·Vᵀ = M·V·diag((1 − τ/σ)₊)·Vᵀ`, with `V`, `σ²` from the
/// eigendecomposition of `MᵀM`.
fn svt_oracle(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let eig = (m.transpose() * m).symmetric_eigen();
    let n = m.ncols();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let sigma = eig.eigenvalues[i].max(0.0).sqrt();
        if sigma > tau {
            let v = eig.eigenvectors.column(i);
            w += (1.0 - tau / sigma) * v * v.transpose();
        }
    }
    m * w
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_st, mut worst_svt) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..=24), rng.random_range(1..=12));
        let m = DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let alpha = rng.random_range(0.0..0.8);
        let st = soft_threshold(&m, alpha);
        for (a, x) in st.iter().zip(m.iter()) {
            worst_st = worst_st.max((a - shrink_oracle(*x, alpha)).abs());
        }
        let s1 = spectral_norm(&m);
        let tau = rng.random_range(0.05..1.1) * s1;
        let got = svt(&m, tau).map_err(|e| e.to_string())?;
        worst_svt = worst_svt.max((got - svt_oracle(&m, tau)).amax());
    }
    check(worst_st <= 1e-9, || format!("soft_threshold deviates by {worst_st:e}"))?;
    check(worst_svt <= 1e-9, || format!("svt deviates by {worst_svt:e}"))?;
    within(start.elapsed(), 5.0)?;
    Ok(format!("max deviation soft_threshold {worst_st:.1e}, svt {worst_svt:.1e}"))
}

// ---------------------------------------------------------------------------
// 2–3. RPCA recovery and ADMM bookkeeping
// ---------------------------------------------------------------------------

/// Rank-2 smooth background, 5% ±0.5 spikes and N(0, σ²) dense noise.
fn planted(n: usize, k: usize, sigma: f64, seed: u64) -> (DMatrix<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let tau = std::f64::consts::TAU;
    let u1: Vec<f64> = (0..n).map(|i| 0.5 + 0.2 * (tau * i as f64 / n as f64).sin()).collect();
    let u2: Vec<f64> = (0..n).map(|i| 0.1 * (2.0 * tau * i as f64 / n as f64 + 0.3).cos()).collect();
    let v1: Vec<f64> = (0..k).map(|j| 1.0 + 0.1 * (tau * j as f64 / k as f64).sin()).collect();
    let v2: Vec<f64> = (0..k).map(|j| (tau * j as f64 / 30.0).cos()).collect();
    let mut support = vec![false; n * k];
    let mut x = DMatrix::from_fn(n, k, |i, j| u1[i] * v1[j] + u2[i] * v2[j]);
    for j in 0..k {
        for i in 0..n {
            if rng.random::<f64>() < 0.05 {
                support[j * n + i] = true;
                x[(i, j)] += if rng.random::<bool>() { 0.5 } else { -0.5 };
            }
            x[(i, j)] += noise.sample(&mut rng);
        }
    }
    (x, support)
}

fn f1(estimate: &DMatrix<f64>, support: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (idx, v) in estimate.iter().enumerate() {
        match (v.abs() > threshold, support[idx]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

fn stack_from_matrix(x: &DMatrix<f64>, h: usize, w: usize) -> FrameStack {
    let mut s = FrameStack::new(h, w);
    for k in 0..x.ncols() {
        s.push(x.column(k).iter().copied().collect(), k as f64).unwrap();
    }
    s
}

fn tiled_sparse(stack: &FrameStack, x: &DMatrix<f64>, grid: usize, side: usize) -> Result<DMatrix<f64>, String> {
    let tile_pixels = (side / grid) * (side / grid);
    let p = RpcaParams::with_sigma1(tile_pixels, x.ncols(), spectral_norm(x));
    let tiled = rpca_tiled(stack, grid, grid, &p).map_err(|e| e.to_string())?;
    let mut s = DMatrix::zeros(side * side, x.ncols());
    for (k, frame) in tiled.sparse_frames.iter().enumerate() {
        for r in 0..side {
            for c in 0..side {
                s[(r * side + c, k)] = frame[(r, c)];
            }
        }
    }
    Ok(s)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (x, support) = planted(400, 60, 0.005, 11);
    let params = RpcaParams::default_for(&x);
    check(params.tol == 1e-6 && params.max_iters >= 300, || format!("unexpected defaults {params:?}"))?;
    let res = decompose(&x, &params).map_err(|e| e.to_string())?;
    check(res.converged && res.iterations <= 300, || {
        format!("residual {:e} after {} iterations", res.final_residual, res.iterations)
    })?;
    let score = f1(&res.sparse, &support, 0.1);
    check(score >= 0.95, || format!("F1 {score:.4}"))?;

    let (xt, support_t) = planted(400, 60, 0.005, 21);
    let stack = stack_from_matrix(&xt, 20, 20);
    let tiled = f1(&tiled_sparse(&stack, &xt, 2, 20)?, &support_t, 0.1);
    check(tiled >= 0.9, || format!("2x2 tiled F1 {tiled:.4}"))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!("F1 {score:.4} in {} iterations, 2x2 tiled F1 {tiled:.4}", res.iterations))
}

fn low_rank_sub(l: &DMatrix<f64>, target: &DMatrix<f64>, beta: f64) -> f64 {
    nuclear_norm(l) + beta / 2.0 * (l - target).norm_squared()
}
fn sparse_sub(s: &DMatrix<f64>, target: &DMatrix<f64>, beta: f64, tau: f64) -> f64 {
    tau * s.iter().map(|v| v.abs()).sum::<f64>() + beta / 2.0 * (s - target).norm_squared()
}
fn error_sub(e: &DMatrix<f64>, target: &DMatrix<f64>, beta: f64, lambda: f64) -> f64 {
    lambda * e.norm_squared() + beta / 2.0 * (e - target).norm_squared()
}

fn criterion_3() -> Outcome {
    // β schedule and feasibility over a spread of problem sizes and seeds.
    let mut runs = 0;
    for seed in 0..8u64 {
        let (n, k) = (60 + 20 * seed as usize, 10 + 2 * seed as usize);
        let (x, _) = planted(n, k, 0.005, 100 + seed);
        let p = RpcaParams::default_for(&x);
        let res = decompose(&x, &p).map_err(|e| e.to_string())?;
        for (i, &b) in res.beta_history.iter().enumerate() {
            check(b == p.beta0 * p.rho.powi(i as i32), || format!("seed {seed}: beta[{i}] = {b}"))?;
        }
        check(res.beta == p.beta0 * p.rho.powi(res.iterations as i32), || format!("seed {seed}: final beta"))?;
        if res.converged {
            runs += 1;
            let gap = (&x - &res.low_rank - &res.sparse - &res.error).norm() / x.norm();
            check(res.final_residual <= p.tol && gap <= p.tol * (1.0 + 1e-9), || {
                format!("seed {seed}: residual {:e}, recomputed {gap:e}", res.final_residual)
            })?;
        }
    }
    check(runs > 0, || "no run converged".into())?;

    // Each block update minimizes its subproblem.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (n, k) = (20, 6);
    let x = DMatrix::from_fn(n, k, |_, _| rng.random::<f64>());
    let s0 = DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() * 0.1);
    let e0 = DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() * 0.01);
    let y0 = DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() - 0.5);
    let p = RpcaParams::default_for(&x);
    let beta = p.beta_at(3);
    let l = low_rank_update(&x, &s0, &e0, &y0, beta).map_err(|e| e.to_string())?;
    let s = sparse_update(&x, &l, &e0, &y0, beta, p.tau);
    let e = error_update(&x, &l, &s, &y0, beta, p.lambda);
    let t_l = &x - &e0 - &s0 + &y0 / beta;
    let t_s = &x - &e0 - &l + &y0 / beta;
    let t_e = &x - &l - &s + &y0 / beta;
    let (f_l, f_s, f_e) = (
        low_rank_sub(&l, &t_l, beta),
        sparse_sub(&s, &t_s, beta, p.tau),
        error_sub(&e, &t_e, beta, p.lambda),
    );
    let mut best_gain = f64::NEG_INFINITY;
    for i in 0..100 {
        let scale = 10f64.powi(-(i % 5) - 1);
        let d = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0) * scale);
        for gain in [
            f_l - low_rank_sub(&(&l + &d), &t_l, beta),
            f_s - sparse_sub(&(&s + &d), &t_s, beta, p.tau),
            f_e - error_sub(&(&e + &d), &t_e, beta, p.lambda),
        ] {
            best_gain = best_gain.max(gain);
        }
    }
    check(best_gain <= 1e-10, || format!("a perturbation improved a subproblem by {best_gain:e}"))?;
    Ok(format!(
        "beta schedule exact, {runs}/8 converged runs feasible, best perturbation gain {best_gain:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 4. TDOA estimation
// ---------------------------------------------------------------------------

const FS: f64 = 10e6;

fn signed_bin(k: usize, n: usize) -> f64 {
    (if k < n / 2 { k as f64 } else { k as f64 - n as f64 }) / n as f64
}

/// Band-limited complex noise (|f| < 0.3·fs) delayed by each entry of
/// `delays` samples through a DFT phase ramp.
fn delayed_streams(n: usize, delays: &[f64], seed: u64) -> Vec<Vec<Complex64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Normal::new(0.0, 1.0).unwrap();
    let inv = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let spectrum: Vec<Complex64> = (0..n)
        .map(|k| {
            if signed_bin(k, n).abs() < 0.3 {
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
                .map(|(k, v)| v * Complex64::from_polar(1.0, -std::f64::consts::TAU * signed_bin(k, n) * d))
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
    let g = Normal::new(0.0, (p / 10f64.powf(snr_db / 10.0) / 2.0).sqrt()).unwrap();
    for v in x {
        *v += Complex64::new(g.sample(rng), g.sample(rng));
    }
}

fn tdoa(a: &RFCapture, b: &RFCapture) -> Result<f64, String> {
    estimate_tdoa(a, b, 5e-6, DEFAULT_MIN_PEAK_QUALITY)
        .map(|m| m.delta_tau)
        .map_err(|e| e.to_string())
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    // Integer delays: circular shifts of one stream.
    let s = delayed_streams(8192, &[0.0], 1).remove(0);
    let mut worst_int = 0.0f64;
    for shift in [0i64, 1, 17, -9, 40] {
        let n = s.len() as i64;
        let b: Vec<Complex64> = (0..n).map(|i| s[(i - shift).rem_euclid(n) as usize]).collect();
        let d = tdoa(&capture(s.clone(), 1), &capture(b, 2))?;
        worst_int = worst_int.max((d * FS + shift as f64).abs());
    }
    check(worst_int <= 0.05, || format!("integer delay off by {worst_int} samples"))?;

    let mut worst_frac = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut v = delayed_streams(4096, &[0.0, 17.4], seed);
        let mut b = v.pop().unwrap();
        let mut a = v.pop().unwrap();
        add_noise(&mut a, 20.0, &mut rng);
        add_noise(&mut b, 20.0, &mut rng);
        let d = tdoa(&capture(a, 1), &capture(b, 2))?;
        worst_frac = worst_frac.max((d * FS + 17.4).abs());
    }
    check(worst_frac <= 0.2, || format!("fractional delay worst error {worst_frac} samples"))?;

    let caps: Vec<RFCapture> = delayed_streams(8192, &[0.0, 6.3, 13.9], 5)
        .into_iter()
        .zip(1..)
        .map(|(x, id)| capture(x, id))
        .collect();
    let est = |i: usize, j: usize| tdoa(&caps[i], &caps[j]);
    let mut worst_anti = 0.0f64;
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        worst_anti = worst_anti.max((est(i, j)? + est(j, i)?).abs());
    }
    let triangle = (est(0, 1)? + est(1, 2)? - est(0, 2)?).abs() * FS;
    check(worst_anti <= 1e-12, || format!("antisymmetry gap {worst_anti:e} s"))?;
    check(triangle <= 0.05, || format!("triangle gap {triangle} samples"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "integer {worst_int:.3}, fractional worst {worst_frac:.3}, triangle {triangle:.3} samples; antisymmetry {worst_anti:.0e} s"
    ))
}

// ---------------------------------------------------------------------------
// 5. Localization
// ---------------------------------------------------------------------------

const C: f64 = 299_792_458.0;

fn site(id: u32, x: f64, y: f64, z: f64) -> SensorSite {
    SensorSite { id, position: WorldPoint::new(x, y, z) }
}

/// Exact TDOAs from Euclidean ranges.
fn forward(sites: &[SensorSite], p: &WorldPoint, pairs: &[(u32, u32)]) -> Vec<TdoaMeasurement> {
    let range = |id: u32| {
        let s = sites.iter().find(|s| s.id == id).unwrap().position;
        ((s.x - p.x).powi(2) + (s.y - p.y).powi(2) + (s.z - p.z).powi(2)).sqrt()
    };
    pairs
        .iter()
        .map(|&(a, b)| TdoaMeasurement { pair: (a, b), delta_tau: (range(a) - range(b)) / C, t: 0.0, peak_quality: 10.0 })
        .collect()
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_sx = 0.0f64;
    for trial in 0..100 {
        // Five receivers around a 1 km area, heights 0–80 m. With only four,
        // both roots of the range quadratic can reproduce the TDOAs exactly.
        let sites: Vec<SensorSite> = (0..5)
            .map(|i| {
                let ang = std::f64::consts::TAU / 5.0 * i as f64 + rng.random_range(-0.3..0.3);
                let r = rng.random_range(300.0..600.0);
                site(i + 1, r * ang.cos(), r * ang.sin(), rng.random_range(0.0..80.0))
            })
            .collect();
        let layout = SensorLayout::new(sites.clone(), 1).map_err(|e| e.to_string())?;
        let p = WorldPoint::new(rng.random_range(-250.0..250.0), rng.random_range(-250.0..250.0), rng.random_range(10.0..150.0));
        let fix = spherical_intersection(&forward(&sites, &p, &[(2, 1), (3, 1), (4, 1), (5, 1)]), &layout)
            .map_err(|e| format!("trial {trial}: {e}"))?;
        worst_sx = worst_sx.max(fix.position.distance(&p));
    }
    check(worst_sx < 1e-6, || format!("spherical intersection error {worst_sx:e} m"))?;

    let sites = vec![site(101, 0.0, 150.0, 0.0), site(102, 350.0, 450.0, 0.0), site(103, -320.0, 520.0, 0.0)];
    let layout = SensorLayout::new(sites.clone(), 101).map_err(|e| e.to_string())?;
    let pairs = [(102, 101), (103, 101)];
    let pinned = MlParams { sigma_z: 0.0, ..MlParams::default() };
    let params = MlParams::default();
    let (mut worst_ml, mut grid_wins) = (0.0f64, 0);
    for trial in 0..100 {
        let alt = rng.random_range(20.0..120.0);
        let p = WorldPoint::new(rng.random_range(-200.0..250.0), rng.random_range(250.0..600.0), alt);
        let exact = forward(&sites, &p, &pairs);
        let fix = ml_localize(&exact, &layout, alt, &pinned).map_err(|e| format!("trial {trial}: {e}"))?;
        let q = fix.location.position;
        worst_ml = worst_ml.max((q.x - p.x).hypot(q.y - p.y));

        // Noisy TDOAs, free altitude: the returned point must beat every
        // node of a ±20 m grid with 10 m spacing around it.
        let noisy: Vec<TdoaMeasurement> = exact
            .iter()
            .map(|m| TdoaMeasurement { delta_tau: m.delta_tau + rng.random_range(-0.2..0.2) / FS, ..*m })
            .collect();
        let prior = alt + rng.random_range(-10.0..10.0);
        let fix = ml_localize(&noisy, &layout, prior, &params).map_err(|e| format!("trial {trial}: {e}"))?;
        let c = fix.location.position;
        let best = ml_objective(&c, &noisy, &layout, prior, &params).map_err(|e| e.to_string())?;
        let mut beaten = false;
        for i in -2..=2 {
            for j in -2..=2 {
                for k in -2..=2 {
                    let g = WorldPoint::new(c.x + 10.0 * i as f64, c.y + 10.0 * j as f64, c.z + 10.0 * k as f64);
                    let f = ml_objective(&g, &noisy, &layout, prior, &params).map_err(|e| e.to_string())?;
                    beaten |= f < best - 1e-12 * best.abs().max(1.0);
                }
            }
        }
        if !beaten {
            grid_wins += 1;
        }
    }
    check(worst_ml < 1e-4, || format!("ML horizontal error {worst_ml:e} m"))?;
    check(grid_wins == 100, || format!("ML minimum beats the grid in {grid_wins}/100 trials"))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!("SX worst {worst_sx:.1e} m, ML worst horizontal {worst_ml:.1e} m, grid {grid_wins}/100"))
}

// ---------------------------------------------------------------------------
// 6. Projection and calibration
// ---------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    // Row-vector intrinsics, R = I, T = 0: (1, 0, 100) → (1000·1/100 + 1920, 1080).
    let axis = CameraModel::new(
        CameraModel::row_intrinsic(1000.0, 1000.0, 1920.0, 1080.0),
        Matrix3::identity(),
        Vector3::zeros(),
        3840,
        2160,
    )
    .map_err(|e| e.to_string())?;
    let px = axis.project(&WorldPoint::new(1.0, 0.0, 100.0)).map_err(|e| e.to_string())?;
    check((px.u, px.v) == (1930.0, 1080.0), || format!("hand example gave ({}, {})", px.u, px.v))?;
    let px = axis.project(&WorldPoint::new(0.0, 0.0, 10.0)).map_err(|e| e.to_string())?;
    check((px.u, px.v) == (1920.0, 1080.0), || format!("optical axis gave ({}, {})", px.u, px.v))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scene = |rng: &mut ChaCha8Rng| -> Result<(CameraModel, Vec<WorldPoint>), String> {
        let pos = WorldPoint::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(1.0..10.0));
        let (az, el) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..0.3));
        let cam = CameraModel::looking_from(pos, az, el, 800.0, 1280, 720).map_err(|e| e.to_string())?;
        let mut pts = Vec::new();
        while pts.len() < 30 {
            let (d, lat, up) = (rng.random_range(20.0..300.0), rng.random_range(-0.4..0.4), rng.random_range(-0.2..0.3));
            let dir = Vector3::new((az + lat).cos() * (el + up).cos(), (az + lat).sin() * (el + up).cos(), (el + up).sin());
            let p = WorldPoint::from_vector(&(pos.to_vector() + d * dir));
            if cam.project(&p).is_ok_and(|px| px.in_frame) {
                pts.push(p);
            }
        }
        Ok((cam, pts))
    };
    let mut worst_rt = 0.0f64;
    for _ in 0..20 {
        let (cam, pts) = scene(&mut rng)?;
        let corr: Vec<(WorldPoint, PixelPoint)> = pts.iter().map(|p| (*p, cam.project(p).unwrap())).collect();
        let cal = calibrate_extrinsics(&corr, cam.intrinsic()).map_err(|e| e.to_string())?;
        worst_rt = worst_rt
            .max((cal.rotation - cam.rotation()).amax())
            .max((cal.translation - cam.translation()).amax());
    }
    check(worst_rt < 1e-6, || format!("noiseless round trip error {worst_rt:e}"))?;

    let g = Normal::new(0.0, 0.5).unwrap();
    let mut worst_mean = 0.0f64;
    for _ in 0..100 {
        let (cam, pts) = scene(&mut rng)?;
        let corr: Vec<(WorldPoint, PixelPoint)> = pts
            .iter()
            .map(|p| {
                let px = cam.project(p).unwrap();
                (*p, PixelPoint { u: px.u + g.sample(&mut rng), v: px.v + g.sample(&mut rng), in_frame: true })
            })
            .collect();
        let cal = calibrate_extrinsics(&corr, cam.intrinsic()).map_err(|e| e.to_string())?;
        worst_mean = worst_mean.max(cal.mean_reprojection_error);
    }
    check(worst_mean <= 1.0, || format!("mean reprojection error {worst_mean} px"))?;
    Ok(format!("hand examples exact, round trip {worst_rt:.1e}, worst mean reprojection {worst_mean:.3} px"))
}

// ---------------------------------------------------------------------------
// 7. Assignment
// ---------------------------------------------------------------------------

fn brute_force_min(c: &DMatrix<f64>) -> f64 {
    fn go(c: &DMatrix<f64>, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == c.nrows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.ncols() {
            if !used[j] {
                used[j] = true;
                go(c, row + 1, used, acc + c[(row, j)], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.ncols()], 0.0, &mut best);
    best
}

fn criterion_7() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = DMatrix::from_fn(7, 7, |_, _| rng.random_range(0.0..100.0));
        let a = hungarian_assign(&c, f64::INFINITY);
        check(a.pairs.len() == 7, || format!("seed {seed}: {} pairs", a.pairs.len()))?;
        let total: f64 = a.pairs.iter().map(|&(r, k)| c[(r, k)]).sum();
        let oracle = brute_force_min(&c);
        let rel = (total - oracle).abs() / oracle.max(1.0);
        worst = worst.max(rel);
        check(rel <= 1e-12, || format!("seed {seed}: {total} vs {oracle}"))?;
    }
    Ok(format!("100/100 optimal, worst relative gap {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 8. Tracking
// ---------------------------------------------------------------------------

const DT: f64 = 1.0 / 30.0;

fn eo(t: f64, u: f64, v: f64) -> Detection2D {
    Detection2D { t, u, v, area: 1, contrast: None, source: DetectionSource::EoRpca, score: 1.0, label: None }
}

fn criterion_8() -> Outcome {
    // Constant velocity, σ = 2 px measurement noise.
    let cfg = FusionConfig { r_eo: 2.0, ..FusionConfig::default() };
    let noise = Normal::new(0.0, 2.0).unwrap();
    let (mut sse, mut count) = (0.0, 0usize);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tr = Tracker::new(cfg.clone()).map_err(|e| e.to_string())?;
        let (u0, v0) = (rng.random_range(20.0..60.0), rng.random_range(20.0..60.0));
        let (du, dv) = (rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
        for k in 0..300 {
            let t = k as f64 * DT;
            let (u, v) = (u0 + du * t, v0 + dv * t);
            tr.step(DT, &[eo(t, u + noise.sample(&mut rng), v + noise.sample(&mut rng))]);
            if k >= 60 {
                let tk = tr.tracks.iter().find(|t| t.track_id == 1).ok_or(format!("seed {seed}: track 1 lost"))?;
                let p = tk.position();
                sse += (p[0] - u).powi(2) + (p[1] - v).powi(2);
                count += 1;
            }
        }
    }
    let rmse = (sse / count as f64).sqrt();
    check(rmse <= 3.0, || format!("steady-state RMSE {rmse:.3} px"))?;

    // Two targets crossing at a 40 px closest approach.
    let c = 40.0 * std::f64::consts::SQRT_2;
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut swaps = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tr = Tracker::new(FusionConfig::default()).map_err(|e| e.to_string())?;
        let mut owner = BTreeMap::<u64, usize>::new();
        let mut swapped = false;
        for k in 0..150 {
            let s = -2.5 + k as f64 * DT;
            let truth = [(120.0 + 50.0 * s, 100.0), (120.0, 100.0 + c - 50.0 * s)];
            let order = if k % 2 == 0 { [0, 1] } else { [1, 0] };
            let dets: Vec<Detection2D> = order
                .iter()
                .map(|&i| eo(s, truth[i].0 + noise.sample(&mut rng), truth[i].1 + noise.sample(&mut rng)))
                .collect();
            for a in tr.step(DT, &dets) {
                let target = order[a.detection];
                swapped |= *owner.entry(a.track_id).or_insert(target) != target;
            }
        }
        let confirmed = tr.tracks.iter().filter(|t| t.status == TrackStatus::Confirmed).count();
        if swapped || confirmed != 2 {
            swaps += 1;
        }
    }
    check(swaps == 0, || format!("identity swaps in {swaps}/100 seeds"))?;

    // NIS on a process that matches the filter's own white-acceleration model.
    let q = 10.0;
    let cfg = FusionConfig { q, ..FusionConfig::default() };
    let mut qd = Matrix4::zeros();
    for axis in 0..2 {
        let (p, v) = (axis, axis + 2);
        qd[(p, p)] = q * DT.powi(3) / 3.0;
        qd[(p, v)] = q * DT.powi(2) / 2.0;
        qd[(v, p)] = q * DT.powi(2) / 2.0;
        qd[(v, v)] = q * DT;
    }
    let l = qd.cholesky().ok_or("process covariance not positive definite")?.l();
    let mut f = Matrix4::identity();
    f[(0, 2)] = DT;
    f[(1, 3)] = DT;
    let g = Normal::new(0.0, 1.0).unwrap();
    let mut nis = Vec::new();
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vector4::new(80.0, 80.0, 5.0, -5.0);
        let mut tr = Tracker::new(cfg.clone()).map_err(|e| e.to_string())?;
        for k in 0..400 {
            let w = Vector4::from_fn(|_, _| g.sample(&mut rng));
            x = f * x + l * w;
            let z = eo(k as f64 * DT, x[0] + g.sample(&mut rng), x[1] + g.sample(&mut rng));
            for a in tr.step(DT, &[z]) {
                if k >= 100 && a.track_id == 1 {
                    nis.push(a.nis);
                }
            }
        }
    }
    let mean = nis.iter().sum::<f64>() / nis.len().max(1) as f64;
    check((1.6..=2.4).contains(&mean), || format!("NIS mean {mean:.3}"))?;
    Ok(format!("RMSE {rmse:.3} px, 0/100 swaps, NIS mean {mean:.3} over {} updates", nis.len()))
}

// ---------------------------------------------------------------------------
// 9. Fingerprint baseline
// ---------------------------------------------------------------------------

const CLASSES: [&str; 4] = ["IF1200", "Mavic", "Phantom", "m600"];

fn vectors(label: &str, passes: &[u32], dwells: usize) -> Result<Vec<FingerprintVector>, String> {
    let mut out = Vec::new();
    for &pass in passes {
        for cap in fingerprint_pass(label, pass, dwells, 77).map_err(|e| e.to_string())? {
            for mut v in extract_fingerprints(&cap).map_err(|e| e.to_string())? {
                v.device_truth = Some(label.to_string());
                out.push(v);
            }
        }
    }
    Ok(out)
}

fn criterion_9() -> Outcome {
    let mut train = Vec::new();
    for c in CLASSES {
        train.extend(vectors(c, &[0, 1, 2], 18)?);
    }
    let classes = ClassSet::new(CLASSES.iter().map(|s| s.to_string()).collect()).map_err(|e| e.to_string())?;
    let templates = train_templates(&train, &classes).map_err(|e| e.to_string())?;
    let (mut min_diag, mut max_off) = (f64::INFINITY, 0.0f64);
    for truth in CLASSES {
        // Held-out passes never used for training.
        let stream: Vec<ConfidenceVector> =
            vectors(truth, &[10, 11], 10)?.iter().map(|v| classify(v, &templates)).collect();
        let means = average_confidence(&stream).map_err(|e| e.to_string())?;
        for (label, mean) in means {
            if label == truth {
                min_diag = min_diag.min(mean);
            } else {
                max_off = max_off.max(mean);
            }
        }
    }
    check(min_diag >= 0.9 && max_off <= 0.1, || format!("diagonal min {min_diag:.4}, off-diagonal max {max_off:.4}"))?;
    Ok(format!("diagonal min {min_diag:.4}, off-diagonal max {max_off:.4}"))
}

// ---------------------------------------------------------------------------
// 10–11. End to end
// ---------------------------------------------------------------------------

const STAGES: [&str; 6] = ["simulate", "fingerprint", "detect-eo", "localize-rf", "fuse", "evaluate"];

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn simtrack(stage: &str, config: &Path, out: &Path, threads: usize) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_simtrack"))
        .args([stage, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", &threads.to_string()])
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    check(status.success(), || format!("{stage} exited with {status}"))
}

fn run_all(config: &Path, out: &Path, threads: usize) -> Result<Duration, String> {
    let start = Instant::now();
    for stage in STAGES {
        simtrack(stage, config, out, threads)?;
    }
    Ok(start.elapsed())
}

fn metrics(dir: &Path) -> Result<Metrics, String> {
    let text = fs::read_to_string(dir.join("metrics.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn files_under(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        for entry in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                pending.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.insert(rel, fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

struct EndToEnd {
    single: PathBuf,
    multi: PathBuf,
    elapsed: Duration,
}

fn criterion_10(e2e: &Result<EndToEnd, String>, work: &Path) -> Outcome {
    let e2e = e2e.as_ref().map_err(|e| e.clone())?;
    let m = metrics(&e2e.single)?;
    check(m.confirmed_tracks == 2, || format!("{} confirmed tracks", m.confirmed_tracks))?;
    let mut seen = Vec::new();
    for t in &m.tracks {
        let target = t.majority_target.clone().unwrap_or_default();
        check(t.purity >= 0.95, || format!("track {} purity {:.3}", t.track_id, t.purity))?;
        check(t.label_correct, || format!("track {} of {target} labelled {:?}", t.track_id, t.final_label))?;
        check(!t.label_overwritten, || format!("track {} label overwritten", t.track_id))?;
        check(!seen.contains(&target), || format!("two tracks on {target}"))?;
        seen.push(target);
    }
    let mut latencies = Vec::new();
    for t in &m.targets {
        let l = t.label_latency_s.ok_or(format!("{}: no label latency", t.target))?;
        check((0.0..=3.0).contains(&l), || format!("{}: label latency {l} s", t.target))?;
        latencies.push(format!("{} {l:.2} s", t.target));
    }
    within(e2e.elapsed, 300.0)?;

    // EO-only ablation on the same detections.
    let ablation = work.join("eo_only");
    fs::create_dir_all(&ablation).map_err(|e| e.to_string())?;
    for f in ["scenario.toml", "eo_truth.csv", "detections.csv", "rf_locations.csv"] {
        fs::copy(e2e.single.join(f), ablation.join(f)).map_err(|e| format!("{f}: {e}"))?;
    }
    let base = fs::read_to_string(config_path("r14.toml")).map_err(|e| e.to_string())?;
    check(base.contains("[fusion]\n"), || "r14 config has no [fusion] table".into())?;
    let cfg_path = work.join("eo_only.toml");
    fs::write(&cfg_path, base.replacen("[fusion]\n", "[fusion]\nuse_rf = false\n", 1)).map_err(|e| e.to_string())?;
    simtrack("fuse", &cfg_path, &ablation, 1)?;
    simtrack("evaluate", &cfg_path, &ablation, 1)?;
    let eo_only = metrics(&ablation)?;
    check(eo_only.confirmed_tracks > 0, || "EO-only run has no confirmed tracks".into())?;
    check(eo_only.tracks.iter().all(|t| t.final_label.is_none()), || "EO-only run produced device labels".into())?;
    Ok(format!(
        "2 tracks, purity {}, latency {}; EO-only: {} notional tracks; {:.0} s",
        m.tracks.iter().map(|t| format!("{:.3}", t.purity)).collect::<Vec<_>>().join("/"),
        latencies.join(", "),
        eo_only.confirmed_tracks,
        e2e.elapsed.as_secs_f64()
    ))
}

fn criterion_11(e2e: &Result<EndToEnd, String>) -> Outcome {
    let e2e = e2e.as_ref().map_err(|e| e.clone())?;
    let a = files_under(&e2e.single)?;
    let b = files_under(&e2e.multi)?;
    check(a.keys().eq(b.keys()), || "output file sets differ".into())?;
    for (path, bytes) in &a {
        check(b[path] == *bytes, || format!("{} differs between --threads 1 and 8", path.display()))?;
    }

    // In-process: the parallel tiled decomposition under pools of 1 and 8.
    let (x, _) = planted(400, 30, 0.005, 3);
    let stack = stack_from_matrix(&x, 20, 20);
    let run = |n: usize| -> Result<DMatrix<f64>, String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| e.to_string())?;
        pool.install(|| tiled_sparse(&stack, &x, 2, 20))
    };
    let (s1, s8) = (run(1)?, run(8)?);
    check(s1.iter().zip(s8.iter()).all(|(p, q)| p.to_bits() == q.to_bits()), || {
        "tiled RPCA differs between 1 and 8 threads".into()
    })?;
    Ok(format!("{} output files identical; tiled RPCA bit-identical", a.len()))
}

fn main() {
    // libtest flags (e.g. --nocapture) are accepted and ignored.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }

    let work = tempfile::tempdir().expect("temporary directory");
    let config = config_path("r14.toml");
    let (single, multi) = (work.path().join("threads1"), work.path().join("threads8"));
    let e2e = run_all(&config, &single, 1).and_then(|elapsed| {
        run_all(&config, &multi, 8)?;
        Ok(EndToEnd { single, multi, elapsed })
    });

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("RPCA operators", Box::new(criterion_1)),
        ("RPCA recovery", Box::new(criterion_2)),
        ("ADMM bookkeeping", Box::new(criterion_3)),
        ("TDOA estimation", Box::new(criterion_4)),
        ("localization", Box::new(criterion_5)),
        ("projection and calibration", Box::new(criterion_6)),
        ("assignment", Box::new(criterion_7)),
        ("tracking", Box::new(criterion_8)),
        ("fingerprint baseline", Box::new(criterion_9)),
        ("end-to-end r14", Box::new(|| criterion_10(&e2e, work.path()))),
        ("determinism", Box::new(|| criterion_11(&e2e))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} ({name}): {detail} [{secs:.1} s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2} ({name}): {why} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
