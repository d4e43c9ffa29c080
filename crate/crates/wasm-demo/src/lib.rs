//! Browser bindings for three pieces of the pipeline: background
//! subtraction on a synthetic clip, TDOA localization of a placed emitter,
//! and gated assignment.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use simtrack_core::eo_detection::{detect_frames, MaskParams};
use simtrack_core::frames::FrameStack;
use simtrack_core::fusion_tracker::hungarian_assign;
use simtrack_core::geometry::WorldPoint;
use simtrack_core::rpca::{rpca_tiled, spectral_norm, RpcaParams};
use simtrack_core::tdoa_loc::{
    ml_localize, spherical_intersection, MlParams, SensorLayout, SensorSite, TdoaMeasurement,
};
use wasm_bindgen::prelude::*;

const C: f64 = 299_792_458.0;

/// A short synthetic clip (drifting sky gradient, sensor noise, one small
/// moving target) and its sparse residual after robust PCA.
#[wasm_bindgen]
pub struct BackgroundDemo {
    width: usize,
    height: usize,
    frames: Vec<Vec<f64>>,
    sparse: Vec<Vec<f64>>,
    detections: Vec<Vec<f64>>,
    iterations: usize,
}

impl BackgroundDemo {
    /// Native entry point behind the constructor.
    pub fn build(seed: u64, frame_count: usize, contrast: f64, noise: f64) -> Result<Self, String> {
        let (width, height) = (64usize, 48usize);
        let k = frame_count.clamp(4, 90);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, noise.abs()).map_err(|e| e.to_string())?;
        let mut stack = FrameStack::new(height, width);
        for f in 0..k {
            let s = f as f64 / (k - 1) as f64;
            let (tu, tv) = (6.0 + 50.0 * s, 34.0 - 20.0 * s);
            let gain = 1.0 + 0.03 * (std::f64::consts::TAU * s).sin();
            let frame = (0..height * width)
                .map(|i| {
                    let (r, c) = ((i / width) as f64, (i % width) as f64);
                    let sky = gain * (0.45 + 0.25 * r / height as f64 + 0.05 * c / width as f64);
                    let d2 = (c - tu).powi(2) + (r - tv).powi(2);
                    sky + contrast * (-d2 / 1.5).exp() + g.sample(&mut rng)
                })
                .collect();
            stack.push(frame, f as f64 / 30.0).map_err(|e| e.to_string())?;
        }
        let x = DMatrix::from_fn(height * width, k, |i, f| stack.frames[f][i]);
        let mut params = RpcaParams::with_sigma1(height * width, k, spectral_norm(&x));
        params.lambda = 8.0 * params.tau;
        let dec = rpca_tiled(&stack, 1, 1, &params).map_err(|e| e.to_string())?;
        let dets = detect_frames(&dec.sparse_frames, &stack.timestamps, &MaskParams::default())
            .map_err(|e| e.to_string())?;
        let mut detections = vec![Vec::new(); k];
        for d in &dets {
            let f = stack.timestamps.iter().position(|&t| t == d.t).unwrap_or(0);
            detections[f].extend([d.u, d.v]);
        }
        let sparse = dec
            .sparse_frames
            .iter()
            .map(|m| (0..height * width).map(|i| m[(i / width, i % width)]).collect())
            .collect();
        Ok(BackgroundDemo {
            width,
            height,
            frames: stack.frames.clone(),
            sparse,
            detections,
            iterations: dec.tiles.iter().map(|t| t.iterations).max().unwrap_or(0),
        })
    }
}

#[wasm_bindgen]
impl BackgroundDemo {
    /// `contrast` is the target's brightness step; negative for a dark
    /// target against the sky.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, frame_count: usize, contrast: f64, noise: f64) -> Result<BackgroundDemo, JsError> {
        Self::build(seed, frame_count, contrast, noise).map_err(|e| JsError::new(&e))
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
    pub fn iterations(&self) -> usize {
        self.iterations
    }
    /// Row-major input frame.
    pub fn frame(&self, k: usize) -> Vec<f64> {
        self.frames.get(k).cloned().unwrap_or_default()
    }
    /// Row-major sparse component of frame `k`.
    pub fn sparse(&self, k: usize) -> Vec<f64> {
        self.sparse.get(k).cloned().unwrap_or_default()
    }
    /// Detections in frame `k` as a flat `[u0, v0, u1, v1, ...]`.
    pub fn detections(&self, k: usize) -> Vec<f64> {
        self.detections.get(k).cloned().unwrap_or_default()
    }
}

/// Localize an emitter at `target` (x, y, z in metres) from receivers given
/// as flat `[x, y, z, ...]` triples. TDOAs are exact plus uniform timing
/// error of up to `jitter_ns`. With four or more receivers spherical
/// intersection is used; with three, the altitude-constrained ML fit with
/// the true altitude as prior.
///
/// Returns `[x, y, z, method]`, method 0 for spherical intersection and 1
/// for the ML fit.
#[wasm_bindgen]
pub fn localize(sensors: &[f64], target: &[f64], jitter_ns: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    localize_emitter(sensors, target, jitter_ns, seed).map_err(|e| JsError::new(&e))
}

pub fn localize_emitter(sensors: &[f64], target: &[f64], jitter_ns: f64, seed: u64) -> Result<Vec<f64>, String> {
    if sensors.len() % 3 != 0 || sensors.len() < 9 || target.len() != 3 {
        return Err("need at least three sensors as x,y,z triples and one target".into());
    }
    let sites: Vec<SensorSite> = sensors
        .chunks(3)
        .zip(1u32..)
        .map(|(p, id)| SensorSite { id, position: WorldPoint::new(p[0], p[1], p[2]) })
        .collect();
    let layout = SensorLayout::new(sites.clone(), 1).map_err(|e| e.to_string())?;
    let p = WorldPoint::new(target[0], target[1], target[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = rand_distr::Uniform::new_inclusive(-jitter_ns.abs(), jitter_ns.abs())
        .map_err(|e| e.to_string())?;
    let tdoas: Vec<TdoaMeasurement> = sites[1..]
        .iter()
        .map(|s| TdoaMeasurement {
            pair: (s.id, 1),
            delta_tau: (s.position.distance(&p) - sites[0].position.distance(&p)) / C
                + jitter.sample(&mut rng) * 1e-9,
            t: 0.0,
            peak_quality: 10.0,
        })
        .collect();
    let (pos, method) = if sites.len() >= 4 {
        let fix = spherical_intersection(&tdoas, &layout).map_err(|e| e.to_string())?;
        (fix.position, 0.0)
    } else {
        let fix = ml_localize(&tdoas, &layout, p.z, &MlParams::default()).map_err(|e| e.to_string())?;
        (fix.location.position, 1.0)
    };
    Ok(vec![pos.x, pos.y, pos.z, method])
}

/// Minimum-cost assignment of a row-major `rows × cols` cost matrix.
/// Pairs costing more than `gate` are never made. Returns the column chosen
/// for each row, or -1.
#[wasm_bindgen]
pub fn assign(costs: &[f64], rows: usize, cols: usize, gate: f64) -> Result<Vec<i32>, JsError> {
    assign_rows(costs, rows, cols, gate).map_err(|e| JsError::new(&e))
}

pub fn assign_rows(costs: &[f64], rows: usize, cols: usize, gate: f64) -> Result<Vec<i32>, String> {
    if costs.len() != rows * cols {
        return Err("cost matrix size does not match rows × cols".into());
    }
    let c = DMatrix::from_row_slice(rows, cols, costs);
    let gate = if gate > 0.0 { gate } else { f64::INFINITY };
    let mut out = vec![-1; rows];
    for (r, k) in hungarian_assign(&c, gate).pairs {
        out[r] = k as i32;
    }
    Ok(out)
}
