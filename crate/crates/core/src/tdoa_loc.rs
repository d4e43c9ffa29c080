//! Time-difference-of-arrival estimation and emitter localization.
//!
//! Sign convention: a [`TdoaMeasurement`] for pair `(a, b)` carries
//! `arrival_at_a − arrival_at_b`, so a stream `b` that lags `a` yields a
//! negative value.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp;
use crate::geometry::WorldPoint;
use crate::rf_preproc::RFCapture;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Default peak-to-sidelobe ratio below which a correlation is rejected.
pub const DEFAULT_MIN_PEAK_QUALITY: f64 = 2.0;
/// Cap on reported peak quality when the search range has no sidelobes.
const MAX_PEAK_QUALITY: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TdoaError {
    #[error("sample rates differ: {a} Hz vs {b} Hz")]
    RateMismatch { a: f64, b: f64 },
    #[error("captures do not overlap on the unified timeline")]
    NoOverlap,
    #[error("no correlation peak (peak-to-sidelobe ratio {quality:.2})")]
    NoPeak { quality: f64 },
    #[error("sensor geometry is degenerate (condition number {condition:.3e})")]
    DegenerateGeometry { condition: f64 },
    #[error("range equation has no valid root")]
    NoRealRoot,
    #[error("need at least {needed} TDOA pairs, got {got}")]
    InsufficientPairs { needed: usize, got: usize },
    #[error("pair ({0}, {1}) does not involve the reference sensor")]
    NotReferenced(u32, u32),
    #[error("unknown sensor {0}")]
    UnknownSensor(u32),
    #[error("invalid sensor layout: {0}")]
    InvalidLayout(String),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSite {
    pub id: u32,
    pub position: WorldPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub sensors: Vec<SensorSite>,
    pub reference_id: u32,
}

impl SensorLayout {
    pub fn new(sensors: Vec<SensorSite>, reference_id: u32) -> Result<Self, TdoaError> {
        let layout = Self {
            sensors,
            reference_id,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<(), TdoaError> {
        if self.sensors.len() < 2 {
            return Err(TdoaError::InvalidLayout("fewer than two sensors".into()));
        }
        for (i, a) in self.sensors.iter().enumerate() {
            if !a.position.is_finite() {
                return Err(TdoaError::InvalidLayout(format!(
                    "sensor {} position not finite",
                    a.id
                )));
            }
            for b in &self.sensors[i + 1..] {
                if a.id == b.id {
                    return Err(TdoaError::InvalidLayout(format!(
                        "duplicate sensor id {}",
                        a.id
                    )));
                }
                if a.position.distance(&b.position) < 1e-6 {
                    return Err(TdoaError::InvalidLayout(format!(
                        "sensors {} and {} share a position",
                        a.id, b.id
                    )));
                }
            }
        }
        if self.position(self.reference_id).is_none() {
            return Err(TdoaError::InvalidLayout(format!(
                "reference sensor {} not in layout",
                self.reference_id
            )));
        }
        Ok(())
    }

    pub fn position(&self, id: u32) -> Option<WorldPoint> {
        self.sensors.iter().find(|s| s.id == id).map(|s| s.position)
    }

    fn require(&self, id: u32) -> Result<Vector3<f64>, TdoaError> {
        self.position(id)
            .map(WorldPoint::to_vector)
            .ok_or(TdoaError::UnknownSensor(id))
    }

    pub fn ids(&self) -> Vec<u32> {
        self.sensors.iter().map(|s| s.id).collect()
    }

    pub fn centroid(&self) -> WorldPoint {
        let sum: Vector3<f64> = self.sensors.iter().map(|s| s.position.to_vector()).sum();
        WorldPoint::from_vector(&(sum / self.sensors.len() as f64))
    }

    /// Horizontal bounding box `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.sensors.iter().fold(
            (
                f64::INFINITY,
                f64::INFINITY,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
            ),
            |(a, b, c, d), s| {
                (
                    a.min(s.position.x),
                    b.min(s.position.y),
                    c.max(s.position.x),
                    d.max(s.position.y),
                )
            },
        )
    }

    /// Largest physically possible |Δτ| for a pair, seconds.
    pub fn max_delay(&self, a: u32, b: u32) -> Result<f64, TdoaError> {
        Ok((self.require(a)? - self.require(b)?).norm() / SPEED_OF_LIGHT)
    }

    /// Exact TDOA for an emitter at `p`.
    pub fn tdoa_for(&self, p: &WorldPoint, a: u32, b: u32) -> Result<f64, TdoaError> {
        let r = p.to_vector();
        Ok(((r - self.require(a)?).norm() - (r - self.require(b)?).norm()) / SPEED_OF_LIGHT)
    }

    /// Exact measurements of every non-reference sensor against the reference.
    pub fn exact_tdoas(&self, p: &WorldPoint, t: f64) -> Vec<TdoaMeasurement> {
        self.sensors
            .iter()
            .filter(|s| s.id != self.reference_id)
            .map(|s| TdoaMeasurement {
                pair: (s.id, self.reference_id),
                delta_tau: self
                    .tdoa_for(p, s.id, self.reference_id)
                    .expect("ids from layout"),
                t,
                peak_quality: MAX_PEAK_QUALITY,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdoaMeasurement {
    pub pair: (u32, u32),
    /// Arrival at `pair.0` minus arrival at `pair.1`, seconds.
    pub delta_tau: f64,
    pub t: f64,
    pub peak_quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationMethod {
    SphericalIntersection,
    MlConstrained,
}

impl fmt::Display for LocalizationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SphericalIntersection => "spherical_intersection",
            Self::MlConstrained => "ml_constrained",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RFLocation {
    pub t: f64,
    pub position: WorldPoint,
    pub method: LocalizationMethod,
    /// Sum of squared TDOA mismatches, s².
    pub residual: f64,
    pub device_label: Option<String>,
}

/// Sum of squared TDOA mismatches at `p`, s².
pub fn tdoa_residual(
    p: &WorldPoint,
    tdoas: &[TdoaMeasurement],
    layout: &SensorLayout,
) -> Result<f64, TdoaError> {
    tdoas.iter().try_fold(0.0, |acc, m| {
        let pred = layout.tdoa_for(p, m.pair.0, m.pair.1)?;
        Ok(acc + (pred - m.delta_tau).powi(2))
    })
}

// ---------------------------------------------------------------------------
// Cross-correlation
// ---------------------------------------------------------------------------

/// Estimate `arrival_a − arrival_b` from the cross-correlation peak.
///
/// Lags are searched only where `|Δτ| ≤ max_lag`. The peak is refined by a
/// parabola through the magnitudes at the peak and its two neighbors.
pub fn estimate_tdoa(
    a: &RFCapture,
    b: &RFCapture,
    max_lag: f64,
    min_quality: f64,
) -> Result<TdoaMeasurement, TdoaError> {
    if (a.fs - b.fs).abs() > 1e-9 * a.fs {
        return Err(TdoaError::RateMismatch { a: a.fs, b: b.fs });
    }
    let fs = a.fs;
    let (sa, sb) = (a.unified_start(), b.unified_start());
    let overlap = (sa + a.duration()).min(sb + b.duration()) - sa.max(sb);
    if a.samples.is_empty() || b.samples.is_empty() || overlap <= 0.0 {
        return Err(TdoaError::NoOverlap);
    }
    let (na, nb) = (a.samples.len(), b.samples.len());
    // r[l] = Σ a[n + l]·conj(b[n]) for l in -(nb-1) ..= na-1.
    let n = dsp::next_fast_len(na + nb - 1);
    let mut fa = vec![Complex64::new(0.0, 0.0); n];
    let mut fb = vec![Complex64::new(0.0, 0.0); n];
    fa[..na].copy_from_slice(&a.samples);
    fb[..nb].copy_from_slice(&b.samples);
    dsp::fft(&mut fa);
    dsp::fft(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y.conj();
    }
    dsp::ifft(&mut fa);
    let mag = |l: i64| -> f64 {
        let idx = if l >= 0 {
            l as usize
        } else {
            (n as i64 + l) as usize
        };
        fa[idx].norm()
    };

    // Δτ = l/fs − (sb − sa), so the admissible lags centre on fs·(sb − sa).
    let centre = fs * (sb - sa);
    let lo = ((centre - max_lag * fs).ceil() as i64).max(-(nb as i64 - 1));
    let hi = ((centre + max_lag * fs).floor() as i64).min(na as i64 - 1);
    if lo > hi {
        return Err(TdoaError::NoOverlap);
    }
    let mags: Vec<f64> = (lo..=hi).map(mag).collect();
    let (peak_i, &peak) = mags
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(&x.0)))
        .expect("non-empty lag range");
    if peak <= 0.0 {
        return Err(TdoaError::NoPeak { quality: 1.0 });
    }
    // Main lobe: walk outward while magnitude keeps falling.
    let mut left = peak_i;
    while left > 0 && mags[left - 1] < mags[left] {
        left -= 1;
    }
    let mut right = peak_i;
    while right + 1 < mags.len() && mags[right + 1] < mags[right] {
        right += 1;
    }
    let sidelobe = mags[..left]
        .iter()
        .chain(&mags[right + 1..])
        .fold(0.0f64, |m, &v| m.max(v));
    let quality = if sidelobe > 0.0 {
        (peak / sidelobe).min(MAX_PEAK_QUALITY)
    } else {
        MAX_PEAK_QUALITY
    };
    let quality = quality.max(1.0);
    if quality < min_quality {
        return Err(TdoaError::NoPeak { quality });
    }

    let l = lo + peak_i as i64;
    let (ym, y0, yp) = (mag(l - 1), peak, mag(l + 1));
    let denom = ym - 2.0 * y0 + yp;
    let frac = if denom < 0.0 {
        (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Ok(TdoaMeasurement {
        pair: (a.sensor_id, b.sensor_id),
        delta_tau: (l as f64 + frac) / fs - (sb - sa),
        t: sa.max(sb),
        peak_quality: quality,
    })
}

// ---------------------------------------------------------------------------
// Spherical intersection
// ---------------------------------------------------------------------------

/// Condition number above which the sensor matrix is treated as singular.
pub const MAX_CONDITION: f64 = 1e8;

/// Range differences `d_i = c·(t_i − t_ref)` keyed by sensor, from pairs that
/// each involve the reference sensor.
fn referenced_ranges(
    tdoas: &[TdoaMeasurement],
    layout: &SensorLayout,
) -> Result<Vec<(u32, f64)>, TdoaError> {
    let r = layout.reference_id;
    let mut out: Vec<(u32, f64)> = Vec::with_capacity(tdoas.len());
    for m in tdoas {
        let (id, d) = match m.pair {
            (a, b) if b == r && a != r => (a, m.delta_tau * SPEED_OF_LIGHT),
            (a, b) if a == r && b != r => (b, -m.delta_tau * SPEED_OF_LIGHT),
            (a, b) => return Err(TdoaError::NotReferenced(a, b)),
        };
        layout.require(id)?;
        if !out.iter().any(|(k, _)| *k == id) {
            out.push((id, d));
        }
    }
    Ok(out)
}

/// Closed-form position from ≥ 3 reference-sharing TDOA pairs (≥ 4 sensors).
///
/// With the reference sensor translated to the origin, sensor `i` at `x_i`
/// and emitter range `R_s` from the reference satisfy
/// `2·x_iᵀ·r = |x_i|² − d_i² − 2·R_s·d_i`. Solving the linear system gives
/// `r = a − R_s·b`; requiring `|r| = R_s` yields a quadratic in `R_s`. Of the
/// positive roots the one whose predicted TDOAs best match is returned.
pub fn spherical_intersection(
    tdoas: &[TdoaMeasurement],
    layout: &SensorLayout,
) -> Result<RFLocation, TdoaError> {
    let ranges = referenced_ranges(tdoas, layout)?;
    if ranges.len() < 3 {
        return Err(TdoaError::InsufficientPairs {
            needed: 3,
            got: ranges.len(),
        });
    }
    let origin = layout.require(layout.reference_id)?;
    let k = ranges.len();
    let mut s = DMatrix::zeros(k, 3);
    let mut delta = DVector::zeros(k);
    let mut d = DVector::zeros(k);
    for (row, (id, di)) in ranges.iter().enumerate() {
        let x = layout.require(*id)? - origin;
        s.row_mut(row).copy_from(&x.transpose());
        delta[row] = x.norm_squared() - di * di;
        d[row] = *di;
    }
    let svd = s.clone().svd(true, true);
    let (smax, smin) = svd
        .singular_values
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), &v| {
            (hi.max(v), lo.min(v))
        });
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(condition <= MAX_CONDITION) {
        return Err(TdoaError::DegenerateGeometry { condition });
    }
    let solve = |rhs: &DVector<f64>| -> Vector3<f64> {
        let x = svd.solve(rhs, 0.0).expect("U and Vᵀ computed");
        Vector3::new(x[0], x[1], x[2])
    };
    let a = solve(&(&delta * 0.5));
    let b = solve(&d);

    let qa = b.norm_squared() - 1.0;
    let qb = -2.0 * a.dot(&b);
    let qc = a.norm_squared();
    let mut roots = Vec::with_capacity(2);
    if qa.abs() < 1e-12 {
        if qb.abs() > 0.0 {
            roots.push(-qc / qb);
        }
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        let tol = 1e-9 * (qb * qb).max((4.0 * qa * qc).abs());
        if disc >= -tol {
            let sq = disc.max(0.0).sqrt();
            roots.push((-qb + sq) / (2.0 * qa));
            roots.push((-qb - sq) / (2.0 * qa));
        }
    }
    let centroid = layout.centroid();
    let mut best: Option<(f64, f64, WorldPoint)> = None;
    for rs in roots.into_iter().filter(|r| *r > 0.0 && r.is_finite()) {
        let p = WorldPoint::from_vector(&(a - b * rs + origin));
        let res = tdoa_residual(&p, tdoas, layout)?;
        let dist = p.distance(&centroid);
        let better = match best {
            None => true,
            Some((r0, d0, _)) => res < r0 - 1e-24 || ((res - r0).abs() <= 1e-24 && dist < d0),
        };
        if better {
            best = Some((res, dist, p));
        }
    }
    let (residual, _, position) = best.ok_or(TdoaError::NoRealRoot)?;
    Ok(RFLocation {
        t: tdoas[0].t,
        position,
        method: LocalizationMethod::SphericalIntersection,
        residual,
        device_label: None,
    })
}

// ---------------------------------------------------------------------------
// Altitude-constrained maximum likelihood
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlParams {
    /// Altitude prior standard deviation, m. Zero pins `z` to the prior.
    pub sigma_z: f64,
    pub w_z: f64,
    /// TDOA noise scale used to make the objective dimensionless, s.
    pub sigma_tau: f64,
    /// Coarse grid spacing, m.
    pub grid_cell: f64,
    /// Grid extension beyond the sensor bounding box, m.
    pub grid_margin: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for MlParams {
    fn default() -> Self {
        Self {
            sigma_z: 10.0,
            w_z: 1.0,
            sigma_tau: 5e-9,
            grid_cell: 50.0,
            grid_margin: 300.0,
            max_iters: 100,
            grad_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MlStatus {
    Converged,
    /// Refinement did not converge; the best grid point is returned.
    NonConvergence,
    /// A second basin lies within 1% of the returned objective.
    AmbiguousMinimum {
        alternate: WorldPoint,
        alternate_residual: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlFix {
    pub location: RFLocation,
    pub status: MlStatus,
    /// Normalized objective (TDOA term plus altitude penalty).
    pub objective: f64,
    pub iterations: usize,
}

struct MlProblem<'a> {
    pairs: Vec<(Vector3<f64>, Vector3<f64>, f64)>,
    altitude: f64,
    params: &'a MlParams,
}

impl MlProblem<'_> {
    fn free_z(&self) -> bool {
        self.params.sigma_z > 0.0
    }

    fn point(&self, v: &[f64]) -> Vector3<f64> {
        Vector3::new(v[0], v[1], if self.free_z() { v[2] } else { self.altitude })
    }

    /// Residual vector and its Jacobian at `v`.
    fn residuals(&self, v: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let r = self.point(v);
        let dim = v.len();
        let rows = self.pairs.len() + usize::from(self.free_z());
        let mut e = DVector::zeros(rows);
        let mut jac = DMatrix::zeros(rows, dim);
        let scale = 1.0 / (SPEED_OF_LIGHT * self.params.sigma_tau);
        for (i, (pa, pb, tau)) in self.pairs.iter().enumerate() {
            let (ua, ub) = (r - pa, r - pb);
            let (na, nb) = (ua.norm().max(1e-9), ub.norm().max(1e-9));
            e[i] = ((na - nb) * scale) - tau / self.params.sigma_tau;
            let g = (ua / na - ub / nb) * scale;
            for c in 0..dim {
                jac[(i, c)] = g[c];
            }
        }
        if self.free_z() {
            let w = self.params.w_z.sqrt() / self.params.sigma_z;
            e[rows - 1] = w * (r.z - self.altitude);
            jac[(rows - 1, 2)] = w;
        }
        (e, jac)
    }

    fn objective(&self, v: &[f64]) -> f64 {
        self.residuals(v).0.norm_squared()
    }

    /// Levenberg–Marquardt damped Gauss–Newton from `start`.
    fn refine(&self, start: Vec<f64>) -> (Vec<f64>, f64, usize, bool) {
        let mut v = start;
        let (mut e, mut jac) = self.residuals(&v);
        let mut f = e.norm_squared();
        let mut mu = 1e-6;
        for it in 0..self.params.max_iters {
            let grad = jac.transpose() * &e;
            if 2.0 * grad.norm() < self.params.grad_tol || f < 1e-28 {
                return (v, f, it, true);
            }
            let jtj = jac.transpose() * &jac;
            let mut improved = false;
            for _ in 0..30 {
                let mut h = jtj.clone();
                for d in 0..h.nrows() {
                    h[(d, d)] += mu * (1.0 + jtj[(d, d)]);
                }
                let Some(step) = h.cholesky().map(|c| c.solve(&(-&grad))) else {
                    mu *= 10.0;
                    continue;
                };
                let cand: Vec<f64> = v.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                let (ce, cj) = self.residuals(&cand);
                let cf = ce.norm_squared();
                if cf <= f {
                    let tiny = step.norm() < 1e-9 * (1.0 + self.point(&v).norm());
                    v = cand;
                    e = ce;
                    jac = cj;
                    let decreased = f - cf;
                    f = cf;
                    mu = (mu / 10.0).max(1e-15);
                    improved = true;
                    if tiny || decreased <= 1e-15 * f.max(1e-300) {
                        return (v, f, it + 1, true);
                    }
                    break;
                }
                mu *= 10.0;
            }
            if !improved {
                // No descent direction at any damping: a stationary point to
                // working precision.
                return (v, f, it + 1, true);
            }
        }
        let grad = jac.transpose() * &e;
        let ok = 2.0 * grad.norm() < self.params.grad_tol;
        (v, f, self.params.max_iters, ok)
    }
}

/// Emitter position from ≥ 2 TDOA pairs with a soft altitude prior.
pub fn ml_localize(
    tdoas: &[TdoaMeasurement],
    layout: &SensorLayout,
    altitude: f64,
    params: &MlParams,
) -> Result<MlFix, TdoaError> {
    if tdoas.len() < 2 {
        return Err(TdoaError::InsufficientPairs {
            needed: 2,
            got: tdoas.len(),
        });
    }
    if !altitude.is_finite() {
        return Err(TdoaError::InvalidParams(
            "altitude prior must be finite".into(),
        ));
    }
    if !(params.sigma_z >= 0.0
        && params.sigma_tau > 0.0
        && params.grid_cell > 0.0
        && params.w_z >= 0.0)
    {
        return Err(TdoaError::InvalidParams(
            "sigma_z ≥ 0, w_z ≥ 0, sigma_tau > 0, grid_cell > 0".into(),
        ));
    }
    let pairs = tdoas
        .iter()
        .map(|m| {
            Ok((
                layout.require(m.pair.0)?,
                layout.require(m.pair.1)?,
                m.delta_tau,
            ))
        })
        .collect::<Result<Vec<_>, TdoaError>>()?;
    let problem = MlProblem {
        pairs,
        altitude,
        params,
    };

    // Coarse grid on the prior altitude plane.
    let (x0, y0, x1, y1) = layout.bounds();
    let m = params.grid_margin;
    let nx = (((x1 - x0 + 2.0 * m) / params.grid_cell).ceil() as usize).max(1) + 1;
    let ny = (((y1 - y0 + 2.0 * m) / params.grid_cell).ceil() as usize).max(1) + 1;
    let at = |i: usize, j: usize| -> Vec<f64> {
        let (x, y) = (
            x0 - m + i as f64 * params.grid_cell,
            y0 - m + j as f64 * params.grid_cell,
        );
        if problem.free_z() {
            vec![x, y, altitude]
        } else {
            vec![x, y]
        }
    };
    let grid: Vec<f64> = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .map(|(i, j)| problem.objective(&at(i, j)))
        .collect();
    let g = |i: usize, j: usize| grid[j * nx + i];
    let mut basins: Vec<(f64, usize, usize)> = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let v = g(i, j);
            let is_min = (-1i64..=1).all(|dj| {
                (-1i64..=1).all(|di| {
                    let (ii, jj) = (i as i64 + di, j as i64 + dj);
                    if (di, dj) == (0, 0) || ii < 0 || jj < 0 || ii >= nx as i64 || jj >= ny as i64
                    {
                        return true;
                    }
                    let w = g(ii as usize, jj as usize);
                    // Strict on one side so that flat plateaus yield one seed.
                    v < w || (v == w && (jj, ii) > (j as i64, i as i64))
                })
            });
            if is_min {
                basins.push((v, i, j));
            }
        }
    }
    basins.sort_by(|a, b| a.0.total_cmp(&b.0));
    basins.truncate(6);

    let centroid = layout.centroid();
    let mut solutions: Vec<(f64, Vec<f64>, usize, bool)> = Vec::new();
    for &(_, i, j) in &basins {
        let (v, f, iters, ok) = problem.refine(at(i, j));
        let p = problem.point(&v);
        if solutions
            .iter()
            .any(|(_, w, _, _)| (problem.point(w) - p).norm() < 1.0)
        {
            continue;
        }
        solutions.push((f, v, iters, ok));
    }
    // Near-exact ties (noise-free mirror solutions) go to the solution
    // closest to the sensor centroid.
    solutions.sort_by(|a, b| {
        let tie = (a.0 - b.0).abs() <= 1e-12;
        if tie {
            let da = (problem.point(&a.1) - centroid.to_vector()).norm();
            let db = (problem.point(&b.1) - centroid.to_vector()).norm();
            da.total_cmp(&db)
        } else {
            a.0.total_cmp(&b.0)
        }
    });

    let converged: Vec<&(f64, Vec<f64>, usize, bool)> = solutions.iter().filter(|s| s.3).collect();
    let (objective, v, iterations, mut status) = match converged.first() {
        Some(best) => (best.0, best.1.clone(), best.2, MlStatus::Converged),
        None => {
            let &(f, i, j) = basins.first().expect("grid has a minimum");
            (f, at(i, j), params.max_iters, MlStatus::NonConvergence)
        }
    };
    let position = WorldPoint::from_vector(&problem.point(&v));
    if status == MlStatus::Converged {
        if let Some(second) = converged.get(1) {
            if second.0 - objective <= 0.01 * second.0.abs()
                || (second.0 - objective).abs() <= 1e-12
            {
                let alternate = WorldPoint::from_vector(&problem.point(&second.1));
                status = MlStatus::AmbiguousMinimum {
                    alternate,
                    alternate_residual: tdoa_residual(&alternate, tdoas, layout)?,
                };
            }
        }
    }
    Ok(MlFix {
        location: RFLocation {
            t: tdoas[0].t,
            position,
            method: LocalizationMethod::MlConstrained,
            residual: tdoa_residual(&position, tdoas, layout)?,
            device_label: None,
        },
        status,
        objective,
        iterations,
    })
}

/// Normalized ML objective at an arbitrary point, for verification.
pub fn ml_objective(
    p: &WorldPoint,
    tdoas: &[TdoaMeasurement],
    layout: &SensorLayout,
    altitude: f64,
    params: &MlParams,
) -> Result<f64, TdoaError> {
    let mut f = tdoa_residual(p, tdoas, layout)? / params.sigma_tau.powi(2);
    if params.sigma_z > 0.0 {
        f += params.w_z * ((p.z - altitude) / params.sigma_z).powi(2);
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct LocationRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    method: LocalizationMethod,
    residual: f64,
    label: String,
}

pub fn write_locations(path: &Path, locs: &[RFLocation]) -> Result<(), TdoaError> {
    let mut w = csv::Writer::from_path(path)?;
    if locs.is_empty() {
        w.write_record(["t", "x", "y", "z", "method", "residual", "label"])?;
    }
    for l in locs {
        w.serialize(LocationRow {
            t: l.t,
            x: l.position.x,
            y: l.position.y,
            z: l.position.z,
            method: l.method,
            residual: l.residual,
            label: l.device_label.clone().unwrap_or_default(),
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_locations(path: &Path) -> Result<Vec<RFLocation>, TdoaError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<LocationRow>()
        .map(|row| {
            let row = row?;
            Ok(RFLocation {
                t: row.t,
                position: WorldPoint::new(row.x, row.y, row.z),
                method: row.method,
                residual: row.residual,
                device_label: (!row.label.is_empty()).then_some(row.label),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> SensorLayout {
        let s = |id, x, y, z| SensorSite {
            id,
            position: WorldPoint::new(x, y, z),
        };
        SensorLayout::new(
            vec![
                s(1, -500.0, -500.0, 0.0),
                s(2, 500.0, -500.0, 0.0),
                s(3, 500.0, 500.0, 0.0),
                s(4, -500.0, 500.0, 80.0),
            ],
            1,
        )
        .unwrap()
    }

    #[test]
    fn layout_validation() {
        let s = |id, x| SensorSite {
            id,
            position: WorldPoint::new(x, 0.0, 0.0),
        };
        assert!(SensorLayout::new(vec![s(1, 0.0)], 1).is_err());
        assert!(SensorLayout::new(vec![s(1, 0.0), s(2, 0.0)], 1).is_err());
        assert!(SensorLayout::new(vec![s(1, 0.0), s(2, 1.0)], 3).is_err());
        assert!(SensorLayout::new(vec![s(1, 0.0), s(2, 1.0)], 2).is_ok());
    }

    #[test]
    fn coplanar_sensors_are_degenerate() {
        let s = |id, x, y| SensorSite {
            id,
            position: WorldPoint::new(x, y, 0.0),
        };
        let layout = SensorLayout::new(
            vec![
                s(1, 0.0, 0.0),
                s(2, 100.0, 0.0),
                s(3, 0.0, 100.0),
                s(4, 100.0, 100.0),
            ],
            1,
        )
        .unwrap();
        let tdoas = layout.exact_tdoas(&WorldPoint::new(30.0, 40.0, 50.0), 0.0);
        assert!(matches!(
            spherical_intersection(&tdoas, &layout),
            Err(TdoaError::DegenerateGeometry { .. })
        ));
    }

    #[test]
    fn too_few_pairs() {
        let layout = square();
        let tdoas = layout.exact_tdoas(&WorldPoint::new(0.0, 0.0, 40.0), 0.0);
        assert!(matches!(
            spherical_intersection(&tdoas[..2], &layout),
            Err(TdoaError::InsufficientPairs { .. })
        ));
        assert!(matches!(
            ml_localize(&tdoas[..1], &layout, 40.0, &MlParams::default()),
            Err(TdoaError::InsufficientPairs { .. })
        ));
    }

    #[test]
    fn pairs_must_share_reference() {
        let layout = square();
        let m = TdoaMeasurement {
            pair: (2, 3),
            delta_tau: 0.0,
            t: 0.0,
            peak_quality: 10.0,
        };
        assert!(matches!(
            spherical_intersection(&[m, m, m], &layout),
            Err(TdoaError::NotReferenced(2, 3))
        ));
    }

    #[test]
    fn reversed_pairs_are_equivalent() {
        let layout = square();
        let p = WorldPoint::new(120.0, -60.0, 35.0);
        let mut tdoas = layout.exact_tdoas(&p, 0.0);
        tdoas[1].pair = (tdoas[1].pair.1, tdoas[1].pair.0);
        tdoas[1].delta_tau = -tdoas[1].delta_tau;
        let fix = spherical_intersection(&tdoas, &layout).unwrap();
        assert!(fix.position.distance(&p) < 1e-6);
    }

    #[test]
    fn location_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loc.csv");
        let locs = vec![
            RFLocation {
                t: 1.5,
                position: WorldPoint::new(1.0, 2.0, 3.0),
                method: LocalizationMethod::SphericalIntersection,
                residual: 1e-18,
                device_label: Some("mavic".into()),
            },
            RFLocation {
                t: 2.0,
                position: WorldPoint::new(-1.0, 0.5, 40.0),
                method: LocalizationMethod::MlConstrained,
                residual: 0.0,
                device_label: None,
            },
        ];
        write_locations(&path, &locs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,x,y,z,method,residual,label\n"));
        assert!(text.contains("ml_constrained"));
        assert_eq!(read_locations(&path).unwrap(), locs);
    }
}
