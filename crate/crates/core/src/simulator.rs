//! Synthetic EO frame stacks and multi-sensor RF dwell captures with truth.
//!
//! All randomness comes from counter-addressed ChaCha streams keyed by
//! `(seed, purpose, index)`, so every frame and dwell can be rendered
//! independently and in any order with byte-identical results.
//!
//! RF sensors record short dwells of one decision window each, at a fixed
//! cadence, rather than continuous streams: a continuous 25 MHz capture of a
//! 40 s pass would be several gigabytes per sensor.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp;
use crate::frames::{FrameError, FrameStack};
use crate::geometry::{CameraModel, GeometryError, WorldPoint};
use crate::rf_preproc::{IqWriter, RFCapture, RfError, DECISION_TIME};
use crate::tdoa_loc::{SensorLayout, SensorSite, TdoaError, SPEED_OF_LIGHT};

/// Range at which `pixel_contrast` is the rendered peak amplitude, m.
pub const EO_REFERENCE_RANGE: f64 = 500.0;
/// Range at which `tx_power` is the received power, m.
pub const RF_REFERENCE_RANGE: f64 = 100.0;
/// Root-raised-cosine roll-off of the burst surrogate.
pub const RRC_ROLLOFF: f64 = 0.35;
/// Zero padding on each side of a synthesized dwell, samples. Covers the
/// largest propagation delay so the circular delay never wraps signal.
const DWELL_PAD: usize = 4096;
/// Dwells rendered concurrently when streaming.
const DWELL_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown preset {0:?} (expected r06, r14 or r16)")]
    UnknownPreset(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tdoa(#[from] TdoaError),
    #[error(transparent)]
    Rf(#[from] RfError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("scenario file: {0}")]
    Toml(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Non-fatal conditions found while generating.
#[derive(Debug, Clone, PartialEq)]
pub enum SimWarning {
    TargetNeverVisible { target: String },
    BandCollision { sensor: u32, a: String, b: String },
}

// ---------------------------------------------------------------------------
// Scenario description
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub position: WorldPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Impairments {
    /// Carrier frequency offset, Hz.
    pub cfo: f64,
    pub iq_gain_imbalance: f64,
    /// Quadrature skew, degrees.
    pub iq_phase_skew: f64,
    /// Raised-cosine on/off ramp duration, seconds.
    pub rise_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxSpec {
    pub center_freq: f64,
    pub bandwidth: f64,
    pub burst_period: f64,
    pub burst_len: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hop_pattern: Option<Vec<f64>>,
    pub impairments: Impairments,
    /// Received power at the RF reference range, dB relative to unit noise
    /// power per complex sample.
    pub tx_power: f64,
}

impl TxSpec {
    fn carrier(&self, burst: i64) -> f64 {
        match &self.hop_pattern {
            Some(h) if !h.is_empty() => h[burst.rem_euclid(h.len() as i64) as usize],
            _ => self.center_freq,
        }
    }

    /// Lowest and highest carrier the transmitter may use.
    fn carrier_span(&self) -> (f64, f64) {
        match &self.hop_pattern {
            Some(h) if !h.is_empty() => (
                h.iter().copied().fold(f64::INFINITY, f64::min),
                h.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ),
            _ => (self.center_freq, self.center_freq),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub device: String,
    pub trajectory: Vec<Waypoint>,
    /// Signed peak amplitude at the EO reference range.
    pub pixel_contrast: f64,
    /// Point-spread standard deviation, px.
    pub pixel_sigma: f64,
    pub tx: TxSpec,
}

impl TargetSpec {
    /// Piecewise-linear position, held constant outside the waypoints.
    pub fn position_at(&self, t: f64) -> WorldPoint {
        let w = &self.trajectory;
        if t <= w[0].t {
            return w[0].position;
        }
        for pair in w.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if t <= b.t {
                let s = if b.t > a.t {
                    (t - a.t) / (b.t - a.t)
                } else {
                    1.0
                };
                let (p, q) = (a.position.to_vector(), b.position.to_vector());
                return WorldPoint::from_vector(&(p + (q - p) * s));
            }
        }
        w[w.len() - 1].position
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EoSimParams {
    /// Number of background basis images, at most 3.
    pub background_rank: usize,
    /// Relative amplitude of the slow temporal background modulation. Zero
    /// gives a static background.
    pub background_drift: f64,
    pub cloud_amplitude: f64,
    /// Horizontal advection speed of the cloud field, px/s.
    pub cloud_speed: f64,
    /// Correlation length of the cloud field, px.
    pub cloud_scale: f64,
    pub noise_sigma: f64,
}

impl Default for EoSimParams {
    fn default() -> Self {
        Self {
            background_rank: 3,
            background_drift: 0.03,
            cloud_amplitude: 0.02,
            cloud_speed: 2.0,
            cloud_scale: 10.0,
            noise_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfSimParams {
    pub capture_rate: f64,
    /// Interval between dwell starts, seconds.
    pub dwell_period: f64,
    pub dwell_start: f64,
    /// No dwell extends past this time (or past the scenario duration).
    pub dwell_end: f64,
    /// Complex AWGN standard deviation per sample; zero disables noise.
    pub noise_sigma: f64,
    /// Tuning frequency per sensor id, Hz.
    pub tuning: BTreeMap<String, f64>,
}

impl Default for RfSimParams {
    fn default() -> Self {
        Self {
            capture_rate: 25e6,
            dwell_period: 2.0,
            dwell_start: 1.0,
            dwell_end: f64::INFINITY,
            noise_sigma: 1.0,
            tuning: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub duration: f64,
    pub frame_rate: f64,
    /// `(height, width)` in pixels.
    pub frame_size: (usize, usize),
    pub camera: CameraModel,
    pub sensors: SensorLayout,
    pub targets: Vec<TargetSpec>,
    /// Sensor clock minus true time, per sensor id, seconds.
    #[serde(default)]
    pub rf_offsets: BTreeMap<String, f64>,
    pub seed: u64,
    #[serde(default)]
    pub eo: EoSimParams,
    #[serde(default)]
    pub rf: RfSimParams,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration {}", self.duration));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad(format!("frame_rate {}", self.frame_rate));
        }
        let (h, w) = self.frame_size;
        if h == 0
            || w == 0
            || h != self.camera.height() as usize
            || w != self.camera.width() as usize
        {
            return bad(format!("frame_size {h}x{w} does not match the camera"));
        }
        if self.eo.background_rank > 3 || self.eo.noise_sigma < 0.0 || self.eo.cloud_scale <= 0.0 {
            return bad("eo parameters out of range".into());
        }
        self.sensors.validate()?;
        let rf = &self.rf;
        if !(rf.capture_rate > 0.0 && rf.dwell_period >= DECISION_TIME && rf.noise_sigma >= 0.0) {
            return bad("rf parameters out of range".into());
        }
        for (k, v) in self.rf_offsets.iter().chain(&rf.tuning) {
            if k.parse::<u32>().is_err() || !v.is_finite() {
                return bad(format!("sensor map entry {k} = {v}"));
            }
        }
        for t in &self.targets {
            if t.trajectory.is_empty() || t.pixel_contrast == 0.0 || !(t.pixel_sigma > 0.0) {
                return bad(format!(
                    "target {}: empty trajectory, zero contrast or bad sigma",
                    t.device
                ));
            }
            let z0 = t.trajectory[0].position.z;
            if t.trajectory
                .iter()
                .any(|w| (w.position.z - z0).abs() > 1e-9)
            {
                return bad(format!("target {}: altitude must be constant", t.device));
            }
            if t.trajectory.windows(2).any(|p| p[1].t < p[0].t) {
                return bad(format!("target {}: waypoints out of order", t.device));
            }
            let tx = &t.tx;
            if !(tx.burst_len > 0.0 && tx.burst_len < tx.burst_period && tx.bandwidth > 0.0) {
                return bad(format!(
                    "target {}: need 0 < burst_len < burst_period",
                    t.device
                ));
            }
            if 2.0 * tx.impairments.rise_time > tx.burst_len {
                return bad(format!("target {}: ramps longer than the burst", t.device));
            }
            if let Some(h) = &tx.hop_pattern {
                let half = rf.capture_rate / 2.0;
                if h.iter()
                    .any(|f| (f - tx.center_freq).abs() + tx.bandwidth / 2.0 > half)
                {
                    return bad(format!("target {}: hop outside the capture band", t.device));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let scn: Scenario = toml::from_str(&text).map_err(|e| SimError::Toml(e.to_string()))?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn to_toml(&self) -> Result<String, SimError> {
        toml::to_string(self).map_err(|e| SimError::Toml(e.to_string()))
    }

    pub fn rf_offset(&self, sensor: u32) -> f64 {
        self.rf_offsets
            .get(&sensor.to_string())
            .copied()
            .unwrap_or(0.0)
    }

    pub fn tuning(&self, sensor: u32) -> Option<f64> {
        self.rf.tuning.get(&sensor.to_string()).copied()
    }

    pub fn frame_times(&self) -> Vec<f64> {
        let n = (self.duration * self.frame_rate).floor() as usize;
        (0..n).map(|k| k as f64 / self.frame_rate).collect()
    }

    /// Start times (true clock) of the RF dwells.
    pub fn dwell_times(&self) -> Vec<f64> {
        let end = self.rf.dwell_end.min(self.duration);
        let mut out = Vec::new();
        let mut k = 0;
        loop {
            let t = self.rf.dwell_start + k as f64 * self.rf.dwell_period;
            if t + DECISION_TIME > end + 1e-12 {
                return out;
            }
            out.push(t);
            k += 1;
        }
    }

    /// Sensors whose tuned band contains the target's whole band, in id order.
    pub fn sensor_group(&self, target: &TargetSpec) -> Vec<u32> {
        let (lo, hi) = target.tx.carrier_span();
        let half = self.rf.capture_rate / 2.0;
        let mut ids: Vec<u32> = self
            .sensors
            .ids()
            .into_iter()
            .filter(|&id| {
                self.tuning(id).is_some_and(|fc| {
                    lo - target.tx.bandwidth / 2.0 >= fc - half
                        && hi + target.tx.bandwidth / 2.0 <= fc + half
                })
            })
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Layout restricted to `ids`, referenced to the first.
    pub fn sub_layout(&self, ids: &[u32]) -> Result<SensorLayout, SimError> {
        let sites: Vec<SensorSite> = ids
            .iter()
            .map(|&id| {
                self.sensors
                    .position(id)
                    .map(|position| SensorSite { id, position })
                    .ok_or(SimError::InvalidScenario(format!("unknown sensor {id}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(SensorLayout::new(sites, ids[0])?)
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Transmitter signature of one device class.
pub fn device_tx(device: &str) -> Option<TxSpec> {
    let imp = |cfo, gain, skew, rise| Impairments {
        cfo,
        iq_gain_imbalance: gain,
        iq_phase_skew: skew,
        rise_time: rise,
    };
    let tx = |fc, bw, len, imp| TxSpec {
        center_freq: fc,
        bandwidth: bw,
        burst_period: 10e-3,
        burst_len: len,
        hop_pattern: None,
        impairments: imp,
        tx_power: 25.0,
    };
    Some(match device {
        "Phantom" => tx(2406e6, 4e6, 5.0e-3, imp(2.5e3, 0.4, 2.0, 120e-6)),
        "Mavic" => tx(2468e6, 8e6, 3.5e-3, imp(-4e3, -0.3, -3.0, 30e-6)),
        "m600" => tx(2476e6, 6e6, 7.0e-3, imp(1e3, 0.8, 1.0, 60e-6)),
        "IF1200" => TxSpec {
            hop_pattern: Some((0..9).map(|k| 902e6 + 1.5e6 * k as f64).collect()),
            ..tx(908e6, 200e3, 4.5e-3, imp(6e3, -0.6, 4.0, 250e-6))
        },
        _ => return None,
    })
}

const ALTITUDE: f64 = 60.0;

fn field_sensors() -> Vec<SensorSite> {
    let s = |id, x, y, z| SensorSite {
        id,
        position: WorldPoint::new(x, y, z),
    };
    vec![
        s(101, 0.0, 150.0, 2.0),
        s(102, 350.0, 450.0, 5.0),
        s(103, -320.0, 520.0, 3.0),
        s(104, -300.0, 250.0, 4.0),
        s(105, 60.0, 850.0, 80.0),
        s(106, 320.0, 200.0, 3.0),
    ]
}

/// Preset EO site: south-east of the flight line, so approaching targets
/// sweep across the image instead of looming in place.
const CAMERA_SITE: (f64, f64, f64) = (150.0, 0.0, 2.0);

fn preset_camera() -> CameraModel {
    CameraModel::looking_from(
        WorldPoint::new(CAMERA_SITE.0, CAMERA_SITE.1, CAMERA_SITE.2),
        116f64.to_radians(),
        9f64.to_radians(),
        330.0,
        160,
        120,
    )
    .expect("preset camera is valid")
}

/// A north-to-south pass at constant altitude starting `start_range` m from
/// the camera and closing at `speed` m/s.
fn north_to_south(x: f64, start_range: f64, speed: f64, duration: f64) -> Vec<Waypoint> {
    let (cx, cy, cz) = CAMERA_SITE;
    let dz = ALTITUDE - cz;
    let y0 = cy + (start_range.powi(2) - (x - cx).powi(2) - dz * dz).sqrt();
    vec![
        Waypoint {
            t: 0.0,
            position: WorldPoint::new(x, y0, ALTITUDE),
        },
        Waypoint {
            t: duration,
            position: WorldPoint::new(x, y0 - speed * duration, ALTITUDE),
        },
    ]
}

fn target(device: &str, x: f64, contrast: f64, sigma: f64, duration: f64) -> TargetSpec {
    TargetSpec {
        device: device.to_string(),
        trajectory: north_to_south(x, 500.0, 7.5, duration),
        pixel_contrast: contrast,
        pixel_sigma: sigma,
        tx: device_tx(device).expect("known device"),
    }
}

/// Scenario presets modelled on the three evaluation passes.
pub fn preset(name: &str) -> Result<Scenario, SimError> {
    let duration = 40.0;
    let all = field_sensors();
    let pick = |ids: &[u32]| -> Vec<SensorSite> {
        all.iter()
            .copied()
            .filter(|s| ids.contains(&s.id))
            .collect()
    };
    let offsets = |ids: &[u32], extra: &[(u32, f64)]| -> BTreeMap<String, f64> {
        ids.iter()
            .map(|&id| {
                let e = extra
                    .iter()
                    .find(|(s, _)| *s == id)
                    .map_or(0.0, |(_, e)| *e);
                (id.to_string(), 12.0 + e)
            })
            .collect()
    };
    let tune = |groups: &[(&[u32], f64)]| -> BTreeMap<String, f64> {
        groups
            .iter()
            .flat_map(|(ids, f)| ids.iter().map(move |id| (id.to_string(), *f)))
            .collect()
    };
    let six = [101, 102, 103, 104, 105, 106];
    let scn = match name {
        "r06" => {
            let ids = [101, 102, 103, 105];
            Scenario {
                name: "r06".into(),
                duration,
                frame_rate: 10.0,
                frame_size: (120, 160),
                camera: preset_camera(),
                sensors: SensorLayout::new(pick(&ids), 101)?,
                targets: vec![target("Phantom", 10.0, 0.12, 1.0, duration)],
                rf_offsets: offsets(&ids, &[]),
                seed: 6,
                eo: EoSimParams {
                    cloud_amplitude: 0.05,
                    cloud_speed: 3.0,
                    ..EoSimParams::default()
                },
                rf: RfSimParams {
                    tuning: tune(&[(&ids, 2406e6)]),
                    dwell_end: 30.0,
                    ..RfSimParams::default()
                },
            }
        }
        "r14" => Scenario {
            name: "r14".into(),
            duration,
            frame_rate: 10.0,
            frame_size: (120, 160),
            camera: preset_camera(),
            sensors: SensorLayout::new(pick(&six), 101)?,
            targets: vec![
                target("Mavic", -25.0, -0.12, 1.0, duration),
                target("Phantom", 25.0, 0.14, 1.0, duration),
            ],
            rf_offsets: offsets(&six, &[(106, 6.0)]),
            seed: 14,
            eo: EoSimParams::default(),
            rf: RfSimParams {
                tuning: tune(&[(&[101, 102, 103], 2468e6), (&[104, 105, 106], 2406e6)]),
                dwell_end: 30.0,
                ..RfSimParams::default()
            },
        },
        "r16" => Scenario {
            name: "r16".into(),
            duration,
            frame_rate: 10.0,
            frame_size: (120, 160),
            camera: preset_camera(),
            sensors: SensorLayout::new(pick(&six), 101)?,
            targets: vec![
                target("IF1200", -25.0, -0.1, 1.6, duration),
                target("m600", 25.0, 0.12, 1.6, duration),
            ],
            rf_offsets: offsets(&six, &[]),
            seed: 16,
            eo: EoSimParams::default(),
            rf: RfSimParams {
                tuning: tune(&[(&[101, 102, 103], 908e6), (&[104, 105, 106], 2476e6)]),
                dwell_end: 30.0,
                ..RfSimParams::default()
            },
        },
        other => return Err(SimError::UnknownPreset(other.to_string())),
    };
    scn.validate()?;
    Ok(scn)
}

// ---------------------------------------------------------------------------
// Random substreams
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
#[repr(u64)]
enum Purpose {
    Background = 1,
    Clouds = 2,
    FrameNoise = 3,
    Symbols = 4,
    BurstPhase = 5,
    RfNoise = 6,
    Pass = 7,
}

/// Independent stream for `(seed, purpose, a, b)`.
fn substream(seed: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(a.wrapping_mul(0x1_0000_0001) ^ b.rotate_left(32));
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// EO
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EoTruth {
    pub t: f64,
    pub target: String,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone)]
pub struct EoOutput {
    /// Intensities before 8-bit quantization.
    pub frames: FrameStack,
    pub truth: Vec<EoTruth>,
    pub warnings: Vec<SimWarning>,
}

/// Periodic field of unit standard deviation: white noise blurred with a
/// circular Gaussian of width `scale` along both axes.
fn smooth_field(h: usize, w: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| normal(rng)).collect();
    let radius = (3.0 * scale).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d as f64 / scale).powi(2)).exp())
        .collect();
    let blur = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (k, &g) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (rr, cc) = if along_rows {
                        (r, (c as isize + d).rem_euclid(w as isize) as usize)
                    } else {
                        ((r as isize + d).rem_euclid(h as isize) as usize, c)
                    };
                    acc += g * src[rr * w + cc];
                }
                out[r * w + c] = acc;
            }
        }
        out
    };
    let mut f = blur(&blur(&noise, true), false);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    f.iter_mut()
        .for_each(|v| *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 });
    f
}

/// The background basis images and their temporal coefficients.
struct Background {
    bases: Vec<Vec<f64>>,
    drift: f64,
    duration: f64,
}

impl Background {
    fn new(scn: &Scenario) -> Self {
        let (h, w) = scn.frame_size;
        let mut rng = substream(scn.seed, Purpose::Background, 0, 0);
        let texture = smooth_field(h, w, 6.0, &mut rng);
        let sky: Vec<f64> = (0..h * w)
            .map(|i| 0.42 + 0.12 * (i / w) as f64 / h as f64)
            .collect();
        let ground: Vec<f64> = texture.iter().map(|v| 0.03 * v).collect();
        let lateral: Vec<f64> = (0..h * w)
            .map(|i| 0.05 * ((i % w) as f64 / w as f64 - 0.5))
            .collect();
        let bases = [sky, ground, lateral]
            .into_iter()
            .take(scn.eo.background_rank)
            .collect();
        Self {
            bases,
            drift: scn.eo.background_drift,
            duration: scn.duration,
        }
    }

    fn coefficients(&self, t: f64) -> [f64; 3] {
        let d = self.drift;
        [
            1.0 + d * (TAU * t / 37.0).sin(),
            1.0 + d * (TAU * t / 53.0).cos(),
            1.0 + 10.0 * d * (t / self.duration),
        ]
    }

    fn render(&self, t: f64, out: &mut [f64]) {
        let c = self.coefficients(t);
        for (basis, ci) in self.bases.iter().zip(c) {
            for (o, b) in out.iter_mut().zip(basis) {
                *o += ci * b;
            }
        }
    }
}

/// Pixel position of a target, if it lies in front of the camera.
pub fn target_pixel(cam: &CameraModel, target: &TargetSpec, t: f64) -> Option<(f64, f64, bool)> {
    cam.project(&target.position_at(t))
        .ok()
        .map(|p| (p.u, p.v, p.in_frame))
}

pub fn generate_eo(scn: &Scenario) -> Result<EoOutput, SimError> {
    scn.validate()?;
    let (h, w) = scn.frame_size;
    let times = scn.frame_times();
    let background = Background::new(scn);
    let clouds = (scn.eo.cloud_amplitude != 0.0).then(|| {
        smooth_field(
            h,
            w,
            scn.eo.cloud_scale,
            &mut substream(scn.seed, Purpose::Clouds, 0, 0),
        )
    });
    let center = scn.camera.center();

    let render = |k: usize| -> (Vec<f64>, Vec<EoTruth>) {
        let t = times[k];
        let mut frame = vec![0.0; h * w];
        background.render(t, &mut frame);
        if let Some(field) = &clouds {
            // Advect to the right with linear interpolation between columns.
            let shift = (scn.eo.cloud_speed * t).rem_euclid(w as f64);
            let (whole, frac) = (shift.floor() as usize, shift.fract());
            for r in 0..h {
                for c in 0..w {
                    let c0 = (c + w - whole % w) % w;
                    let c1 = (c0 + w - 1) % w;
                    let v = (1.0 - frac) * field[r * w + c0] + frac * field[r * w + c1];
                    frame[r * w + c] += scn.eo.cloud_amplitude * v;
                }
            }
        }
        let mut truth = Vec::new();
        for tgt in &scn.targets {
            let p = tgt.position_at(t);
            let Some((u, v, in_frame)) = target_pixel(&scn.camera, tgt, t) else {
                continue;
            };
            let range = p.distance(&center);
            let amp = tgt.pixel_contrast * (EO_REFERENCE_RANGE / range).powi(2);
            let reach = (4.0 * tgt.pixel_sigma).ceil() as isize;
            let (cu, cv) = (u.floor() as isize, v.floor() as isize);
            for r in (cv - reach).max(0)..(cv + reach + 1).min(h as isize) {
                for c in (cu - reach).max(0)..(cu + reach + 1).min(w as isize) {
                    let du = c as f64 + 0.5 - u;
                    let dv = r as f64 + 0.5 - v;
                    let g = (-(du * du + dv * dv) / (2.0 * tgt.pixel_sigma.powi(2))).exp();
                    frame[r as usize * w + c as usize] += amp * g;
                }
            }
            if in_frame {
                truth.push(EoTruth {
                    t,
                    target: tgt.device.clone(),
                    u,
                    v,
                });
            }
        }
        if scn.eo.noise_sigma > 0.0 {
            let mut rng = substream(scn.seed, Purpose::FrameNoise, k as u64, 0);
            frame
                .iter_mut()
                .for_each(|x| *x += scn.eo.noise_sigma * normal(&mut rng));
        }
        frame.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        (frame, truth)
    };

    #[cfg(feature = "parallel")]
    let rendered: Vec<(Vec<f64>, Vec<EoTruth>)> = {
        use rayon::prelude::*;
        (0..times.len()).into_par_iter().map(render).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rendered: Vec<(Vec<f64>, Vec<EoTruth>)> = (0..times.len()).map(render).collect();

    let mut frames = FrameStack::new(h, w).with_frame_rate(scn.frame_rate);
    let mut truth = Vec::new();
    for ((frame, tr), &t) in rendered.into_iter().zip(&times) {
        frames.push(frame, t)?;
        truth.extend(tr);
    }
    let mut warnings = Vec::new();
    for tgt in &scn.targets {
        if !truth.iter().any(|r| r.target == tgt.device) {
            log::warn!("target {} never projects into the frame", tgt.device);
            warnings.push(SimWarning::TargetNeverVisible {
                target: tgt.device.clone(),
            });
        }
    }
    Ok(EoOutput {
        frames,
        truth,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// RF
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RfTruth {
    /// Dwell start on the true timeline.
    pub t: f64,
    pub pair: (u32, u32),
    /// Arrival at the first sensor minus arrival at the second, seconds.
    pub delta_tau: f64,
    pub target: String,
}

#[derive(Debug, Clone)]
pub struct RfOutput {
    /// Ordered by dwell, then sensor id.
    pub captures: Vec<RFCapture>,
    pub truth: Vec<RfTruth>,
    pub warnings: Vec<SimWarning>,
}

/// Raised-cosine ramp from 0 at `x ≤ 0` to 1 at `x ≥ width`.
fn ramp(x: f64, width: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= width || width <= 0.0 {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * x / width).cos()
    }
}

/// Root-raised-cosine amplitude response at `f` for symbol rate `rs`.
fn rrc(f: f64, rs: f64) -> f64 {
    let (b, f) = (RRC_ROLLOFF, f.abs());
    let (f1, f2) = ((1.0 - b) * rs / 2.0, (1.0 + b) * rs / 2.0);
    if f <= f1 {
        1.0
    } else if f >= f2 {
        0.0
    } else {
        (0.5 * (1.0 + (std::f64::consts::PI / (b * rs) * (f - f1)).cos())).sqrt()
    }
}

/// Transmitter baseband (relative to `f_capture`) over `n` samples starting
/// at true time `t_start`, with unit power inside bursts. Returns the
/// spectrum, ready for per-sensor delays.
fn transmit_spectrum(
    seed: u64,
    index: u64,
    tx: &TxSpec,
    t_start: f64,
    n: usize,
    fs: f64,
    f_capture: f64,
    cfo_jitter: f64,
) -> Vec<Complex64> {
    let sps = (fs * (1.0 + RRC_ROLLOFF) / tx.bandwidth).round().max(1.0);
    let rs = fs / sps;
    let phase0 = substream(seed, Purpose::BurstPhase, index, 0).random_range(0.0..tx.burst_period);
    let t_end = t_start + n as f64 / fs;
    let first = ((t_start - phase0 - tx.burst_len) / tx.burst_period).floor() as i64;
    let last = ((t_end - phase0) / tx.burst_period).ceil() as i64;

    // Symbol impulses, then RRC shaping in the frequency domain.
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    let mut bursts = Vec::new();
    for k in first..=last {
        let tb = phase0 + k as f64 * tx.burst_period;
        if tb + tx.burst_len <= t_start || tb >= t_end {
            continue;
        }
        bursts.push((k, tb));
        let mut rng = substream(seed, Purpose::Symbols, index, k as u64);
        let s0 = ((tb - t_start) * fs).round() as i64;
        let count = (tx.burst_len * rs).ceil() as i64 + 8;
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for m in -4..count {
            let i = s0 + (m as f64 * sps) as i64;
            let sym = Complex64::new(
                if rng.random::<bool>() { h } else { -h },
                if rng.random::<bool>() { h } else { -h },
            );
            if (0..n as i64).contains(&i) {
                x[i as usize] = sym;
            }
        }
    }
    dsp::fft(&mut x);
    for (k, v) in x.iter_mut().enumerate() {
        *v *= sps * rrc(dsp::bin_frequency(k, n, fs), rs) / n as f64;
    }
    dsp::ifft(&mut x);

    // Envelope, IQ imbalance and the move to the burst carrier.
    let imp = &tx.impairments;
    let g = 10f64.powf(imp.iq_gain_imbalance / 20.0);
    let (ss, cs) = imp.iq_phase_skew.to_radians().sin_cos();
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    for (k, tb) in bursts {
        let f_off = tx.carrier(k) - f_capture + imp.cfo + cfo_jitter;
        let i0 = (((tb - t_start) * fs).floor().max(0.0)) as usize;
        let i1 = ((((tb + tx.burst_len) - t_start) * fs).ceil().min(n as f64)) as usize;
        for i in i0..i1 {
            let tau = t_start + i as f64 / fs - tb;
            let env = ramp(tau, imp.rise_time) * ramp(tx.burst_len - tau, imp.rise_time);
            if env == 0.0 {
                continue;
            }
            let s = x[i];
            let skewed = Complex64::new(s.re, g * (s.im * cs - s.re * ss));
            y[i] = env * skewed * Complex64::from_polar(1.0, TAU * f_off * tau);
        }
    }
    dsp::fft(&mut y);
    y
}

/// Received signal of one transmitter at one sensor: the transmit spectrum
/// delayed by `delay` (including the carrier phase), scaled, cropped to the
/// `n` samples after the padding.
fn receive(
    spec: &[Complex64],
    delay: f64,
    amplitude: f64,
    fs: f64,
    f_capture: f64,
    n: usize,
) -> Vec<Complex64> {
    let len = spec.len();
    let mut x: Vec<Complex64> = spec
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let f = f_capture + dsp::bin_frequency(k, len, fs);
            v * Complex64::from_polar(1.0, -TAU * (f * delay).rem_euclid(1.0))
        })
        .collect();
    dsp::ifft(&mut x);
    let scale = amplitude / len as f64;
    x[DWELL_PAD..DWELL_PAD + n]
        .iter()
        .map(|v| v * scale)
        .collect()
}

/// Transmitters audible in a dwell: `(stream index, tx, position, cfo jitter)`.
struct Emitter<'a> {
    index: u64,
    tx: &'a TxSpec,
    position: WorldPoint,
    cfo_jitter: f64,
}

/// Render one dwell for the given sensors. `t` is the true dwell start.
fn render_dwell(
    seed: u64,
    dwell: u64,
    t: f64,
    emitters: &[Emitter<'_>],
    sensors: &[(SensorSite, f64, f64)],
    fs: f64,
    noise_sigma: f64,
) -> Vec<RFCapture> {
    let n = (DECISION_TIME * fs).round() as usize;
    let len = dsp::next_fast_len(n + 2 * DWELL_PAD);
    let t_ext = t - DWELL_PAD as f64 / fs;
    let half = fs / 2.0;
    let mut out: Vec<RFCapture> = sensors
        .iter()
        .map(|(site, f_center, offset)| {
            RFCapture::new(
                vec![Complex64::new(0.0, 0.0); n],
                fs,
                *f_center,
                t + offset,
                site.id,
            )
        })
        .collect();
    for e in emitters {
        let (lo, hi) = e.tx.carrier_span();
        let bw2 = e.tx.bandwidth / 2.0;
        let mut spectra: BTreeMap<u64, Vec<Complex64>> = BTreeMap::new();
        for ((site, f_center, _), cap) in sensors.iter().zip(out.iter_mut()) {
            if lo - bw2 < f_center - half || hi + bw2 > f_center + half {
                continue;
            }
            let spec = spectra.entry(f_center.to_bits()).or_insert_with(|| {
                transmit_spectrum(seed, e.index, e.tx, t_ext, len, fs, *f_center, e.cfo_jitter)
            });
            let range = e.position.distance(&site.position);
            let amp = 10f64.powf(e.tx.tx_power / 20.0) * RF_REFERENCE_RANGE / range;
            let rx = receive(spec, range / SPEED_OF_LIGHT, amp, fs, *f_center, n);
            for (a, b) in cap.samples.iter_mut().zip(rx) {
                *a += b;
            }
        }
    }
    if noise_sigma > 0.0 {
        let s = noise_sigma * std::f64::consts::FRAC_1_SQRT_2;
        for cap in &mut out {
            let mut rng = substream(seed, Purpose::RfNoise, dwell, cap.sensor_id as u64);
            for v in &mut cap.samples {
                *v += Complex64::new(s * normal(&mut rng), s * normal(&mut rng));
            }
        }
    }
    out
}

fn band_collisions(scn: &Scenario) -> Vec<SimWarning> {
    let mut out = Vec::new();
    for id in scn.sensors.ids() {
        let audible: Vec<&TargetSpec> = scn
            .targets
            .iter()
            .filter(|t| scn.sensor_group(t).contains(&id))
            .collect();
        for (i, a) in audible.iter().enumerate() {
            for b in &audible[i + 1..] {
                let (alo, ahi) = a.tx.carrier_span();
                let (blo, bhi) = b.tx.carrier_span();
                let overlap = alo - a.tx.bandwidth / 2.0 < bhi + b.tx.bandwidth / 2.0
                    && blo - b.tx.bandwidth / 2.0 < ahi + a.tx.bandwidth / 2.0;
                if overlap {
                    log::warn!(
                        "sensor {id}: {} and {} overlap in frequency",
                        a.device,
                        b.device
                    );
                    out.push(SimWarning::BandCollision {
                        sensor: id,
                        a: a.device.clone(),
                        b: b.device.clone(),
                    });
                }
            }
        }
    }
    out
}

/// True TDOAs per dwell: for every target, the pairs (first sensor of its
/// group, other) at the target position at the dwell start.
pub fn rf_truth(scn: &Scenario) -> Vec<RfTruth> {
    let mut out = Vec::new();
    for t in scn.dwell_times() {
        for tgt in &scn.targets {
            let group = scn.sensor_group(tgt);
            let p = tgt.position_at(t);
            for &other in group.iter().skip(1) {
                let (a, b) = (
                    scn.sensors.position(group[0]).unwrap(),
                    scn.sensors.position(other).unwrap(),
                );
                out.push(RfTruth {
                    t,
                    pair: (group[0], other),
                    delta_tau: (p.distance(&a) - p.distance(&b)) / SPEED_OF_LIGHT,
                    target: tgt.device.clone(),
                });
            }
        }
    }
    out
}

/// Render every dwell in time order, handing each dwell's captures (sensor
/// id order) to `sink`. Dwells are rendered in parallel chunks; the output
/// sequence does not depend on the thread count.
pub fn generate_rf_streaming(
    scn: &Scenario,
    mut sink: impl FnMut(Vec<RFCapture>) -> Result<(), SimError>,
) -> Result<Vec<SimWarning>, SimError> {
    scn.validate()?;
    let warnings = band_collisions(scn);
    let mut sensors: Vec<(SensorSite, f64, f64)> = scn
        .sensors
        .sensors
        .iter()
        .filter_map(|s| scn.tuning(s.id).map(|f| (*s, f, scn.rf_offset(s.id))))
        .collect();
    sensors.sort_by_key(|s| s.0.id);
    let times = scn.dwell_times();
    let render = |(k, &t): (usize, &f64)| -> Vec<RFCapture> {
        let emitters: Vec<Emitter<'_>> = scn
            .targets
            .iter()
            .enumerate()
            .map(|(i, tgt)| Emitter {
                index: i as u64,
                tx: &tgt.tx,
                position: tgt.position_at(t),
                cfo_jitter: 0.0,
            })
            .collect();
        render_dwell(
            scn.seed,
            k as u64,
            t,
            &emitters,
            &sensors,
            scn.rf.capture_rate,
            scn.rf.noise_sigma,
        )
    };
    let indexed: Vec<(usize, &f64)> = times.iter().enumerate().collect();
    for chunk in indexed.chunks(DWELL_CHUNK) {
        #[cfg(feature = "parallel")]
        let rendered: Vec<Vec<RFCapture>> = {
            use rayon::prelude::*;
            chunk.par_iter().copied().map(render).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let rendered: Vec<Vec<RFCapture>> = chunk.iter().copied().map(render).collect();
        for caps in rendered {
            sink(caps)?;
        }
    }
    Ok(warnings)
}

pub fn generate_rf(scn: &Scenario) -> Result<RfOutput, SimError> {
    let mut captures = Vec::new();
    let warnings = generate_rf_streaming(scn, |caps| {
        captures.extend(caps);
        Ok(())
    })?;
    Ok(RfOutput {
        captures,
        truth: rf_truth(scn),
        warnings,
    })
}

/// Dwells from a static transmitter of class `device` for fingerprint
/// training or testing. Each `pass` draws its own range (150–450 m), CFO
/// drift (±300 Hz) and burst timing, mimicking separate collection passes.
pub fn fingerprint_pass(
    device: &str,
    pass: u32,
    dwells: usize,
    seed: u64,
) -> Result<Vec<RFCapture>, SimError> {
    let tx = device_tx(device)
        .ok_or_else(|| SimError::InvalidScenario(format!("unknown device {device}")))?;
    let mut rng = substream(
        seed,
        Purpose::Pass,
        pass as u64,
        device.bytes().map(u64::from).sum(),
    );
    let range = rng.random_range(150.0..450.0);
    let cfo_jitter = rng.random_range(-300.0..300.0);
    let site = SensorSite {
        id: 100,
        position: WorldPoint::new(0.0, 0.0, 2.0),
    };
    let position = WorldPoint::new(0.0, range, ALTITUDE);
    let index = 1000 + pass as u64 * 16 + device.len() as u64;
    let render = |k: usize| {
        let t = 0.1 * k as f64;
        let e = [Emitter {
            index,
            tx: &tx,
            position,
            cfo_jitter,
        }];
        let stream_seed = seed ^ (pass as u64) << 40;
        render_dwell(
            stream_seed,
            k as u64,
            t,
            &e,
            &[(site, tx.center_freq, 0.0)],
            25e6,
            1.0,
        )
        .remove(0)
    };
    #[cfg(feature = "parallel")]
    let out = {
        use rayon::prelude::*;
        (0..dwells).into_par_iter().map(render).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let out = (0..dwells).map(render).collect();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

pub fn write_eo_truth(path: &Path, truth: &[EoTruth]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)?;
    if truth.is_empty() {
        w.write_record(["t", "target", "u", "v"])?;
    }
    for r in truth {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_eo_truth(path: &Path) -> Result<Vec<EoTruth>, SimError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Serialize, Deserialize)]
struct RfTruthRow {
    t: f64,
    pair: String,
    delta_tau: f64,
    target: String,
}

pub fn write_rf_truth(path: &Path, truth: &[RfTruth]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)?;
    if truth.is_empty() {
        w.write_record(["t", "pair", "delta_tau", "target"])?;
    }
    for r in truth {
        w.serialize(RfTruthRow {
            t: r.t,
            pair: format!("{}-{}", r.pair.0, r.pair.1),
            delta_tau: r.delta_tau,
            target: r.target.clone(),
        })?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_rf_truth(path: &Path) -> Result<Vec<RfTruth>, SimError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<RfTruthRow>()
        .map(|row| {
            let row = row?;
            let pair = row
                .pair
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| SimError::InvalidScenario(format!("bad pair {:?}", row.pair)))?;
            Ok(RfTruth {
                t: row.t,
                pair,
                delta_tau: row.delta_tau,
                target: row.target,
            })
        })
        .collect()
}

/// Files written by [`write_scenario`], relative to the output directory.
pub mod layout {
    pub const SCENARIO: &str = "scenario.toml";
    pub const FRAMES: &str = "frames.cube";
    pub const EO_TRUTH: &str = "eo_truth.csv";
    pub const RF_TRUTH: &str = "rf_truth.csv";
    pub const IQ_DIR: &str = "iq";

    pub fn iq_file(sensor: u32) -> String {
        format!("sensor_{sensor}.iq")
    }
}

#[derive(Debug, Clone, Default)]
pub struct WriteSummary {
    pub frames: usize,
    pub iq_files: usize,
    pub dwells: usize,
    pub warnings: Vec<SimWarning>,
}

/// Generate everything for `scn` into `dir`: the scenario file, a quantized
/// frame cube, truth CSVs and one multi-record IQ file per tuned sensor.
pub fn write_scenario(scn: &Scenario, dir: &Path) -> Result<WriteSummary, SimError> {
    fs::create_dir_all(dir.join(layout::IQ_DIR)).map_err(io_err(dir))?;
    let scn_path = dir.join(layout::SCENARIO);
    let text = scn.to_toml()?;
    fs::File::create(&scn_path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(io_err(&scn_path))?;

    let eo = generate_eo(scn)?;
    eo.frames
        .quantized()
        .write_cube(&dir.join(layout::FRAMES))?;
    write_eo_truth(&dir.join(layout::EO_TRUTH), &eo.truth)?;
    write_rf_truth(&dir.join(layout::RF_TRUTH), &rf_truth(scn))?;

    let mut writers: BTreeMap<u32, IqWriter> = BTreeMap::new();
    for id in scn.sensors.ids() {
        if scn.tuning(id).is_some() {
            let path = dir.join(layout::IQ_DIR).join(layout::iq_file(id));
            writers.insert(id, IqWriter::create(&path)?);
        }
    }
    let mut dwells = 0;
    let rf_warnings = generate_rf_streaming(scn, |caps| {
        dwells += 1;
        for cap in caps {
            writers
                .get_mut(&cap.sensor_id)
                .expect("writer per tuned sensor")
                .write(&cap)?;
        }
        Ok(())
    })?;
    let iq_files = writers.len();
    for w in writers.into_values() {
        w.finish()?;
    }
    let mut warnings = eo.warnings;
    warnings.extend(rf_warnings);
    Ok(WriteSummary {
        frames: eo.frames.len(),
        iq_files,
        dwells,
        warnings,
    })
}

impl From<std::io::Error> for SimError {
    fn from(source: std::io::Error) -> Self {
        SimError::Io {
            path: String::new(),
            source,
        }
    }
}

/// Frames as matrices, for callers that work on `height×width` images.
pub fn frame_matrix(stack: &FrameStack, k: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(stack.height, stack.width, &stack.frames[k])
}
