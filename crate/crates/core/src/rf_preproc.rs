//! Passive-RF preprocessing: band extraction, hop-center detection, burst
//! segmentation for fingerprinting, and conditioning of streams for TDOA.
//!
//! All filters are applied in the frequency domain with real, symmetric
//! responses, so they are zero-phase: no group delay is introduced and a
//! capture's `t0` carries through unchanged.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use thiserror::Error;

use crate::dsp;

/// Fingerprinting band and sample rate, Hz.
pub const FINGERPRINT_RATE: f64 = 250_000.0;
/// Decision window for fingerprinting and TDOA, seconds.
pub const DECISION_TIME: f64 = 0.0210;
/// Samples per decision window at [`FINGERPRINT_RATE`].
pub const WINDOW_SAMPLES: usize = 5250;
/// Length of a trimmed fingerprint vector.
pub const FINGERPRINT_LEN: usize = 2600;
/// Sample rate of streams prepared for cross-correlation, Hz.
pub const TDOA_RATE: f64 = 10_000_000.0;

/// Passband edge as a fraction of the output rate; the response reaches zero
/// at half the output rate.
const PASS_FRACTION: f64 = 0.45;
/// Edge detector threshold over the noise floor, dB.
const EDGE_THRESHOLD_DB: f64 = 6.0;
/// Occupancy threshold over the median spectral level, dB.
const OCCUPANCY_DB: f64 = 6.0;
const ENERGY_AVERAGE: usize = 32;
const GATE_BLOCK: usize = 1024;

#[derive(Debug, Error)]
pub enum RfError {
    #[error(
        "band {f_target} Hz ± {half_bw} Hz is outside the capture ({f_center} Hz ± {half_fs} Hz)"
    )]
    BandOutOfCapture {
        f_target: f64,
        half_bw: f64,
        f_center: f64,
        half_fs: f64,
    },
    #[error("unsupported rate conversion {from} Hz -> {to} Hz")]
    UnsupportedRate { from: f64, to: f64 },
    #[error("sample rate {fs} Hz is below the required {required} Hz")]
    RateTooLow { fs: f64, required: f64 },
    #[error("window holds {got} samples, need at least {needed}")]
    InsufficientSamples { got: usize, needed: usize },
    #[error("no occupied band above the noise floor")]
    NoSignal,
    #[error("expected a {expected} Hz stream, got {got} Hz")]
    WrongRate { expected: f64, got: f64 },
    #[error("invalid capture: {0}")]
    InvalidCapture(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

/// One sensor's complex baseband record.
#[derive(Debug, Clone, PartialEq)]
pub struct RFCapture {
    pub samples: Vec<Complex64>,
    /// Sample rate, Hz.
    pub fs: f64,
    /// Tuning frequency, Hz.
    pub f_center: f64,
    /// Capture start on the sensor clock, seconds.
    pub t0: f64,
    pub sensor_id: u32,
    /// Sensor clock minus the unified timeline, seconds.
    pub clock_offset: f64,
}

impl RFCapture {
    pub fn new(samples: Vec<Complex64>, fs: f64, f_center: f64, t0: f64, sensor_id: u32) -> Self {
        Self {
            samples,
            fs,
            f_center,
            t0,
            sensor_id,
            clock_offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), RfError> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(RfError::InvalidCapture(format!("sample rate {}", self.fs)));
        }
        if !(self.clock_offset.abs() < 60.0) {
            return Err(RfError::InvalidCapture(format!(
                "clock offset {}",
                self.clock_offset
            )));
        }
        if self
            .samples
            .iter()
            .any(|s| !(s.re.is_finite() && s.im.is_finite()))
        {
            return Err(RfError::InvalidCapture("non-finite sample".into()));
        }
        Ok(())
    }

    /// Capture start on the unified timeline.
    pub fn unified_start(&self) -> f64 {
        self.t0 - self.clock_offset
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    fn with_samples(&self, samples: Vec<Complex64>, fs: f64, f_center: f64) -> Self {
        Self {
            samples,
            fs,
            f_center,
            t0: self.t0,
            sensor_id: self.sensor_id,
            clock_offset: self.clock_offset,
        }
    }
}

/// A trimmed burst ready for device classification.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintVector {
    pub iq: Vec<Complex64>,
    pub fs: f64,
    /// Start of the decision window on the unified timeline, seconds.
    pub window_t: f64,
    pub device_truth: Option<String>,
}

impl FingerprintVector {
    pub fn new(iq: Vec<Complex64>, window_t: f64) -> Self {
        Self {
            iq,
            fs: FINGERPRINT_RATE,
            window_t,
            device_truth: None,
        }
    }
}

fn integer_hz(f: f64) -> Option<u64> {
    let r = f.round();
    (r > 0.0 && (f - r).abs() < 1e-6 && r < 1e15).then_some(r as u64)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Number of input samples used and output samples produced when resampling
/// `n` samples from `fs` to `fs_out` on a common bin grid.
fn resample_lengths(n: usize, fs: f64, fs_out: f64) -> Result<(usize, usize), RfError> {
    let unsupported = || RfError::UnsupportedRate {
        from: fs,
        to: fs_out,
    };
    let (a, b) = (
        integer_hz(fs).ok_or_else(unsupported)?,
        integer_hz(fs_out).ok_or_else(unsupported)?,
    );
    if b > a {
        return Err(unsupported());
    }
    let g = gcd(a, b);
    let step_in = (a / g) as usize;
    let step_out = (b / g) as usize;
    let blocks = n / step_in;
    Ok((blocks * step_in, blocks * step_out))
}

/// Mix `f_target` to DC, low-pass to `bw`, and decimate to a rate of `bw`.
pub fn downconvert_filter_decimate(
    cap: &RFCapture,
    f_target: f64,
    bw: f64,
) -> Result<RFCapture, RfError> {
    let offset = f_target - cap.f_center;
    if offset.abs() + bw / 2.0 > cap.fs / 2.0 + 1e-6 || !(bw > 0.0) {
        return Err(RfError::BandOutOfCapture {
            f_target,
            half_bw: bw / 2.0,
            f_center: cap.f_center,
            half_fs: cap.fs / 2.0,
        });
    }
    let (n_in, n_out) = resample_lengths(cap.samples.len(), cap.fs, bw)?;
    let mut spec = mixed(&cap.samples[..n_in], offset, cap.fs);
    dsp::fft(&mut spec);
    let mut out = select_bins(&spec, n_out, cap.fs, |f| {
        dsp::taper(f.abs(), PASS_FRACTION * bw, 0.5 * bw)
    });
    dsp::ifft(&mut out);
    let scale = 1.0 / n_in as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(cap.with_samples(out, bw, f_target))
}

/// Shift the spectrum so that `f_target` sits at DC, keeping the sample
/// rate. Unlike [`downconvert_filter_decimate`] nothing is discarded.
pub fn retune(cap: &RFCapture, f_target: f64) -> RFCapture {
    let shifted = mixed(&cap.samples, f_target - cap.f_center, cap.fs);
    cap.with_samples(shifted, cap.fs, f_target)
}

fn mixed(x: &[Complex64], offset: f64, fs: f64) -> Vec<Complex64> {
    if offset == 0.0 {
        return x.to_vec();
    }
    let w = -std::f64::consts::TAU * offset / fs;
    x.iter()
        .enumerate()
        .map(|(i, &s)| s * Complex64::from_polar(1.0, w * i as f64))
        .collect()
}

/// Keep the `m` lowest-frequency bins of an `n`-point spectrum, weighted by
/// `response(f)`.
fn select_bins(
    spec: &[Complex64],
    m: usize,
    fs: f64,
    response: impl Fn(f64) -> f64,
) -> Vec<Complex64> {
    let n = spec.len();
    (0..m)
        .map(|j| {
            let k = dsp::narrow_bin(j, m, n);
            spec[k] * response(dsp::bin_frequency(k, n, fs))
        })
        .collect()
}

/// The dominant contiguous run of occupied spectral bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupiedBand {
    /// Power-weighted center, Hz relative to the tuning frequency.
    pub centroid: f64,
    pub low: f64,
    pub high: f64,
    /// Spectral bin width, Hz.
    pub resolution: f64,
}

fn occupied_band(x: &[Complex64], fs: f64) -> Result<OccupiedBand, RfError> {
    const MIN_FFT: usize = 256;
    if x.len() < MIN_FFT {
        return Err(RfError::InsufficientSamples {
            got: x.len(),
            needed: MIN_FFT,
        });
    }
    let mut nfft = 1024usize;
    while nfft > x.len() {
        nfft /= 2;
    }
    let psd = dsp::welch(x, nfft);
    // Natural bin order → ascending frequency.
    let shifted: Vec<(f64, f64)> = (0..nfft)
        .map(|i| {
            let k = (i + nfft / 2) % nfft;
            (dsp::bin_frequency(k, nfft, fs), psd[k])
        })
        .collect();
    // Lower decile rather than median: a wideband emitter may occupy more
    // than half of the bins.
    let floor = noise_floor(&psd);
    let threshold = floor * 10f64.powf(OCCUPANCY_DB / 10.0);
    let mut best: Option<(f64, usize, usize)> = None;
    let mut i = 0;
    while i < nfft {
        if shifted[i].1 > threshold && shifted[i].1 > 0.0 {
            let start = i;
            let mut power = 0.0;
            while i < nfft && shifted[i].1 > threshold {
                power += shifted[i].1;
                i += 1;
            }
            if best.is_none_or(|(p, _, _)| power > p) {
                best = Some((power, start, i));
            }
        } else {
            i += 1;
        }
    }
    let (power, start, end) = best.ok_or(RfError::NoSignal)?;
    let centroid = shifted[start..end].iter().map(|(f, p)| f * p).sum::<f64>() / power;
    let resolution = fs / nfft as f64;
    Ok(OccupiedBand {
        centroid,
        low: shifted[start].0 - resolution / 2.0,
        high: shifted[end - 1].0 + resolution / 2.0,
        resolution,
    })
}

/// Center frequency (absolute, Hz) of the strongest occupied band in the
/// first `window` seconds of the capture.
pub fn detect_hop_center(cap: &RFCapture, window: f64) -> Result<f64, RfError> {
    let n = ((window * cap.fs).round() as usize).min(cap.samples.len());
    let band = occupied_band(&cap.samples[..n], cap.fs)?;
    Ok(cap.f_center + band.centroid)
}

/// Noise floor from the lowest decile of a power profile.
fn noise_floor(power: &[f64]) -> f64 {
    dsp::percentile(power, 0.1)
}

/// Trailing moving average of `|x|²`: entry `i` averages samples
/// `i+1-ENERGY_AVERAGE ..= i` (fewer at the start).
fn moving_power(x: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += x[i].norm_sqr();
        if i >= ENERGY_AVERAGE {
            acc -= x[i - ENERGY_AVERAGE].norm_sqr();
        }
        out.push(acc / (i + 1).min(ENERGY_AVERAGE) as f64);
    }
    out
}

/// Split point `k` in `lo+1..hi` of the segment `power[lo..hi]` that best
/// fits two constant levels (least squares).
fn best_step(power: &[f64], lo: usize, hi: usize) -> usize {
    let hi = hi.min(power.len());
    if hi <= lo + 1 {
        return lo;
    }
    let seg = &power[lo..hi];
    let (mut s1, mut s2) = (vec![0.0; seg.len() + 1], vec![0.0; seg.len() + 1]);
    for (i, p) in seg.iter().enumerate() {
        s1[i + 1] = s1[i] + p;
        s2[i + 1] = s2[i] + p * p;
    }
    let sse = |a: usize, b: usize| {
        let n = (b - a) as f64;
        let m = s1[b] - s1[a];
        (s2[b] - s2[a]) - m * m / n
    };
    let n = seg.len();
    let best = (1..n)
        .map(|k| (sse(0, k) + sse(k, n), k))
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .map_or(0, |(_, k)| k);
    lo + best
}

/// Cut a 250 kHz stream into decision windows and extract one trimmed burst
/// per window that contains a rising edge.
pub fn segment_and_trim(baseband: &RFCapture) -> Result<Vec<FingerprintVector>, RfError> {
    if (baseband.fs - FINGERPRINT_RATE).abs() > 1e-6 {
        return Err(RfError::WrongRate {
            expected: FINGERPRINT_RATE,
            got: baseband.fs,
        });
    }
    let x = &baseband.samples;
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let ma = moving_power(x);
    let floor = noise_floor(&ma[ENERGY_AVERAGE.min(ma.len() - 1)..]);
    let threshold = floor * 10f64.powf(EDGE_THRESHOLD_DB / 10.0);
    let inst: Vec<f64> = x.iter().map(|s| s.norm_sqr()).collect();
    let base_t = baseband.unified_start();
    let mut out = Vec::new();

    for w in 0..x.len() / WINDOW_SAMPLES {
        let start = w * WINDOW_SAMPLES;
        let end = start + WINDOW_SAMPLES;
        let first = start.max(ENERGY_AVERAGE);
        let Some(cross) = (first..end).find(|&i| ma[i] >= threshold && ma[i - 1] < threshold)
        else {
            continue;
        };
        // The average crosses somewhere after the edge enters its window.
        let rise = best_step(
            &inst,
            cross.saturating_sub(ENERGY_AVERAGE).max(start),
            cross + 1,
        );
        let limit = (rise + FINGERPRINT_LEN).min(x.len());
        let mut iq: Vec<Complex64> = x[rise..limit].to_vec();
        // Falling edge: first drop of the moving average below threshold
        // after the burst has been fully inside the averaging window.
        let search_from = (rise + ENERGY_AVERAGE).min(limit);
        if let Some(drop) = (search_from..limit).find(|&i| ma[i] < threshold) {
            let fall = best_step(&inst, drop.saturating_sub(ENERGY_AVERAGE), drop + 1);
            for s in iq.iter_mut().skip(fall.saturating_sub(rise)) {
                *s = Complex64::new(0.0, 0.0);
            }
        }
        iq.resize(FINGERPRINT_LEN, Complex64::new(0.0, 0.0));
        out.push(FingerprintVector::new(
            iq,
            base_t + w as f64 * DECISION_TIME,
        ));
    }
    Ok(out)
}

/// Full fingerprint front end for a wideband capture: locate the strongest
/// occupied band, bring it to a 250 kHz baseband and cut trimmed bursts.
pub fn extract_fingerprints(cap: &RFCapture) -> Result<Vec<FingerprintVector>, RfError> {
    let f = detect_hop_center(cap, cap.duration())?;
    let baseband = downconvert_filter_decimate(cap, f, FINGERPRINT_RATE)?;
    segment_and_trim(&baseband)
}

/// Band-limit to the occupied band, resample to [`TDOA_RATE`], and zero
/// blocks whose energy is within 6 dB of the noise floor.
pub fn prepare_for_tdoa(cap: &RFCapture) -> Result<RFCapture, RfError> {
    if cap.fs < TDOA_RATE - 1e-6 {
        return Err(RfError::RateTooLow {
            fs: cap.fs,
            required: TDOA_RATE,
        });
    }
    let (n_in, n_out) = resample_lengths(cap.samples.len(), cap.fs, TDOA_RATE)?;
    let x = &cap.samples[..n_in];
    let band = match occupied_band(x, cap.fs) {
        Ok(b) => Some(b),
        Err(RfError::NoSignal) | Err(RfError::InsufficientSamples { .. }) => None,
        Err(e) => return Err(e),
    };
    let Some(band) = band else {
        return Ok(cap.with_samples(
            vec![Complex64::new(0.0, 0.0); n_out],
            TDOA_RATE,
            cap.f_center,
        ));
    };
    let mut spec = x.to_vec();
    dsp::fft(&mut spec);
    let (low, high) = (band.low - band.resolution, band.high + band.resolution);
    let ramp = band.resolution;
    let mut out = select_bins(&spec, n_out, cap.fs, |f| {
        let in_band = if f < low {
            dsp::taper(low - f, 0.0, ramp)
        } else if f > high {
            dsp::taper(f - high, 0.0, ramp)
        } else {
            1.0
        };
        in_band * dsp::taper(f.abs(), PASS_FRACTION * TDOA_RATE, 0.5 * TDOA_RATE)
    });
    dsp::ifft(&mut out);
    let scale = 1.0 / n_in as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    gate_blocks(&mut out);
    Ok(cap.with_samples(out, TDOA_RATE, cap.f_center))
}

fn gate_blocks(x: &mut [Complex64]) {
    let energies: Vec<f64> = x
        .chunks(GATE_BLOCK)
        .map(|c| c.iter().map(|s| s.norm_sqr()).sum::<f64>() / c.len() as f64)
        .collect();
    if energies.is_empty() {
        return;
    }
    let threshold = noise_floor(&energies) * 10f64.powf(EDGE_THRESHOLD_DB / 10.0);
    for (chunk, e) in x.chunks_mut(GATE_BLOCK).zip(&energies) {
        if *e < threshold {
            chunk.iter_mut().for_each(|s| *s = Complex64::new(0.0, 0.0));
        }
    }
}

// ---------------------------------------------------------------------------
// IQ record files
// ---------------------------------------------------------------------------

/// Record magic of the IQ file format.
pub const IQ_MAGIC: [u8; 4] = *b"STIQ";
const IQ_HEADER_LEN: usize = 4 + 8 + 8 + 8 + 4 + 8;

/// Append-only writer of IQ records. Each record is a header (magic, fs,
/// f_center, t0, sensor_id, n; little-endian) followed by `n` interleaved
/// `f32` I/Q pairs. A file may hold any number of records.
pub struct IqWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl IqWriter {
    pub fn create(path: &Path) -> Result<Self, RfError> {
        let file = File::create(path).map_err(|source| RfError::Io {
            path: path.into(),
            source,
        })?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.into(),
        })
    }

    pub fn write(&mut self, cap: &RFCapture) -> Result<(), RfError> {
        let mut buf = Vec::with_capacity(IQ_HEADER_LEN + cap.samples.len() * 8);
        buf.extend_from_slice(&IQ_MAGIC);
        buf.extend_from_slice(&cap.fs.to_le_bytes());
        buf.extend_from_slice(&cap.f_center.to_le_bytes());
        buf.extend_from_slice(&cap.t0.to_le_bytes());
        buf.extend_from_slice(&cap.sensor_id.to_le_bytes());
        buf.extend_from_slice(&(cap.samples.len() as u64).to_le_bytes());
        for s in &cap.samples {
            buf.extend_from_slice(&(s.re as f32).to_le_bytes());
            buf.extend_from_slice(&(s.im as f32).to_le_bytes());
        }
        self.out.write_all(&buf).map_err(|source| RfError::Io {
            path: self.path.clone(),
            source,
        })
    }

    pub fn finish(mut self) -> Result<(), RfError> {
        self.out.flush().map_err(|source| RfError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

/// Header of one record plus its payload offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IqRecordInfo {
    pub fs: f64,
    pub f_center: f64,
    pub t0: f64,
    pub sensor_id: u32,
    pub len: u64,
    pub payload_offset: u64,
}

pub struct IqReader {
    input: BufReader<File>,
    path: PathBuf,
}

impl IqReader {
    pub fn open(path: &Path) -> Result<Self, RfError> {
        let file = File::open(path).map_err(|source| RfError::Io {
            path: path.into(),
            source,
        })?;
        Ok(Self {
            input: BufReader::new(file),
            path: path.into(),
        })
    }

    fn format(&self, msg: impl Into<String>) -> RfError {
        RfError::Format {
            path: self.path.clone(),
            msg: msg.into(),
        }
    }

    fn read_header(&mut self) -> Result<Option<IqRecordInfo>, RfError> {
        let mut header = [0u8; IQ_HEADER_LEN];
        let mut got = 0;
        while got < IQ_HEADER_LEN {
            let n = self
                .input
                .read(&mut header[got..])
                .map_err(|source| RfError::Io {
                    path: self.path.clone(),
                    source,
                })?;
            if n == 0 {
                break;
            }
            got += n;
        }
        if got == 0 {
            return Ok(None);
        }
        if got < IQ_HEADER_LEN {
            return Err(self.format("truncated record header"));
        }
        if header[..4] != IQ_MAGIC {
            return Err(self.format("bad record magic"));
        }
        let f64_at = |i: usize| f64::from_le_bytes(header[i..i + 8].try_into().unwrap());
        let offset = self.input.stream_position().map_err(|source| RfError::Io {
            path: self.path.clone(),
            source,
        })?;
        Ok(Some(IqRecordInfo {
            fs: f64_at(4),
            f_center: f64_at(12),
            t0: f64_at(20),
            sensor_id: u32::from_le_bytes(header[28..32].try_into().unwrap()),
            len: u64::from_le_bytes(header[32..40].try_into().unwrap()),
            payload_offset: offset,
        }))
    }

    /// Headers of every record, without reading payloads.
    pub fn index(path: &Path) -> Result<Vec<IqRecordInfo>, RfError> {
        let mut r = Self::open(path)?;
        let mut out = Vec::new();
        while let Some(info) = r.read_header()? {
            r.input
                .seek(SeekFrom::Current((info.len * 8) as i64))
                .map_err(|source| RfError::Io {
                    path: r.path.clone(),
                    source,
                })?;
            out.push(info);
        }
        Ok(out)
    }

    /// Read the record whose header is `info` (from [`IqReader::index`]).
    pub fn read_at(&mut self, info: &IqRecordInfo) -> Result<RFCapture, RfError> {
        self.input
            .seek(SeekFrom::Start(info.payload_offset))
            .map_err(|source| RfError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.read_payload(info)
    }

    fn read_payload(&mut self, info: &IqRecordInfo) -> Result<RFCapture, RfError> {
        let mut bytes = vec![0u8; info.len as usize * 8];
        self.input
            .read_exact(&mut bytes)
            .map_err(|_| self.format("truncated payload"))?;
        let samples = bytes
            .chunks_exact(8)
            .map(|c| {
                let i = f32::from_le_bytes(c[0..4].try_into().unwrap());
                let q = f32::from_le_bytes(c[4..8].try_into().unwrap());
                Complex64::new(i as f64, q as f64)
            })
            .collect();
        Ok(RFCapture::new(
            samples,
            info.fs,
            info.f_center,
            info.t0,
            info.sensor_id,
        ))
    }

    pub fn next_record(&mut self) -> Result<Option<RFCapture>, RfError> {
        match self.read_header()? {
            Some(info) => self.read_payload(&info).map(Some),
            None => Ok(None),
        }
    }

    pub fn read_all(path: &Path) -> Result<Vec<RFCapture>, RfError> {
        let mut r = Self::open(path)?;
        let mut out = Vec::new();
        while let Some(c) = r.next_record()? {
            out.push(c);
        }
        Ok(out)
    }
}
