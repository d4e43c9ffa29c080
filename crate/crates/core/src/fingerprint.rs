//! Device identification from trimmed bursts.
//!
//! The baseline classifier compares four amplitude-invariant features
//! against per-class templates: the RMS-normalized envelope, the
//! mean-removed log spectrum, the 10–90% rise time, and the occupied
//! bandwidth. Any other model can feed the pipeline through
//! [`DeviceClassifier`] or a confidence CSV.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use thiserror::Error;

use crate::dsp;
use crate::rf_preproc::{FingerprintVector, FINGERPRINT_LEN, FINGERPRINT_RATE};

/// Minimum training vectors per class.
pub const MIN_TRAINING: usize = 50;
/// Bands of the coarse log spectrum.
pub const SPECTRUM_BANDS: usize = 64;
/// RMS z-score below which a class is fully confident.
const FREE_SCORE: f64 = 2.0;
const SMOOTHING: usize = 8;
/// Boxcar length applied to the envelope feature. Removes the fading of
/// noise-like modulation so the burst shape dominates the correlation.
const ENVELOPE_SMOOTHING: usize = 32;

#[derive(Debug, Error)]
pub enum FingerprintError {
    #[error("class {label:?} has {got} training vectors, need {needed}")]
    InsufficientData {
        label: String,
        got: usize,
        needed: usize,
    },
    #[error("vector has {got} samples, expected {expected}")]
    WrongLength { got: usize, expected: usize },
    #[error("training vector has no label")]
    Unlabeled,
    #[error("invalid class set: {0}")]
    InvalidClassSet(String),
    #[error("empty confidence stream")]
    EmptyStream,
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },
    #[error("template store: {0}")]
    Store(String),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet {
    labels: Vec<String>,
}

impl ClassSet {
    pub fn new(labels: Vec<String>) -> Result<Self, FingerprintError> {
        if labels.is_empty() {
            return Err(FingerprintError::InvalidClassSet("no labels".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.contains(',') {
                return Err(FingerprintError::InvalidClassSet(format!(
                    "bad label {l:?}"
                )));
            }
            if labels[..i].contains(l) {
                return Err(FingerprintError::InvalidClassSet(format!(
                    "duplicate label {l:?}"
                )));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Default for ClassSet {
    fn default() -> Self {
        Self {
            labels: ["IF1200", "Mavic", "Phantom", "m600"]
                .map(String::from)
                .to_vec(),
        }
    }
}

/// Per-class confidences in `[0, 1]`; they need not sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector {
    pub t: f64,
    pub conf: Vec<(String, f64)>,
}

impl ConfidenceVector {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.conf.iter().find(|(l, _)| l == label).map(|(_, c)| *c)
    }

    /// Label with the highest confidence; ties go to the earlier class.
    pub fn argmax(&self) -> Option<(&str, f64)> {
        self.conf
            .iter()
            .fold(None, |best: Option<(&str, f64)>, (l, c)| match best {
                Some((_, b)) if *c <= b => best,
                _ => Some((l.as_str(), *c)),
            })
    }
}

pub trait DeviceClassifier {
    fn classes(&self) -> &ClassSet;
    fn classify(&self, v: &FingerprintVector) -> ConfidenceVector;
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    /// `|x|` divided by the RMS of `x`, boxcar-smoothed.
    pub envelope: Vec<f64>,
    /// Band powers in dB, mean removed.
    pub log_spectrum: Vec<f64>,
    /// 10–90% rise time, seconds.
    pub rise_time: f64,
    /// Width holding the central 98% of power, Hz.
    pub occupied_bw: f64,
}

pub fn features(iq: &[Complex64]) -> Features {
    let n = iq.len();
    let rms = (iq.iter().map(|s| s.norm_sqr()).sum::<f64>() / n.max(1) as f64).sqrt();
    let envelope: Vec<f64> = if rms > 0.0 {
        iq.iter().map(|s| s.norm() / rms).collect()
    } else {
        vec![0.0; n]
    };

    let mut spec = iq.to_vec();
    dsp::fft(&mut spec);
    // Ascending frequency.
    let power: Vec<f64> = (0..n)
        .map(|i| spec[(i + n / 2) % n.max(1)].norm_sqr())
        .collect();
    let total: f64 = power.iter().sum();
    let eps = 1e-12 * total.max(f64::MIN_POSITIVE);
    let mut log_spectrum: Vec<f64> = (0..SPECTRUM_BANDS)
        .map(|b| {
            let (lo, hi) = (
                b * n / SPECTRUM_BANDS,
                ((b + 1) * n / SPECTRUM_BANDS).max(b * n / SPECTRUM_BANDS + 1),
            );
            let p = power[lo..hi.min(n)].iter().sum::<f64>() / (hi - lo) as f64;
            10.0 * (p + eps).log10()
        })
        .collect();
    let mean = log_spectrum.iter().sum::<f64>() / SPECTRUM_BANDS as f64;
    log_spectrum.iter_mut().for_each(|v| *v -= mean);

    let occupied_bw = if total > 0.0 {
        let mut acc = 0.0;
        let (mut lo, mut hi) = (None, 0);
        for (i, p) in power.iter().enumerate() {
            acc += p;
            if lo.is_none() && acc >= 0.01 * total {
                lo = Some(i);
            }
            if acc <= 0.99 * total {
                hi = i + 1;
            }
        }
        (hi.saturating_sub(lo.unwrap_or(0)) + 1) as f64 * FINGERPRINT_RATE / n as f64
    } else {
        0.0
    };

    Features {
        rise_time: rise_time(&envelope),
        envelope: centered_boxcar(&envelope, ENVELOPE_SMOOTHING),
        log_spectrum,
        occupied_bw,
    }
}

fn centered_boxcar(x: &[f64], len: usize) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    let half = len / 2;
    (0..x.len())
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(half), (i + len - half).min(x.len()));
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

fn rise_time(envelope: &[f64]) -> f64 {
    let n = envelope.len();
    if n == 0 {
        return 0.0;
    }
    let mut smooth = Vec::with_capacity(n);
    let mut acc = 0.0;
    for i in 0..n {
        acc += envelope[i];
        if i >= SMOOTHING {
            acc -= envelope[i - SMOOTHING];
        }
        smooth.push(acc / (i + 1).min(SMOOTHING) as f64);
    }
    let max = smooth.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    let plateau = dsp::median(
        &smooth
            .iter()
            .copied()
            .filter(|&v| v > 0.5 * max)
            .collect::<Vec<_>>(),
    );
    let Some(i10) = smooth.iter().position(|&v| v >= 0.1 * plateau) else {
        return 0.0;
    };
    let i90 = smooth[i10..]
        .iter()
        .position(|&v| v >= 0.9 * plateau)
        .map_or(0, |k| k);
    i90 as f64 / FINGERPRINT_RATE
}

fn correlation_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 1.0;
    }
    1.0 - sab / (saa * sbb).sqrt()
}

fn rms_distance(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTemplate {
    pub label: String,
    pub envelope: Vec<f64>,
    pub log_spectrum: Vec<f64>,
    pub rise_time: f64,
    pub occupied_bw: f64,
    /// Spreads of: envelope distance, spectrum distance, rise time,
    /// occupied bandwidth.
    pub sigma: [f64; 4],
}

impl ClassTemplate {
    /// Per-feature normalized deviations of `f` from this template.
    pub fn z_scores(&self, f: &Features) -> [f64; 4] {
        [
            correlation_distance(&f.envelope, &self.envelope) / self.sigma[0],
            rms_distance(&f.log_spectrum, &self.log_spectrum) / self.sigma[1],
            (f.rise_time - self.rise_time) / self.sigma[2],
            (f.occupied_bw - self.occupied_bw) / self.sigma[3],
        ]
    }

    /// RMS of the per-feature z-scores.
    pub fn score(&self, f: &Features) -> f64 {
        (self.z_scores(f).iter().map(|z| z * z).sum::<f64>() / 4.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTemplates {
    pub classes: ClassSet,
    pub templates: Vec<ClassTemplate>,
}

/// Map a template score to `[0, 1]`: full confidence up to two normalized
/// units, Gaussian fall-off beyond.
pub fn squash(score: f64) -> f64 {
    let excess = (score - FREE_SCORE).max(0.0);
    (-0.5 * excess * excess).exp()
}

fn lexicographic(a: &[Complex64], b: &[Complex64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im));
        if o != Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

/// Build one template per class in `classes`. Reductions run over a
/// canonical ordering of the vectors, so the result does not depend on the
/// input order.
pub fn train_templates(
    data: &[FingerprintVector],
    classes: &ClassSet,
) -> Result<ClassTemplates, FingerprintError> {
    let mut per_class: Vec<Vec<&FingerprintVector>> = vec![Vec::new(); classes.len()];
    for v in data {
        if v.iq.len() != FINGERPRINT_LEN {
            return Err(FingerprintError::WrongLength {
                got: v.iq.len(),
                expected: FINGERPRINT_LEN,
            });
        }
        let label = v
            .device_truth
            .as_deref()
            .ok_or(FingerprintError::Unlabeled)?;
        if let Some(i) = classes.index(label) {
            per_class[i].push(v);
        }
    }
    let mut templates = Vec::with_capacity(classes.len());
    for (label, mut vs) in classes.labels().iter().zip(per_class) {
        if vs.len() < MIN_TRAINING {
            return Err(FingerprintError::InsufficientData {
                label: label.clone(),
                got: vs.len(),
                needed: MIN_TRAINING,
            });
        }
        vs.sort_by(|a, b| lexicographic(&a.iq, &b.iq));
        let feats: Vec<Features> = vs.iter().map(|v| features(&v.iq)).collect();
        let k = feats.len() as f64;
        let mean_vec = |get: &dyn Fn(&Features) -> &Vec<f64>| -> Vec<f64> {
            let len = get(&feats[0]).len();
            let mut m = vec![0.0; len];
            for f in &feats {
                for (a, b) in m.iter_mut().zip(get(f)) {
                    *a += b;
                }
            }
            m.iter_mut().for_each(|a| *a /= k);
            m
        };
        let envelope = mean_vec(&|f| &f.envelope);
        let log_spectrum = mean_vec(&|f| &f.log_spectrum);
        let rise = feats.iter().map(|f| f.rise_time).sum::<f64>() / k;
        let obw = feats.iter().map(|f| f.occupied_bw).sum::<f64>() / k;
        let rms =
            |vals: &mut dyn Iterator<Item = f64>| (vals.map(|x| x * x).sum::<f64>() / k).sqrt();
        let sigma = [
            rms(&mut feats
                .iter()
                .map(|f| correlation_distance(&f.envelope, &envelope)))
            .max(1e-3),
            rms(&mut feats
                .iter()
                .map(|f| rms_distance(&f.log_spectrum, &log_spectrum)))
            .max(0.1),
            rms(&mut feats.iter().map(|f| f.rise_time - rise)).max(1.0 / FINGERPRINT_RATE),
            rms(&mut feats.iter().map(|f| f.occupied_bw - obw))
                .max(0.01 * obw.abs())
                .max(FINGERPRINT_RATE / FINGERPRINT_LEN as f64),
        ];
        templates.push(ClassTemplate {
            label: label.clone(),
            envelope,
            log_spectrum,
            rise_time: rise,
            occupied_bw: obw,
            sigma,
        });
    }
    Ok(ClassTemplates {
        classes: classes.clone(),
        templates,
    })
}

impl DeviceClassifier for ClassTemplates {
    fn classes(&self) -> &ClassSet {
        &self.classes
    }

    fn classify(&self, v: &FingerprintVector) -> ConfidenceVector {
        classify(v, self)
    }
}

pub fn classify(v: &FingerprintVector, tpl: &ClassTemplates) -> ConfidenceVector {
    let f = features(&v.iq);
    ConfidenceVector {
        t: v.window_t,
        conf: tpl
            .templates
            .iter()
            .map(|c| (c.label.clone(), squash(c.score(&f))))
            .collect(),
    }
}

/// Per-label arithmetic mean, in the label order of the first vector.
pub fn average_confidence(
    stream: &[ConfidenceVector],
) -> Result<Vec<(String, f64)>, FingerprintError> {
    let first = stream.first().ok_or(FingerprintError::EmptyStream)?;
    Ok(first
        .conf
        .iter()
        .map(|(label, _)| {
            let vals: Vec<f64> = stream.iter().filter_map(|c| c.get(label)).collect();
            (label.clone(), vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Confidence CSV
// ---------------------------------------------------------------------------

/// Read `t,<label>,<label>,...` rows. Values are clamped to `[0, 1]`; the
/// number of clamped values is returned alongside. Output is sorted by `t`.
pub fn ingest_external_confidences(
    path: &Path,
) -> Result<(Vec<ConfidenceVector>, usize), FingerprintError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let parse_err = |line: u64, msg: String| FingerprintError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    if headers.get(0) != Some("t") {
        return Err(parse_err(1, "first column must be t".into()));
    }
    let labels: Vec<String> = headers.iter().skip(1).map(String::from).collect();
    let mut out = Vec::new();
    let mut clamped = 0;
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, got {}", headers.len(), rec.len()),
            ));
        }
        let num = |i: usize| -> Result<f64, FingerprintError> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("field {i}: {e}")))
        };
        let t = num(0)?;
        let mut conf = Vec::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            let raw = num(i + 1)?;
            if raw.is_nan() {
                return Err(parse_err(line, format!("{label}: NaN confidence")));
            }
            let c = raw.clamp(0.0, 1.0);
            if c != raw {
                clamped += 1;
                log::warn!(
                    "{}: line {line}: {label} confidence {raw} clamped to {c}",
                    path.display()
                );
            }
            conf.push((label.clone(), c));
        }
        out.push(ConfidenceVector { t, conf });
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok((out, clamped))
}

pub fn write_confidences(
    path: &Path,
    classes: &ClassSet,
    stream: &[ConfidenceVector],
) -> Result<(), FingerprintError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(classes.labels().iter().cloned());
    w.write_record(&header)?;
    for c in stream {
        let mut row = vec![c.t.to_string()];
        row.extend(
            classes
                .labels()
                .iter()
                .map(|l| c.get(l).unwrap_or(0.0).to_string()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Template store
// ---------------------------------------------------------------------------

const STORE_MAGIC: [u8; 4] = *b"STFT";
const STORE_VERSION: u32 = 1;

impl ClassTemplates {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&STORE_MAGIC);
        b.extend_from_slice(&STORE_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.templates.len() as u32).to_le_bytes());
        let put_vec = |b: &mut Vec<u8>, v: &[f64]| {
            b.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                b.extend_from_slice(&x.to_le_bytes());
            }
        };
        for t in &self.templates {
            b.extend_from_slice(&(t.label.len() as u32).to_le_bytes());
            b.extend_from_slice(t.label.as_bytes());
            put_vec(&mut b, &t.envelope);
            put_vec(&mut b, &t.log_spectrum);
            put_vec(&mut b, &[t.rise_time, t.occupied_bw]);
            put_vec(&mut b, &t.sigma);
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FingerprintError> {
        let bad = |m: &str| FingerprintError::Store(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], FingerprintError> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != STORE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = u32_of(take(4)?);
        if version != STORE_VERSION {
            return Err(FingerprintError::Store(format!(
                "unsupported schema version {version}"
            )));
        }
        let count = u32_of(take(4)?) as usize;
        let mut templates = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let len = u32_of(take(4)?) as usize;
            let label =
                String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("label not UTF-8"))?;
            let mut vecs = Vec::with_capacity(4);
            for _ in 0..4 {
                let n = u32_of(take(4)?) as usize;
                let raw = take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
                vecs.push(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect::<Vec<f64>>(),
                );
            }
            if vecs[2].len() != 2 || vecs[3].len() != 4 {
                return Err(bad("malformed scalar block"));
            }
            templates.push(ClassTemplate {
                label,
                envelope: vecs[0].clone(),
                log_spectrum: vecs[1].clone(),
                rise_time: vecs[2][0],
                occupied_bw: vecs[2][1],
                sigma: [vecs[3][0], vecs[3][1], vecs[3][2], vecs[3][3]],
            });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let classes = ClassSet::new(templates.iter().map(|t| t.label.clone()).collect())?;
        Ok(Self { classes, templates })
    }

    pub fn save(&self, path: &Path) -> Result<(), FingerprintError> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, FingerprintError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
