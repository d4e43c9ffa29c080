//! Pixel-plane detections from RPCA sparse components.
//!
//! Pixel `(row, col)` covers `[col, col+1) × [row, row+1)`; its center is at
//! `(u, v) = (col + 0.5, row + 0.5)`.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scale factor turning the median absolute deviation into a Gaussian σ.
pub const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Debug, Error)]
pub enum EoError {
    #[error("frame has zero spread but non-zero entries")]
    DegenerateFrame,
    #[error("frame contains non-finite values")]
    NonFinite,
    #[error("invalid mask parameters: {0}")]
    InvalidParams(String),
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSource {
    EoRpca,
    EoExternal,
    RfProjected,
}

impl fmt::Display for DetectionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EoRpca => "eo_rpca",
            Self::EoExternal => "eo_external",
            Self::RfProjected => "rf_projected",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D {
    pub t: f64,
    pub u: f64,
    pub v: f64,
    pub area: usize,
    /// Only set for detections extracted from a sparse component.
    pub contrast: Option<Contrast>,
    pub source: DetectionSource,
    pub score: f64,
    /// Device label carried by external or RF-derived detections.
    pub label: Option<String>,
}

impl Detection2D {
    pub fn distance(&self, other: &Detection2D) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskParams {
    pub k_sigma: f64,
    pub min_area: usize,
    pub max_area: usize,
    pub dedup_radius: f64,
    /// Components whose mean `|S|` falls below this are dropped. Guards
    /// against faint ghosts that RPCA leaves where a slow target sat earlier
    /// or later in the batch; with an almost-empty sparse frame the robust
    /// threshold alone is zero.
    pub min_score: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            k_sigma: 3.0,
            min_area: 1,
            max_area: 400,
            dedup_radius: 5.0,
            min_score: 0.01,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<(), EoError> {
        if !(self.k_sigma > 0.0) {
            return Err(EoError::InvalidParams(format!(
                "k_sigma {} must be > 0",
                self.k_sigma
            )));
        }
        if self.min_area == 0 || self.min_area > self.max_area {
            return Err(EoError::InvalidParams(format!(
                "need 0 < min_area ({}) <= max_area ({})",
                self.min_area, self.max_area
            )));
        }
        if !(self.dedup_radius >= 0.0) {
            return Err(EoError::InvalidParams("dedup_radius must be >= 0".into()));
        }
        if !(self.min_score >= 0.0 && self.min_score.is_finite()) {
            return Err(EoError::InvalidParams("min_score must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `1.4826 · median(|S − median(S)|)`.
pub fn robust_sigma(s: &DMatrix<f64>) -> f64 {
    let m = median_of(s.iter().copied().collect());
    MAD_TO_SIGMA * median_of(s.iter().map(|x| (x - m).abs()).collect())
}

/// Threshold, label 8-connected components, and summarize each component.
///
/// With `σ_rob = 0` (more than half the pixels share one value, as in an
/// almost-empty sparse frame) the threshold is zero, so every pixel strictly
/// above (below) zero is foreground. A constant non-zero frame has no
/// meaningful foreground and is reported as degenerate.
pub fn extract_detections(
    s: &DMatrix<f64>,
    t: f64,
    mode: Contrast,
    p: &MaskParams,
) -> Result<Vec<Detection2D>, EoError> {
    p.validate()?;
    if s.iter().any(|x| !x.is_finite()) {
        return Err(EoError::NonFinite);
    }
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let sigma = robust_sigma(s);
    if sigma == 0.0 {
        let first = s[(0, 0)];
        if first != 0.0 && s.iter().all(|&x| x == first) {
            return Err(EoError::DegenerateFrame);
        }
    }
    let threshold = p.k_sigma * sigma;
    let (rows, cols) = s.shape();
    let on = |r: usize, c: usize| match mode {
        Contrast::Positive => s[(r, c)] > threshold,
        Contrast::Negative => s[(r, c)] < -threshold,
    };

    let mut label = vec![usize::MAX; rows * cols];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    // Row-major scan: components are discovered in order of their first
    // (v, u) pixel.
    for r0 in 0..rows {
        for c0 in 0..cols {
            if label[r0 * cols + c0] != usize::MAX || !on(r0, c0) {
                continue;
            }
            let id = out.len();
            label[r0 * cols + c0] = id;
            stack.push((r0, c0));
            let (mut area, mut wsum, mut su, mut sv, mut abs_sum) = (0usize, 0.0, 0.0, 0.0, 0.0);
            while let Some((r, c)) = stack.pop() {
                let w = s[(r, c)].abs();
                area += 1;
                wsum += w;
                abs_sum += w;
                su += w * (c as f64 + 0.5);
                sv += w * (r as f64 + 0.5);
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                            continue;
                        }
                        let (rr, cc) = (rr as usize, cc as usize);
                        if label[rr * cols + cc] == usize::MAX && on(rr, cc) {
                            label[rr * cols + cc] = id;
                            stack.push((rr, cc));
                        }
                    }
                }
            }
            out.push(Detection2D {
                t,
                u: su / wsum,
                v: sv / wsum,
                area,
                contrast: Some(mode),
                source: DetectionSource::EoRpca,
                score: abs_sum / area as f64,
                label: None,
            });
        }
    }
    out.retain(|d| d.area >= p.min_area && d.area <= p.max_area && d.score >= p.min_score);
    sort_by_position(&mut out);
    Ok(out)
}

fn sort_by_position(d: &mut [Detection2D]) {
    d.sort_by(|a, b| {
        a.v.total_cmp(&b.v)
            .then(a.u.total_cmp(&b.u))
            .then(b.score.total_cmp(&a.score))
    });
}

/// Union of both lists with greedy suppression: detections are visited by
/// descending score and kept unless a kept detection lies within
/// `dedup_radius`. Output is ordered by `(v, u)`.
pub fn fuse_contrast_detections(
    pos: &[Detection2D],
    neg: &[Detection2D],
    dedup_radius: f64,
) -> Vec<Detection2D> {
    let mut all: Vec<&Detection2D> = pos.iter().chain(neg).collect();
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.v.total_cmp(&b.v))
            .then(a.u.total_cmp(&b.u))
            .then(b.area.cmp(&a.area))
    });
    let mut kept: Vec<Detection2D> = Vec::new();
    for d in all {
        if kept.iter().all(|k| k.distance(d) > dedup_radius) {
            kept.push(d.clone());
        }
    }
    sort_by_position(&mut kept);
    kept
}

/// Suppress near-duplicates within a single list.
pub fn dedup(d: &[Detection2D], radius: f64) -> Vec<Detection2D> {
    fuse_contrast_detections(d, &[], radius)
}

/// Both contrast polarities extracted and fused for one frame.
pub fn detect_frame(s: &DMatrix<f64>, t: f64, p: &MaskParams) -> Result<Vec<Detection2D>, EoError> {
    let pos = extract_detections(s, t, Contrast::Positive, p)?;
    let neg = extract_detections(s, t, Contrast::Negative, p)?;
    Ok(fuse_contrast_detections(&pos, &neg, p.dedup_radius))
}

/// [`detect_frame`] over a sequence of sparse frames; output order follows
/// input order regardless of parallelism.
pub fn detect_frames(
    frames: &[DMatrix<f64>],
    times: &[f64],
    p: &MaskParams,
) -> Result<Vec<Detection2D>, EoError> {
    assert_eq!(frames.len(), times.len(), "one timestamp per frame");
    #[cfg(feature = "parallel")]
    let per_frame: Vec<Result<Vec<Detection2D>, EoError>> = {
        use rayon::prelude::*;
        frames
            .par_iter()
            .zip(times.par_iter())
            .map(|(s, &t)| detect_frame(s, t, p))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_frame: Vec<Result<Vec<Detection2D>, EoError>> = frames
        .iter()
        .zip(times)
        .map(|(s, &t)| detect_frame(s, t, p))
        .collect();
    let mut out = Vec::new();
    for d in per_frame {
        out.extend(d?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ExternalRow {
    t: f64,
    u: f64,
    v: f64,
    score: f64,
    #[serde(default)]
    label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExportRow {
    t: f64,
    u: f64,
    v: f64,
    score: f64,
    label: String,
    contrast: String,
    source: DetectionSource,
    area: usize,
}

/// Externally produced detections (`t,u,v,score,label`). Rows outside the
/// `width × height` frame are dropped; their count is returned.
pub fn ingest_external_detections(
    path: &Path,
    width: u32,
    height: u32,
) -> Result<(Vec<Detection2D>, usize), EoError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    let mut rejected = 0;
    for row in reader.deserialize::<ExternalRow>() {
        let row = row.map_err(|e| EoError::Parse {
            path: path.display().to_string(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let inside = row.u >= 0.0 && row.v >= 0.0 && row.u < width as f64 && row.v < height as f64;
        if !inside || !row.t.is_finite() || !(row.score >= 0.0) {
            rejected += 1;
            continue;
        }
        out.push(Detection2D {
            t: row.t,
            u: row.u,
            v: row.v,
            area: 1,
            contrast: None,
            source: DetectionSource::EoExternal,
            score: row.score,
            label: row.label.filter(|l| !l.is_empty()),
        });
    }
    Ok((out, rejected))
}

pub fn write_detections(path: &Path, dets: &[Detection2D]) -> Result<(), EoError> {
    let mut w = csv::Writer::from_path(path)?;
    if dets.is_empty() {
        w.write_record(["t", "u", "v", "score", "label", "contrast", "source", "area"])?;
    }
    for d in dets {
        w.serialize(ExportRow {
            t: d.t,
            u: d.u,
            v: d.v,
            score: d.score,
            label: d.label.clone().unwrap_or_default(),
            contrast: match d.contrast {
                Some(Contrast::Positive) => "positive".into(),
                Some(Contrast::Negative) => "negative".into(),
                None => String::new(),
            },
            source: d.source,
            area: d.area,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Read a file produced by [`write_detections`].
pub fn read_detections(path: &Path) -> Result<Vec<Detection2D>, EoError> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize::<ExportRow>()
        .map(|row| {
            let row = row.map_err(|e| EoError::Parse {
                path: path.display().to_string(),
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let contrast = match row.contrast.as_str() {
                "positive" => Some(Contrast::Positive),
                "negative" => Some(Contrast::Negative),
                "" => None,
                other => {
                    return Err(EoError::Parse {
                        path: path.display().to_string(),
                        line: 0,
                        msg: format!("unknown contrast {other:?}"),
                    })
                }
            };
            Ok(Detection2D {
                t: row.t,
                u: row.u,
                v: row.v,
                area: row.area,
                contrast,
                source: row.source,
                score: row.score,
                label: (!row.label.is_empty()).then_some(row.label),
            })
        })
        .collect()
}
