//! Pixel-plane multi-target tracking over composite EO and RF detections.
//!
//! Each EO frame is one scan: tracks are predicted with a constant-velocity
//! model, gated by Mahalanobis distance, associated by minimum-cost
//! assignment, and updated. RF fixes that fall on a frame are processed as
//! a second sub-scan at the same time instant; it never counts misses, and
//! a matched fix keeps a confirmed track alive through EO dropouts.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eo_detection::{Detection2D, DetectionSource};
use crate::geometry::{CameraModel, GeometryError};
use crate::tdoa_loc::RFLocation;

/// χ² quantile, 2 degrees of freedom, p = 0.99.
pub const CHI2_2DOF_99: f64 = 9.21;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no timing offset configured for source {0:?}")]
    MissingOffset(String),
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Mahalanobis gate on d², 2 degrees of freedom.
    pub gate: f64,
    /// White-acceleration intensity, px²/s³.
    pub q: f64,
    pub r_eo: f64,
    pub r_rf: f64,
    pub m_confirm: usize,
    pub n_confirm_window: usize,
    pub n_miss: usize,
    /// Initial velocity standard deviation of new tracks, px/s.
    pub init_velocity_std: f64,
    /// Seconds subtracted from each source's timestamps. Keys are source
    /// names: `eo`, `rf`, `external`.
    pub offsets: BTreeMap<String, f64>,
    /// Fuse RF fixes at all; `false` gives an EO-only run.
    pub use_rf: bool,
    pub rf_as_measurement: bool,
    /// Label-transfer radius when RF fixes are not used as measurements, px.
    pub label_radius_px: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gate: CHI2_2DOF_99,
            q: 10.0,
            r_eo: 1.0,
            r_rf: 5.0,
            m_confirm: 3,
            n_confirm_window: 5,
            n_miss: 15,
            init_velocity_std: 60.0,
            offsets: [
                ("eo".to_string(), 0.0),
                ("rf".to_string(), 0.0),
                ("external".to_string(), 0.0),
            ]
            .into_iter()
            .collect(),
            use_rf: true,
            rf_as_measurement: true,
            label_radius_px: 15.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let positive = [
            ("gate", self.gate),
            ("q", self.q),
            ("r_eo", self.r_eo),
            ("r_rf", self.r_rf),
            ("init_velocity_std", self.init_velocity_std),
            ("label_radius_px", self.label_radius_px),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FusionError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.m_confirm == 0 || self.n_miss == 0 || self.m_confirm > self.n_confirm_window {
            return Err(FusionError::InvalidConfig(
                "need 0 < m_confirm <= n_confirm_window and n_miss > 0".into(),
            ));
        }
        if let Some((k, v)) = self.offsets.iter().find(|(_, v)| !v.is_finite()) {
            return Err(FusionError::InvalidConfig(format!("offset {k} = {v}")));
        }
        Ok(())
    }
}

/// Offset key of a detection source.
pub fn source_key(source: DetectionSource) -> &'static str {
    match source {
        DetectionSource::EoRpca => "eo",
        DetectionSource::EoExternal => "external",
        DetectionSource::RfProjected => "rf",
    }
}

fn is_rf(d: &Detection2D) -> bool {
    d.source == DetectionSource::RfProjected
}

/// Apply per-source offsets and merge into one time-ordered list. At equal
/// corrected times EO detections precede RF; otherwise input order is kept.
pub fn align_timeline(
    streams: &[Vec<Detection2D>],
    offsets: &BTreeMap<String, f64>,
) -> Result<Vec<Detection2D>, FusionError> {
    let mut out = Vec::with_capacity(streams.iter().map(Vec::len).sum());
    for stream in streams {
        for d in stream {
            let key = source_key(d.source);
            let off = offsets
                .get(key)
                .ok_or_else(|| FusionError::MissingOffset(key.to_string()))?;
            out.push(Detection2D {
                t: d.t - off,
                ..d.clone()
            });
        }
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t).then(is_rf(a).cmp(&is_rf(b))));
    Ok(out)
}

/// Project RF fixes into the image. Fixes behind the camera, on its plane,
/// or outside the frame are dropped; their count is returned.
pub fn project_rf_locations(locs: &[RFLocation], cam: &CameraModel) -> (Vec<Detection2D>, usize) {
    let mut out = Vec::with_capacity(locs.len());
    let mut dropped = 0;
    for l in locs {
        match cam.project(&l.position) {
            Ok(px) if px.in_frame => out.push(Detection2D {
                t: l.t,
                u: px.u,
                v: px.v,
                area: 1,
                contrast: None,
                source: DetectionSource::RfProjected,
                score: 1.0,
                label: l.device_label.clone(),
            }),
            Ok(_)
            | Err(GeometryError::BehindCamera { .. })
            | Err(GeometryError::DegenerateProjection { .. }) => dropped += 1,
            Err(e) => {
                log::warn!("projection failed: {e}");
                dropped += 1
            }
        }
    }
    (out, dropped)
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unassigned_rows: Vec<usize>,
    pub unassigned_cols: Vec<usize>,
}

/// Minimum-cost assignment of rows to columns. Pairs whose cost exceeds
/// `gate` (or is not finite) are forbidden. Among assignments using the most
/// admissible pairs, the total cost is minimal.
pub fn hungarian_assign(cost: &DMatrix<f64>, gate: f64) -> Assignment {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Assignment {
            pairs: vec![],
            unassigned_rows: (0..n).collect(),
            unassigned_cols: (0..m).collect(),
        };
    }
    let allowed = |c: f64| c.is_finite() && c <= gate;
    let finite_sum: f64 = cost.iter().filter(|c| allowed(**c)).map(|c| c.abs()).sum();
    let big = 2.0 * finite_sum + 1.0;
    // Solve with rows ≤ cols.
    let transpose = n > m;
    let (rows, cols) = if transpose { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| {
        let c = if transpose {
            cost[(j, i)]
        } else {
            cost[(i, j)]
        };
        if allowed(c) {
            c
        } else {
            big
        }
    };
    let row_to_col = shortest_augmenting_path(rows, cols, at);
    let mut pairs = Vec::new();
    for (i, j) in row_to_col.into_iter().enumerate() {
        let (r, c) = if transpose { (j, i) } else { (i, j) };
        if allowed(cost[(r, c)]) {
            pairs.push((r, c));
        }
    }
    pairs.sort_unstable();
    let unassigned_rows = (0..n)
        .filter(|r| !pairs.iter().any(|p| p.0 == *r))
        .collect();
    let unassigned_cols = (0..m)
        .filter(|c| !pairs.iter().any(|p| p.1 == *c))
        .collect();
    Assignment {
        pairs,
        unassigned_rows,
        unassigned_cols,
    }
}

/// Kuhn–Munkres with potentials, O(rows²·cols). Requires `rows ≤ cols`;
/// returns the column assigned to each row.
fn shortest_augmenting_path(
    rows: usize,
    cols: usize,
    cost: impl Fn(usize, usize) -> f64,
) -> Vec<usize> {
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // p[j]: row (1-based) matched to column j; column 0 is the virtual root.
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                // Strict comparison: the lowest column wins ties.
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Tracks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelProvenance {
    None,
    HungarianNotional,
    RfFingerprint,
}

impl fmt::Display for LabelProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::HungarianNotional => "hungarian_notional",
            Self::RfFingerprint => "rf_fingerprint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Deleted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub track_id: u64,
    /// `(u, v, u̇, v̇)`.
    pub state: Vector4<f64>,
    pub covariance: Matrix4<f64>,
    pub device_label: Option<String>,
    pub label_provenance: LabelProvenance,
    pub hits: usize,
    /// Consecutive missed scans.
    pub misses: usize,
    pub status: TrackStatus,
    recent: VecDeque<bool>,
    votes: BTreeMap<String, usize>,
}

impl TrackState {
    fn spawn(id: u64, d: &Detection2D, r: f64, vel_std: f64) -> Self {
        let mut covariance = Matrix4::zeros();
        covariance[(0, 0)] = r * r;
        covariance[(1, 1)] = r * r;
        covariance[(2, 2)] = vel_std * vel_std;
        covariance[(3, 3)] = vel_std * vel_std;
        Self {
            track_id: id,
            state: Vector4::new(d.u, d.v, 0.0, 0.0),
            covariance,
            device_label: None,
            label_provenance: LabelProvenance::None,
            hits: 1,
            misses: 0,
            status: TrackStatus::Tentative,
            recent: VecDeque::from([true]),
            votes: BTreeMap::new(),
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.state[0], self.state[1])
    }

    pub fn is_live(&self) -> bool {
        self.status != TrackStatus::Deleted
    }

    /// Count a device-label vote; the label follows the majority, and ties
    /// keep the current label.
    fn vote(&mut self, label: &str) {
        *self.votes.entry(label.to_string()).or_insert(0) += 1;
        let current = self
            .device_label
            .as_deref()
            .and_then(|l| self.votes.get(l).copied())
            .unwrap_or(0);
        let (best, count) = self
            .votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(l, c)| (l.clone(), *c))
            .expect("just inserted");
        if self.device_label.as_deref() != Some(best.as_str()) && count > current {
            if let Some(old) = &self.device_label {
                log::info!(
                    "track {}: label {old} -> {best} by majority ({count} votes)",
                    self.track_id
                );
            }
            self.device_label = Some(best);
        } else if self.device_label.as_deref() != Some(label) {
            log::debug!("track {}: conflicting label {label} ignored", self.track_id);
        }
        self.label_provenance = LabelProvenance::RfFingerprint;
    }
}

const H: Matrix2x4<f64> = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);

fn transition(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

fn process_noise(q: f64, dt: f64) -> Matrix4<f64> {
    let (a, b, c) = (dt.powi(3) / 3.0, dt.powi(2) / 2.0, dt);
    let mut m = Matrix4::zeros();
    for axis in 0..2 {
        let (p, v) = (axis, axis + 2);
        m[(p, p)] = q * a;
        m[(p, v)] = q * b;
        m[(v, p)] = q * b;
        m[(v, v)] = q * c;
    }
    m
}

/// One association made during a scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Association {
    pub detection: usize,
    pub track_id: u64,
    /// Normalized innovation squared.
    pub nis: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub t: f64,
    pub track_id: u64,
    pub device_label: Option<String>,
    pub provenance: LabelProvenance,
    pub u: f64,
    pub v: f64,
    pub udot: f64,
    pub vdot: f64,
    pub status: TrackStatus,
}

#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: FusionConfig,
    pub tracks: Vec<TrackState>,
    next_id: u64,
    /// Covariance repairs performed; zero in nominal runs.
    pub repairs: usize,
}

impl Tracker {
    pub fn new(cfg: FusionConfig) -> Result<Self, FusionError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            tracks: Vec::new(),
            next_id: 1,
            repairs: 0,
        })
    }

    fn noise(&self, d: &Detection2D) -> f64 {
        if is_rf(d) {
            self.cfg.r_rf
        } else {
            self.cfg.r_eo
        }
    }

    pub fn predict(&mut self, dt: f64) {
        let f = transition(dt);
        let q = process_noise(self.cfg.q, dt);
        for t in self.tracks.iter_mut().filter(|t| t.is_live()) {
            t.state = f * t.state;
            t.covariance = f * t.covariance * f.transpose() + q;
        }
    }

    /// Full scan: predict by `dt`, then associate and update. Unmatched live
    /// tracks record a miss.
    pub fn step(&mut self, dt: f64, detections: &[Detection2D]) -> Vec<Association> {
        assert!(dt > 0.0, "scan interval must be positive");
        self.predict(dt);
        self.associate(detections, true)
    }

    /// Same-instant sub-scan: associate and update without predicting and
    /// without counting misses. A matched detection clears the miss count
    /// but does not enter the confirmation window.
    pub fn update_only(&mut self, detections: &[Detection2D]) -> Vec<Association> {
        self.associate(detections, false)
    }

    fn mahalanobis(&self, t: &TrackState, d: &Detection2D) -> f64 {
        let s = H * t.covariance * H.transpose() + Matrix2::identity() * self.noise(d).powi(2);
        let y = Vector2::new(d.u, d.v) - H * t.state;
        s.try_inverse()
            .map_or(f64::INFINITY, |inv| (y.transpose() * inv * y)[(0, 0)])
    }

    /// Gated assignment of `rows` (track indices) to `cols` (detection
    /// indices); returns matched pairs with their d² plus leftovers.
    fn assign_subset(
        &self,
        rows: &[usize],
        cols: &[usize],
        dets: &[Detection2D],
    ) -> (Vec<(usize, usize, f64)>, Vec<usize>, Vec<usize>) {
        let cost = DMatrix::from_fn(rows.len(), cols.len(), |r, c| {
            self.mahalanobis(&self.tracks[rows[r]], &dets[cols[c]])
        });
        let a = hungarian_assign(&cost, self.cfg.gate);
        let pairs = a
            .pairs
            .iter()
            .map(|&(r, c)| (rows[r], cols[c], cost[(r, c)]))
            .collect();
        (
            pairs,
            a.unassigned_rows.iter().map(|&r| rows[r]).collect(),
            a.unassigned_cols.iter().map(|&c| cols[c]).collect(),
        )
    }

    fn associate(&mut self, dets: &[Detection2D], scan: bool) -> Vec<Association> {
        // Confirmed tracks claim detections first; tentative tracks, whose
        // wide velocity uncertainty would otherwise undercut established
        // tracks in d², only see what is left.
        let (confirmed, tentative): (Vec<usize>, Vec<usize>) = (0..self.tracks.len())
            .filter(|&i| self.tracks[i].is_live())
            .partition(|&i| self.tracks[i].status == TrackStatus::Confirmed);
        let all_cols: Vec<usize> = (0..dets.len()).collect();
        let (mut pairs, mut missed, rest) = self.assign_subset(&confirmed, &all_cols, dets);
        let (pairs2, missed2, leftover) = self.assign_subset(&tentative, &rest, dets);
        pairs.extend(pairs2);
        missed.extend(missed2);
        pairs.sort_by_key(|p| p.1);
        missed.sort_unstable();

        let mut out = Vec::with_capacity(dets.len());
        for &(ti, c, nis) in &pairs {
            let d = &dets[c];
            let rn = self.noise(d);
            self.update(ti, d, rn);
            let track = &mut self.tracks[ti];
            if scan {
                Self::record_scan(track, true, &self.cfg);
            } else {
                track.misses = 0;
            }
            if is_rf(d) {
                if let Some(label) = &d.label {
                    track.vote(label);
                }
            }
            out.push(Association {
                detection: c,
                track_id: track.track_id,
                nis,
            });
        }
        if scan {
            for &ti in &missed {
                Self::record_scan(&mut self.tracks[ti], false, &self.cfg);
            }
        }
        for &c in &leftover {
            let d = &dets[c];
            let mut track =
                TrackState::spawn(self.next_id, d, self.noise(d), self.cfg.init_velocity_std);
            if is_rf(d) {
                if let Some(label) = &d.label {
                    track.vote(label);
                }
            }
            out.push(Association {
                detection: c,
                track_id: self.next_id,
                nis: f64::NAN,
            });
            self.next_id += 1;
            self.tracks.push(track);
        }
        self.tracks.retain(|t| t.is_live());
        out
    }

    fn record_scan(track: &mut TrackState, hit: bool, cfg: &FusionConfig) {
        track.recent.push_back(hit);
        while track.recent.len() > cfg.n_confirm_window {
            track.recent.pop_front();
        }
        if hit {
            track.hits += 1;
            track.misses = 0;
        } else {
            track.misses += 1;
        }
        let recent_hits = track.recent.iter().filter(|h| **h).count();
        match track.status {
            TrackStatus::Tentative => {
                if recent_hits >= cfg.m_confirm {
                    track.status = TrackStatus::Confirmed;
                    if track.label_provenance == LabelProvenance::None {
                        track.label_provenance = LabelProvenance::HungarianNotional;
                    }
                } else if track.recent.len() >= cfg.n_confirm_window
                    || cfg.m_confirm - recent_hits > cfg.n_confirm_window - track.recent.len()
                {
                    // Confirmation is no longer reachable within the window.
                    track.status = TrackStatus::Deleted;
                }
            }
            TrackStatus::Confirmed => {
                if track.misses >= cfg.n_miss {
                    track.status = TrackStatus::Deleted;
                }
            }
            TrackStatus::Deleted => {}
        }
    }

    fn update(&mut self, ti: usize, d: &Detection2D, r: f64) {
        let t = &mut self.tracks[ti];
        let rm = Matrix2::identity() * r * r;
        let s = H * t.covariance * H.transpose() + rm;
        let Some(s_inv) = s.try_inverse() else { return };
        let k = t.covariance * H.transpose() * s_inv;
        let y = Vector2::new(d.u, d.v) - H * t.state;
        t.state += k * y;
        let i_kh = Matrix4::identity() - k * H;
        // Joseph form keeps the covariance symmetric PSD.
        let p = i_kh * t.covariance * i_kh.transpose() + k * rm * k.transpose();
        let mut p = (p + p.transpose()) * 0.5;
        if p.cholesky().is_none() {
            p += Matrix4::identity() * 1e-9;
            self.repairs += 1;
            log::warn!("track {}: covariance repaired", t.track_id);
        }
        t.covariance = p;
    }

    /// Snapshot of live tracks at time `t`.
    pub fn records(&self, t: f64) -> Vec<TrackRecord> {
        self.tracks
            .iter()
            .filter(|tr| tr.is_live())
            .map(|tr| TrackRecord {
                t,
                track_id: tr.track_id,
                device_label: tr.device_label.clone(),
                provenance: tr.label_provenance,
                u: tr.state[0],
                v: tr.state[1],
                udot: tr.state[2],
                vdot: tr.state[3],
                status: tr.status,
            })
            .collect()
    }
}

/// Transfer labels from RF detections to the nearest live track within
/// `radius_px`, one detection per track, without a filter update.
pub fn assign_device_labels(tracks: &mut [TrackState], rf: &[Detection2D], radius_px: f64) {
    let labelled: Vec<&Detection2D> = rf.iter().filter(|d| d.label.is_some()).collect();
    let live: Vec<usize> = (0..tracks.len()).filter(|&i| tracks[i].is_live()).collect();
    let mut cost = DMatrix::from_element(live.len(), labelled.len(), f64::INFINITY);
    for (r, &ti) in live.iter().enumerate() {
        for (c, d) in labelled.iter().enumerate() {
            cost[(r, c)] = (tracks[ti].position() - Vector2::new(d.u, d.v)).norm();
        }
    }
    for (r, c) in hungarian_assign(&cost, radius_px).pairs {
        tracks[live[r]].vote(labelled[c].label.as_deref().expect("filtered"));
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TrackRow {
    t: f64,
    track_id: u64,
    device_label: String,
    provenance: LabelProvenance,
    u: f64,
    v: f64,
    udot: f64,
    vdot: f64,
    status: TrackStatus,
}

pub fn write_tracks(path: &Path, records: &[TrackRecord]) -> Result<(), FusionError> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(["t", "track_id", "device_label", "provenance", "u", "v", "udot", "vdot", "status"])?;
    }
    for r in records {
        w.serialize(TrackRow {
            t: r.t,
            track_id: r.track_id,
            device_label: r.device_label.clone().unwrap_or_default(),
            provenance: r.provenance,
            u: r.u,
            v: r.v,
            udot: r.udot,
            vdot: r.vdot,
            status: r.status,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackRecord>, FusionError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<TrackRow>()
        .map(|row| {
            let row = row?;
            Ok(TrackRecord {
                t: row.t,
                track_id: row.track_id,
                device_label: (!row.device_label.is_empty()).then_some(row.device_label),
                provenance: row.provenance,
                u: row.u,
                v: row.v,
                udot: row.udot,
                vdot: row.vdot,
                status: row.status,
            })
        })
        .collect()
}
