//! Scoring of a fused run against simulator truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::eo_detection::{Detection2D, DetectionSource};
use crate::fusion_tracker::{TrackRecord, TrackStatus};
use crate::pipeline::AssociationRecord;
use crate::simulator::{target_pixel, EoTruth, Scenario};
use crate::tdoa_loc::RFLocation;

pub struct EvalInputs<'a> {
    pub scenario: &'a Scenario,
    pub truth: Vec<EoTruth>,
    pub detections: Vec<Detection2D>,
    pub tracks: Vec<TrackRecord>,
    pub associations: Vec<AssociationRecord>,
    pub rf_locations: Vec<RFLocation>,
    /// Source offsets used by the fusion stage, seconds.
    pub offsets: &'a BTreeMap<String, f64>,
    pub match_radius_px: f64,
    pub rf_match_radius_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    pub track_id: u64,
    pub associations: usize,
    pub majority_target: Option<String>,
    /// Fraction of associations that originate from the majority target.
    pub purity: f64,
    /// Position error against the majority target over the track's records.
    pub rmse_px: Option<f64>,
    pub final_label: Option<String>,
    pub label_correct: bool,
    /// First time the track carried its majority target's device label.
    pub label_time: Option<f64>,
    /// The correct label was later replaced.
    pub label_overwritten: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub target: String,
    pub first_detection_t: Option<f64>,
    pub first_detection_range_m: Option<f64>,
    pub first_rf_fix_t: Option<f64>,
    /// Label time of the target's track minus its first RF fix, seconds.
    pub label_latency_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames: usize,
    pub confirmed_tracks: usize,
    pub false_alarms_per_100_frames: f64,
    pub tracks: Vec<TrackMetrics>,
    pub targets: Vec<TargetMetrics>,
}

impl Metrics {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "evaluate: {} confirmed tracks, {:.2} false alarms per 100 frames",
            self.confirmed_tracks, self.false_alarms_per_100_frames
        );
        for t in &self.tracks {
            s += &format!(
                "; track {} -> {} purity {:.3} label {}",
                t.track_id,
                t.majority_target.as_deref().unwrap_or("-"),
                t.purity,
                t.final_label.as_deref().unwrap_or("notional")
            );
        }
        for t in &self.targets {
            if let Some(r) = t.first_detection_range_m {
                s += &format!("; {} first detected at {r:.0} m", t.target);
            }
        }
        s
    }
}

fn offset(offsets: &BTreeMap<String, f64>, key: &str) -> f64 {
    offsets.get(key).copied().unwrap_or(0.0)
}

/// Target whose truth pixel is nearest to `(u, v)` at aligned time `t`,
/// within `radius`. EO timestamps are shifted back by the EO offset.
fn origin(inp: &EvalInputs<'_>, t_true: f64, u: f64, v: f64, radius: f64) -> Option<usize> {
    inp.scenario
        .targets
        .iter()
        .enumerate()
        .filter_map(|(i, tgt)| {
            let (tu, tv, _) = target_pixel(&inp.scenario.camera, tgt, t_true)?;
            let d = (tu - u).hypot(tv - v);
            (d <= radius).then_some((i, d))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

pub fn evaluate(inp: &EvalInputs<'_>) -> Metrics {
    let scn = inp.scenario;
    let eo_off = offset(inp.offsets, "eo");
    let frames = scn.frame_times().len();

    // Associations grouped by track, attributed to targets.
    let mut per_track: BTreeMap<u64, Vec<Option<usize>>> = BTreeMap::new();
    for a in &inp.associations {
        let radius = match a.source {
            DetectionSource::RfProjected => inp.rf_match_radius_px,
            _ => inp.match_radius_px,
        };
        per_track.entry(a.track_id).or_default().push(origin(inp, a.t + eo_off, a.u, a.v, radius));
    }
    let mut records: BTreeMap<u64, Vec<&TrackRecord>> = BTreeMap::new();
    for r in &inp.tracks {
        records.entry(r.track_id).or_default().push(r);
    }

    let mut tracks = Vec::new();
    for (&id, recs) in &records {
        if !recs.iter().any(|r| r.status == TrackStatus::Confirmed) {
            continue;
        }
        let origins = per_track.get(&id).cloned().unwrap_or_default();
        let mut counts = vec![0usize; scn.targets.len()];
        for o in origins.iter().flatten() {
            counts[*o] += 1;
        }
        let majority = (0..counts.len()).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).filter(|&i| counts[i] > 0);
        let purity = match majority {
            Some(i) if !origins.is_empty() => counts[i] as f64 / origins.len() as f64,
            _ => 0.0,
        };
        let device = majority.map(|i| scn.targets[i].device.clone());
        let rmse_px = majority.and_then(|i| {
            let errs: Vec<f64> = recs
                .iter()
                .filter_map(|r| {
                    let (u, v, _) = target_pixel(&scn.camera, &scn.targets[i], r.t + eo_off)?;
                    Some((u - r.u).powi(2) + (v - r.v).powi(2))
                })
                .collect();
            (!errs.is_empty()).then(|| (errs.iter().sum::<f64>() / errs.len() as f64).sqrt())
        });
        let final_label = recs.last().and_then(|r| r.device_label.clone());
        let first_correct = device.as_ref().and_then(|d| recs.iter().position(|r| r.device_label.as_ref() == Some(d)));
        let label_overwritten =
            first_correct.is_some_and(|k| recs[k..].iter().any(|r| r.device_label != recs[k].device_label));
        tracks.push(TrackMetrics {
            track_id: id,
            associations: origins.len(),
            label_correct: final_label.is_some() && final_label == device,
            majority_target: device,
            purity,
            rmse_px,
            final_label,
            label_time: first_correct.map(|k| recs[k].t),
            label_overwritten,
        });
    }

    // Per target: first EO detection, first RF fix, label latency.
    let rf_off = offset(inp.offsets, "rf");
    let center = scn.camera.center();
    let mut first_det: Vec<Option<&Detection2D>> = vec![None; scn.targets.len()];
    let mut false_alarms = 0usize;
    for d in &inp.detections {
        match origin(inp, d.t, d.u, d.v, inp.match_radius_px) {
            Some(i) => {
                if first_det[i].is_none_or(|f| d.t < f.t) {
                    first_det[i] = Some(d);
                }
            }
            None => false_alarms += 1,
        }
    }
    let mut first_rf: Vec<Option<f64>> = vec![None; scn.targets.len()];
    for loc in &inp.rf_locations {
        let t = loc.t - rf_off;
        let nearest = scn
            .targets
            .iter()
            .enumerate()
            .map(|(i, tgt)| (i, tgt.position_at(t).distance(&loc.position)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = nearest {
            if first_rf[i].is_none_or(|f| t < f) {
                first_rf[i] = Some(t);
            }
        }
    }
    let targets = scn
        .targets
        .iter()
        .enumerate()
        .map(|(i, tgt)| {
            let label_time = tracks
                .iter()
                .filter(|t| t.majority_target.as_deref() == Some(tgt.device.as_str()))
                .filter_map(|t| t.label_time)
                .min_by(f64::total_cmp);
            TargetMetrics {
                target: tgt.device.clone(),
                first_detection_t: first_det[i].map(|d| d.t),
                first_detection_range_m: first_det[i].map(|d| tgt.position_at(d.t).distance(&center)),
                first_rf_fix_t: first_rf[i],
                label_latency_s: label_time.zip(first_rf[i]).map(|(l, f)| l - f),
            }
        })
        .collect();

    Metrics {
        frames,
        confirmed_tracks: tracks.len(),
        false_alarms_per_100_frames: if frames > 0 { 100.0 * false_alarms as f64 / frames as f64 } else { 0.0 },
        tracks,
        targets,
    }
}
