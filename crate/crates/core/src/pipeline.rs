//! Batch stages binding the modules together. Every stage reads and writes
//! plain files under one output directory so stages can be rerun and
//! inspected independently.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eo_detection::{
    detect_frames, ingest_external_detections, read_detections, write_detections, Detection2D,
    DetectionSource, EoError, MaskParams,
};
use crate::evaluate::{self, EvalInputs, Metrics};
use crate::fingerprint::{
    average_confidence, classify, ingest_external_confidences, train_templates,
    write_confidences, ClassSet, ClassTemplates, ConfidenceVector, FingerprintError,
};
use crate::frames::{FrameError, FrameStack};
use crate::fusion_tracker::{
    align_timeline, assign_device_labels, project_rf_locations, write_tracks, FusionConfig,
    FusionError, TrackRecord, TrackStatus, Tracker,
};
use crate::geometry::GeometryError;
use crate::rf_preproc::{
    detect_hop_center, extract_fingerprints, prepare_for_tdoa, retune,
    FingerprintVector, IqReader, RFCapture, RfError, DECISION_TIME, TDOA_RATE,
};
use crate::rpca::{rpca_tiled, spectral_norm, RpcaError, RpcaParams, DEFAULT_BATCH_FRAMES};
use crate::simulator::{self, fingerprint_pass, layout, preset, Scenario, SimError};
use crate::tdoa_loc::{
    estimate_tdoa, ml_localize, read_locations, spherical_intersection, write_locations,
    MlParams, MlStatus, RFLocation, TdoaError, TdoaMeasurement,
};

/// Files written by the stages, relative to the output directory.
pub mod files {
    pub const DETECTIONS: &str = "detections.csv";
    pub const RF_LOCATIONS: &str = "rf_locations.csv";
    pub const TEMPLATES: &str = "templates.bin";
    pub const CONFIDENCES: &str = "confidences.csv";
    pub const CONFUSION: &str = "confusion.csv";
    pub const TRACKS: &str = "tracks.csv";
    pub const ASSOCIATIONS: &str = "associations.csv";
    pub const TRACK_SUMMARY: &str = "track_summary.csv";
    pub const METRICS: &str = "metrics.json";
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error("no templates at {0} and no training data configured")]
    TrainRequired(PathBuf),
    #[error("evaluation unavailable: {0}")]
    EvalUnavailable(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Rpca(#[from] RpcaError),
    #[error(transparent)]
    Eo(#[from] EoError),
    #[error(transparent)]
    Rf(#[from] RfError),
    #[error(transparent)]
    Tdoa(#[from] TdoaError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

fn rpca_exit(e: &RpcaError) -> i32 {
    match e {
        RpcaError::InvalidParams(_) => EXIT_CONFIG,
        RpcaError::InvalidInput(_) => EXIT_DATA,
        RpcaError::Tile { source, .. } => rpca_exit(source),
        RpcaError::SvdFailure { .. } | RpcaError::NotConverged { .. } => EXIT_NUMERICAL,
    }
}

impl PipelineError {
    /// Process exit code: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        use PipelineError as P;
        match self {
            P::Config(_) | P::Json(_) => EXIT_CONFIG,
            P::Sim(SimError::UnknownPreset(_) | SimError::InvalidScenario(_) | SimError::Toml(_)) => {
                EXIT_CONFIG
            }
            P::Fusion(FusionError::MissingOffset(_) | FusionError::InvalidConfig(_)) => EXIT_CONFIG,
            P::Eo(EoError::InvalidParams(_)) => EXIT_CONFIG,
            P::Tdoa(
                TdoaError::InvalidParams(_) | TdoaError::InvalidLayout(_) | TdoaError::UnknownSensor(_),
            ) => EXIT_CONFIG,
            P::Fingerprint(FingerprintError::InvalidClassSet(_)) => EXIT_CONFIG,
            P::Rpca(e) => rpca_exit(e),
            P::Tdoa(TdoaError::DegenerateGeometry { .. } | TdoaError::NoRealRoot) => EXIT_NUMERICAL,
            P::Geometry(GeometryError::RankDeficientGeometry | GeometryError::DegenerateProjection { .. }) => {
                EXIT_NUMERICAL
            }
            _ => EXIT_DATA,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    DetectEo,
    LocalizeRf,
    Fingerprint,
    Fuse,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::Fingerprint,
        Stage::DetectEo,
        Stage::LocalizeRf,
        Stage::Fuse,
        Stage::Evaluate,
    ];
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Frame cube file or directory of PGM frames. Defaults to the
    /// simulator's cube in the output directory.
    pub frames: Option<PathBuf>,
    /// Frame rate for inputs that carry no scenario, Hz.
    pub frame_rate: Option<f64>,
    /// Directory of per-sensor IQ files.
    pub iq: Option<PathBuf>,
    /// Externally produced detections (`t,u,v,score,label`), used instead
    /// of RPCA.
    pub detections: Option<PathBuf>,
}

pub const DEFAULT_BATCH_OVERLAP: usize = 6;

/// Default `λ/τ` for video: splits sparse from dense residuals at 0.0625.
pub const DEFAULT_LAMBDA_RATIO: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpcaSection {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub batch_frames: usize,
    /// Extra frames decomposed on each side of a batch and then discarded.
    /// Frames near a batch edge are fitted worst by the low-rank term and
    /// leave single-pixel residue in the sparse part.
    pub batch_overlap: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub rho: f64,
    /// Overrides of the size-derived defaults.
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    /// `λ/τ` when `lambda` is not given. Residuals below `1/(2·ratio)` go to
    /// the dense error term rather than the sparse one, so this must sit well
    /// above the sensor noise.
    pub lambda_ratio: f64,
}

impl Default for RpcaSection {
    fn default() -> Self {
        let d = RpcaParams::with_sigma1(1, 1, 1.0);
        Self {
            tile_rows: 2,
            tile_cols: 2,
            batch_frames: DEFAULT_BATCH_FRAMES,
            batch_overlap: DEFAULT_BATCH_OVERLAP,
            max_iters: d.max_iters,
            tol: d.tol,
            rho: d.rho,
            tau: None,
            lambda: None,
            lambda_ratio: DEFAULT_LAMBDA_RATIO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdoaSection {
    /// Sensor groups, first id is the reference. Empty: one group per
    /// tuning frequency in the scenario, in id order.
    pub groups: Vec<Vec<u32>>,
    /// Per-sensor clock corrections (sensor clock minus common clock), s.
    pub clock_offsets: BTreeMap<String, f64>,
    pub min_quality: f64,
    /// Altitude prior for three-sensor groups, m.
    pub altitude: f64,
    pub ml: MlParams,
    /// Minimum mean confidence to attach a device label to a fix.
    pub min_label_confidence: f64,
}

impl Default for TdoaSection {
    fn default() -> Self {
        Self {
            groups: Vec::new(),
            clock_offsets: BTreeMap::new(),
            min_quality: crate::tdoa_loc::DEFAULT_MIN_PEAK_QUALITY,
            altitude: 60.0,
            ml: MlParams::default(),
            min_label_confidence: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedPasses {
    pub passes: Vec<u32>,
    pub dwells: usize,
    #[serde(default = "default_pass_seed")]
    pub seed: u64,
}

fn default_pass_seed() -> u64 {
    77
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledIq {
    pub label: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingerprintSection {
    pub classes: Vec<String>,
    /// Template store to load. Defaults to the one in the output directory.
    pub templates: Option<PathBuf>,
    /// Training data from simulated passes of every class.
    pub train: Option<SimulatedPasses>,
    /// Training data from labeled IQ files.
    pub train_files: Vec<LabeledIq>,
    /// Held-out simulated passes for the confusion matrix.
    pub test: Option<SimulatedPasses>,
    /// Externally computed confidences, passed through unchanged.
    pub external: Option<PathBuf>,
}

impl Default for FingerprintSection {
    fn default() -> Self {
        Self {
            classes: ClassSet::default().labels().to_vec(),
            templates: None,
            train: None,
            train_files: Vec::new(),
            test: None,
            external: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Radius within which an EO detection is attributed to a target, px.
    pub match_radius_px: f64,
    /// The same for projected RF fixes, px.
    pub rf_match_radius_px: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { match_radius_px: 5.0, rf_match_radius_px: 25.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Option<String>,
    /// Scenario file; takes precedence over `preset`.
    pub scenario: Option<PathBuf>,
    /// Stages run by [`Pipeline::run_all`].
    pub stages: Vec<Stage>,
    pub out: PathBuf,
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    pub inputs: Inputs,
    pub rpca: RpcaSection,
    pub mask: MaskParams,
    pub fusion: FusionConfig,
    pub tdoa: TdoaSection,
    pub fingerprint: FingerprintSection,
    pub evaluate: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: None,
            scenario: None,
            stages: Stage::ALL.to_vec(),
            out: PathBuf::from("out"),
            seed: None,
            inputs: Inputs::default(),
            rpca: RpcaSection::default(),
            mask: MaskParams::default(),
            fusion: FusionConfig::default(),
            tdoa: TdoaSection::default(),
            fingerprint: FingerprintSection::default(),
            evaluate: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Parse, resolve relative paths against the file's directory, and
    /// validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PipelineError::Config(format!("{} not found", path.display())),
            _ => PipelineError::Io { path: path.to_path_buf(), source: e },
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        for p in [
            &mut self.scenario,
            &mut self.inputs.frames,
            &mut self.inputs.iq,
            &mut self.inputs.detections,
            &mut self.fingerprint.templates,
            &mut self.fingerprint.external,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for f in &mut self.fingerprint.train_files {
            fix(&mut f.path);
        }
    }

    /// Parameter checks and existence of every referenced input file.
    pub fn validate(&self) -> Result<()> {
        if let Some(name) = &self.preset {
            if self.scenario.is_none() {
                preset(name)?;
            }
        }
        let r = &self.rpca;
        if r.tile_rows == 0 || r.tile_cols == 0 || r.batch_frames < 2 {
            return Err(PipelineError::Config("rpca: tiles must be >= 1 and batch_frames >= 2".into()));
        }
        self.mask.validate()?;
        self.fusion.validate()?;
        ClassSet::new(self.fingerprint.classes.clone())?;
        if let Some(fr) = self.inputs.frame_rate {
            if !(fr > 0.0 && fr.is_finite()) {
                return Err(PipelineError::Config(format!("inputs.frame_rate {fr}")));
            }
        }
        for (k, v) in &self.tdoa.clock_offsets {
            if k.parse::<u32>().is_err() || !v.is_finite() {
                return Err(PipelineError::Config(format!("tdoa.clock_offsets: {k} = {v}")));
            }
        }
        if self.tdoa.groups.iter().any(|g| g.is_empty()) {
            return Err(PipelineError::Config("tdoa.groups: empty group".into()));
        }
        let referenced = [
            &self.scenario,
            &self.inputs.frames,
            &self.inputs.iq,
            &self.inputs.detections,
            &self.fingerprint.templates,
            &self.fingerprint.external,
        ];
        for p in referenced.into_iter().flatten().chain(self.fingerprint.train_files.iter().map(|f| &f.path)) {
            if !p.exists() {
                return Err(PipelineError::MissingInput(p.clone()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

pub struct Pipeline {
    pub cfg: PipelineConfig,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        Self { cfg }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.cfg.out).map_err(io_err(&self.cfg.out))
    }

    /// The scenario: an explicit file, else the one written by `simulate`,
    /// else the preset.
    pub fn scenario(&self) -> Result<Scenario> {
        let written = self.out(layout::SCENARIO);
        let mut scn = if let Some(p) = &self.cfg.scenario {
            Scenario::load(p)?
        } else if written.exists() {
            Scenario::load(&written)?
        } else if let Some(name) = &self.cfg.preset {
            preset(name)?
        } else {
            return Err(PipelineError::Config("no scenario: set `preset` or `scenario`".into()));
        };
        if let Some(seed) = self.cfg.seed {
            scn.seed = seed;
        }
        Ok(scn)
    }

    pub fn run(&self, stage: Stage) -> Result<String> {
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::DetectEo => self.detect_eo(),
            Stage::LocalizeRf => self.localize_rf(),
            Stage::Fingerprint => self.fingerprint(),
            Stage::Fuse => self.fuse(),
            Stage::Evaluate => self.evaluate().map(|m| m.summary()),
        }
    }

    pub fn run_all(&self) -> Result<Vec<String>> {
        self.cfg.stages.iter().map(|&s| self.run(s)).collect()
    }

    // -- simulate -----------------------------------------------------------

    pub fn simulate(&self) -> Result<String> {
        let scn = match &self.cfg.scenario {
            Some(p) => Scenario::load(p)?,
            None => preset(self.cfg.preset.as_deref().ok_or_else(|| {
                PipelineError::Config("simulate needs `preset` or `scenario`".into())
            })?)?,
        };
        let scn = Scenario { seed: self.cfg.seed.unwrap_or(scn.seed), ..scn };
        self.ensure_out()?;
        let s = simulator::write_scenario(&scn, &self.cfg.out)?;
        Ok(format!(
            "simulate: {} frames, {} IQ files, {} dwells, {} warnings",
            s.frames,
            s.iq_files,
            s.dwells,
            s.warnings.len()
        ))
    }

    // -- detect-eo ----------------------------------------------------------

    fn load_frames(&self) -> Result<FrameStack> {
        let path = self.cfg.inputs.frames.clone().unwrap_or_else(|| self.out(layout::FRAMES));
        if !path.exists() {
            return Err(PipelineError::MissingInput(path));
        }
        let stack = if path.is_dir() { FrameStack::read_pgm_dir(&path)? } else { FrameStack::read_cube(&path)? };
        let rate = match self.cfg.inputs.frame_rate {
            Some(r) => r,
            None => self.scenario()?.frame_rate,
        };
        Ok(stack.with_frame_rate(rate))
    }

    /// Sparse component of every frame, batch by batch.
    pub fn sparse_frames(&self, stack: &FrameStack) -> Result<Vec<DMatrix<f64>>> {
        let r = &self.cfg.rpca;
        let k = stack.len();
        let mut bounds: Vec<(usize, usize)> =
            (0..k).step_by(r.batch_frames).map(|a| (a, (a + r.batch_frames).min(k))).collect();
        // A trailing single frame cannot be decomposed; fold it into the
        // previous batch.
        if bounds.len() > 1 && bounds.last().is_some_and(|(a, b)| b - a < 2) {
            let (_, end) = bounds.pop().unwrap();
            bounds.last_mut().unwrap().1 = end;
        }
        let tile_pixels = stack.height.div_ceil(r.tile_rows) * stack.width.div_ceil(r.tile_cols);
        let mut out = Vec::with_capacity(k);
        for (a, b) in bounds {
            let (lo, hi) = (a.saturating_sub(r.batch_overlap), (b + r.batch_overlap).min(k));
            let batch = stack.slice(lo, hi);
            let x = DMatrix::from_fn(stack.height * stack.width, hi - lo, |i, f| batch.frames[f][i]);
            let mut params = RpcaParams::with_sigma1(tile_pixels, hi - lo, spectral_norm(&x));
            params.max_iters = r.max_iters;
            params.tol = r.tol;
            params.rho = r.rho;
            if let Some(t) = r.tau {
                params.tau = t;
            }
            params.lambda = r.lambda.unwrap_or(r.lambda_ratio * params.tau);
            let dec = rpca_tiled(&batch, r.tile_rows, r.tile_cols, &params)?;
            for t in dec.tiles.iter().filter(|t| !t.converged) {
                log::warn!(
                    "frames {a}..{b}, tile at ({}, {}): no convergence after {} iterations (residual {:.2e})",
                    t.rect.row0,
                    t.rect.col0,
                    t.iterations,
                    t.final_residual
                );
            }
            out.extend(dec.sparse_frames.into_iter().skip(a - lo).take(b - a));
        }
        Ok(out)
    }

    pub fn detect_eo(&self) -> Result<String> {
        self.ensure_out()?;
        let dets = if let Some(path) = &self.cfg.inputs.detections {
            let scn = self.scenario()?;
            let (d, dropped) =
                ingest_external_detections(path, scn.camera.width(), scn.camera.height())?;
            if dropped > 0 {
                log::warn!("{dropped} external detections outside the frame dropped");
            }
            d
        } else {
            let stack = self.load_frames()?;
            let sparse = self.sparse_frames(&stack)?;
            detect_frames(&sparse, &stack.timestamps, &self.cfg.mask)?
        };
        write_detections(&self.out(files::DETECTIONS), &dets)?;
        Ok(format!("detect-eo: {} detections", dets.len()))
    }

    // -- RF helpers -----------------------------------------------------------

    fn iq_dir(&self) -> PathBuf {
        self.cfg.inputs.iq.clone().unwrap_or_else(|| self.out(layout::IQ_DIR))
    }

    fn groups(&self, scn: &Scenario) -> Vec<Vec<u32>> {
        if !self.cfg.tdoa.groups.is_empty() {
            return self.cfg.tdoa.groups.clone();
        }
        let mut by_freq: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
        for id in scn.sensors.ids() {
            if let Some(f) = scn.tuning(id) {
                by_freq.entry(f.to_bits()).or_default().push(id);
            }
        }
        let mut groups: Vec<Vec<u32>> = by_freq.into_values().collect();
        groups.iter_mut().for_each(|g| g.sort_unstable());
        groups.sort();
        groups
    }

    /// Captures of one sensor with the configured clock correction applied.
    fn captures(&self, sensor: u32) -> Result<Vec<RFCapture>> {
        let path = self.iq_dir().join(layout::iq_file(sensor));
        if !path.exists() {
            return Err(PipelineError::MissingInput(path));
        }
        let offset = self.cfg.tdoa.clock_offsets.get(&sensor.to_string()).copied().unwrap_or(0.0);
        let mut caps = IqReader::read_all(&path)?;
        for c in &mut caps {
            c.clock_offset = offset;
        }
        Ok(caps)
    }

    fn templates_path(&self) -> PathBuf {
        self.cfg.fingerprint.templates.clone().unwrap_or_else(|| self.out(files::TEMPLATES))
    }

    fn class_set(&self) -> Result<ClassSet> {
        Ok(ClassSet::new(self.cfg.fingerprint.classes.clone())?)
    }

    /// Per-window confidences of one capture; empty if no burst edge found.
    fn capture_confidences(cap: &RFCapture, tpl: &ClassTemplates) -> Vec<ConfidenceVector> {
        match extract_fingerprints(cap) {
            Ok(vs) => vs.iter().map(|v| classify(v, tpl)).collect(),
            Err(RfError::NoSignal) => Vec::new(),
            Err(e) => {
                log::debug!("sensor {} at {:.3}: {e}", cap.sensor_id, cap.unified_start());
                Vec::new()
            }
        }
    }

    fn label_for(&self, cap: &RFCapture, tpl: &ClassTemplates) -> Option<String> {
        let stream = Self::capture_confidences(cap, tpl);
        let means = average_confidence(&stream).ok()?;
        means
            .into_iter()
            .filter(|(_, c)| *c >= self.cfg.tdoa.min_label_confidence)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(l, _)| l)
    }

    // -- localize-rf ----------------------------------------------------------

    pub fn localize_rf(&self) -> Result<String> {
        self.ensure_out()?;
        let scn = self.scenario()?;
        let tpl_path = self.templates_path();
        let templates = if tpl_path.exists() { Some(ClassTemplates::load(&tpl_path)?) } else { None };
        let mut locations = Vec::new();
        let mut skipped = 0usize;
        for group in self.groups(&scn) {
            if group.len() < 3 {
                log::warn!("group {group:?}: fewer than three sensors, skipped");
                continue;
            }
            let layout = scn.sub_layout(&group)?;
            let per_sensor: Vec<Vec<RFCapture>> =
                group.iter().map(|&id| self.captures(id)).collect::<Result<_>>()?;
            for reference in &per_sensor[0] {
                let start = reference.unified_start();
                let partners: Vec<Option<&RFCapture>> = per_sensor[1..]
                    .iter()
                    .map(|caps| caps.iter().find(|c| (c.unified_start() - start).abs() < DECISION_TIME / 2.0))
                    .collect();
                let fix = self.locate_window(reference, &partners, &layout, &group);
                match fix {
                    Ok(Some(mut loc)) => {
                        if let Some(tpl) = &templates {
                            loc.device_label = self.label_for(reference, tpl);
                        }
                        locations.push(loc);
                    }
                    Ok(None) => skipped += 1,
                    Err(e) if e.exit_code() == EXIT_NUMERICAL => {
                        log::warn!("group {group:?} at {start:.3}: {e}");
                        skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        locations.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.position.x.total_cmp(&b.position.x)));
        write_locations(&self.out(files::RF_LOCATIONS), &locations)?;
        Ok(format!("localize-rf: {} fixes, {} windows without a fix", locations.len(), skipped))
    }

    /// Center a capture on `f` (common to the whole group, so the pair stays
    /// phase-coherent), then band-limit, resample and gate.
    fn tdoa_ready(cap: &RFCapture, f: f64) -> Result<RFCapture> {
        Ok(prepare_for_tdoa(&retune(cap, f))?)
    }

    fn locate_window(
        &self,
        reference: &RFCapture,
        partners: &[Option<&RFCapture>],
        layout: &crate::tdoa_loc::SensorLayout,
        group: &[u32],
    ) -> Result<Option<RFLocation>> {
        let f = match detect_hop_center(reference, reference.duration()) {
            Ok(f) => f,
            Err(RfError::NoSignal) => {
                log::debug!("sensor {} at {:.3}: no signal", group[0], reference.unified_start());
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        let a = Self::tdoa_ready(reference, f)?;
        let mut tdoas: Vec<TdoaMeasurement> = Vec::new();
        for (other, &id) in partners.iter().zip(&group[1..]) {
            let Some(other) = other else { continue };
            let b = Self::tdoa_ready(other, f)?;
            let max_lag = layout.max_delay(group[0], id)? + 2.0 / TDOA_RATE;
            match estimate_tdoa(&a, &b, max_lag, self.cfg.tdoa.min_quality) {
                Ok(m) => tdoas.push(TdoaMeasurement { t: reference.unified_start(), ..m }),
                Err(e @ (TdoaError::NoPeak { .. } | TdoaError::NoOverlap)) => {
                    log::debug!("pair ({}, {id}) at {:.3}: {e}", group[0], reference.unified_start());
                }
                Err(e) => return Err(e.into()),
            }
        }
        let loc = if group.len() >= 4 && tdoas.len() >= 3 {
            spherical_intersection(&tdoas, layout)?
        } else if tdoas.len() >= 2 {
            let fix = ml_localize(&tdoas, layout, self.cfg.tdoa.altitude, &self.cfg.tdoa.ml)?;
            if let MlStatus::AmbiguousMinimum { alternate, .. } = &fix.status {
                log::info!("ambiguous fix at {:.3}; alternate {alternate:?}", reference.unified_start());
            }
            fix.location
        } else {
            return Ok(None);
        };
        Ok(Some(RFLocation { t: reference.unified_start(), ..loc }))
    }

    // -- fingerprint ----------------------------------------------------------

    fn pass_vectors(&self, label: &str, spec: &SimulatedPasses) -> Result<Vec<FingerprintVector>> {
        let mut out = Vec::new();
        for &pass in &spec.passes {
            for cap in fingerprint_pass(label, pass, spec.dwells, spec.seed)? {
                for mut v in extract_fingerprints(&cap)? {
                    v.device_truth = Some(label.to_string());
                    out.push(v);
                }
            }
        }
        Ok(out)
    }

    fn train(&self, classes: &ClassSet) -> Result<Option<ClassTemplates>> {
        let fp = &self.cfg.fingerprint;
        if fp.train.is_none() && fp.train_files.is_empty() {
            return Ok(None);
        }
        let mut data = Vec::new();
        if let Some(spec) = &fp.train {
            for label in classes.labels() {
                data.extend(self.pass_vectors(label, spec)?);
            }
        }
        for file in &fp.train_files {
            for cap in IqReader::read_all(&file.path)? {
                for mut v in extract_fingerprints(&cap)? {
                    v.device_truth = Some(file.label.clone());
                    data.push(v);
                }
            }
        }
        Ok(Some(train_templates(&data, classes)?))
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.ensure_out()?;
        let classes = self.class_set()?;
        let fp = &self.cfg.fingerprint;
        if let Some(path) = &fp.external {
            let (stream, clamped) = ingest_external_confidences(path)?;
            if clamped > 0 {
                log::warn!("{clamped} external confidences clamped to [0, 1]");
            }
            write_confidences(&self.out(files::CONFIDENCES), &classes, &stream)?;
            return Ok(format!("fingerprint: {} external confidence vectors passed through", stream.len()));
        }
        let templates = match self.train(&classes)? {
            Some(t) => {
                t.save(&self.out(files::TEMPLATES))?;
                t
            }
            None => {
                let path = self.templates_path();
                if !path.exists() {
                    return Err(PipelineError::TrainRequired(path));
                }
                ClassTemplates::load(&path)?
            }
        };
        let mut report = vec!["fingerprint: templates ready".to_string()];
        if let Some(test) = &fp.test {
            let mut rows = Vec::new();
            for label in classes.labels() {
                let stream: Vec<ConfidenceVector> =
                    self.pass_vectors(label, test)?.iter().map(|v| classify(v, &templates)).collect();
                rows.push((label.clone(), average_confidence(&stream)?));
            }
            write_confusion(&self.out(files::CONFUSION), &classes, &rows)?;
            report.push(format!("confusion matrix over {} classes", rows.len()));
        }
        let iq = self.iq_dir();
        if iq.exists() {
            let scn = self.scenario()?;
            let mut stream = Vec::new();
            for group in self.groups(&scn) {
                for cap in self.captures(group[0])? {
                    stream.extend(Self::capture_confidences(&cap, &templates));
                }
            }
            stream.sort_by(|a, b| a.t.total_cmp(&b.t));
            write_confidences(&self.out(files::CONFIDENCES), &classes, &stream)?;
            report.push(format!("{} windows classified", stream.len()));
        }
        Ok(report.join(", "))
    }

    // -- fuse -----------------------------------------------------------------

    pub fn fuse(&self) -> Result<String> {
        self.ensure_out()?;
        let scn = self.scenario()?;
        let cfg = &self.cfg.fusion;
        let det_path = self.out(files::DETECTIONS);
        if !det_path.exists() {
            return Err(PipelineError::MissingInput(det_path));
        }
        let mut streams = vec![read_detections(&det_path)?];
        let rf_path = self.out(files::RF_LOCATIONS);
        if cfg.use_rf && rf_path.exists() {
            let (projected, dropped) = project_rf_locations(&read_locations(&rf_path)?, &scn.camera);
            if dropped > 0 {
                log::info!("{dropped} RF fixes fall outside the image");
            }
            streams.push(projected);
        }
        let aligned = align_timeline(&streams, &cfg.offsets)?;
        let eo_offset = cfg.offsets.get("eo").copied().unwrap_or(0.0);
        let frame_times: Vec<f64> = scn.frame_times().iter().map(|t| t - eo_offset).collect();
        let run = run_tracker(cfg, &frame_times, scn.frame_rate, &aligned)?;
        write_tracks(&self.out(files::TRACKS), &run.records)?;
        write_associations(&self.out(files::ASSOCIATIONS), &run.associations)?;
        let summary = summarize_tracks(&run.records);
        write_summary(&self.out(files::TRACK_SUMMARY), &summary)?;
        let confirmed = summary.iter().filter(|s| s.confirmed).count();
        Ok(format!(
            "fuse: {} tracks ({} confirmed), {} covariance repairs",
            summary.len(),
            confirmed,
            run.repairs
        ))
    }

    // -- evaluate -------------------------------------------------------------

    pub fn evaluate(&self) -> Result<Metrics> {
        let truth = self.out(layout::EO_TRUTH);
        if !truth.exists() {
            return Err(PipelineError::EvalUnavailable(format!("no truth file at {}", truth.display())));
        }
        let scn = self.scenario()?;
        let need = |name: &str| -> Result<PathBuf> {
            let p = self.out(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(PipelineError::EvalUnavailable(format!("missing {}", p.display())))
            }
        };
        let rf_path = self.out(files::RF_LOCATIONS);
        let inputs = EvalInputs {
            scenario: &scn,
            truth: simulator::read_eo_truth(&truth)?,
            detections: read_detections(&need(files::DETECTIONS)?)?,
            tracks: crate::fusion_tracker::read_tracks(&need(files::TRACKS)?)?,
            associations: read_associations(&need(files::ASSOCIATIONS)?)?,
            rf_locations: if rf_path.exists() { read_locations(&rf_path)? } else { Vec::new() },
            offsets: &self.cfg.fusion.offsets,
            match_radius_px: self.cfg.evaluate.match_radius_px,
            rf_match_radius_px: self.cfg.evaluate.rf_match_radius_px,
        };
        let metrics = evaluate::evaluate(&inputs);
        self.ensure_out()?;
        let path = self.out(files::METRICS);
        fs::write(&path, serde_json::to_string_pretty(&metrics)? + "\n").map_err(io_err(&path))?;
        Ok(metrics)
    }
}

// ---------------------------------------------------------------------------
// Tracker driver
// ---------------------------------------------------------------------------

/// One detection-to-track association, as logged by the fusion stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationRecord {
    pub t: f64,
    pub track_id: u64,
    pub u: f64,
    pub v: f64,
    pub source: DetectionSource,
    pub label: String,
    /// Normalized innovation squared; empty for a detection that started
    /// the track.
    pub nis: Option<f64>,
}

pub struct TrackerRun {
    pub records: Vec<TrackRecord>,
    pub associations: Vec<AssociationRecord>,
    pub repairs: usize,
}

/// Drive the tracker over EO frame times. Detections are binned to the
/// nearest frame; RF detections of a frame are applied after its EO update
/// at the same instant.
pub fn run_tracker(
    cfg: &FusionConfig,
    frame_times: &[f64],
    frame_rate: f64,
    aligned: &[Detection2D],
) -> Result<TrackerRun> {
    let n = frame_times.len();
    let mut eo: Vec<Vec<Detection2D>> = vec![Vec::new(); n];
    let mut rf: Vec<Vec<Detection2D>> = vec![Vec::new(); n];
    if n > 0 {
        let t0 = frame_times[0];
        for d in aligned {
            let k = ((d.t - t0) * frame_rate).round();
            if k < 0.0 || k >= n as f64 {
                continue;
            }
            let k = k as usize;
            if (d.t - frame_times[k]).abs() > 0.5 / frame_rate {
                continue;
            }
            match d.source {
                DetectionSource::RfProjected => rf[k].push(d.clone()),
                _ => eo[k].push(d.clone()),
            }
        }
    }
    let mut tracker = Tracker::new(cfg.clone())?;
    let mut records = Vec::new();
    let mut associations = Vec::new();
    let log = |t: f64, dets: &[Detection2D], assoc: Vec<crate::fusion_tracker::Association>, out: &mut Vec<AssociationRecord>| {
        for a in assoc {
            let d = &dets[a.detection];
            out.push(AssociationRecord {
                t,
                track_id: a.track_id,
                u: d.u,
                v: d.v,
                source: d.source,
                label: d.label.clone().unwrap_or_default(),
                nis: a.nis.is_finite().then_some(a.nis),
            });
        }
    };
    for k in 0..n {
        let t = frame_times[k];
        let dt = if k == 0 { 1.0 / frame_rate } else { t - frame_times[k - 1] };
        let assoc = tracker.step(dt, &eo[k]);
        log(t, &eo[k], assoc, &mut associations);
        if !rf[k].is_empty() {
            if cfg.rf_as_measurement {
                let assoc = tracker.update_only(&rf[k]);
                log(t, &rf[k], assoc, &mut associations);
            } else {
                assign_device_labels(&mut tracker.tracks, &rf[k], cfg.label_radius_px);
            }
        }
        records.extend(tracker.records(t));
    }
    Ok(TrackerRun { records, associations, repairs: tracker.repairs })
}

pub fn write_associations(path: &Path, rows: &[AssociationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::Fusion(e.into()))?;
    if rows.is_empty() {
        w.write_record(["t", "track_id", "u", "v", "source", "label", "nis"])
            .map_err(|e| PipelineError::Fusion(e.into()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::Fusion(e.into()))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_associations(path: &Path) -> Result<Vec<AssociationRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PipelineError::Fusion(e.into()))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e: csv::Error| PipelineError::Fusion(e.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub track_id: u64,
    pub confirmed: bool,
    pub first_t: f64,
    pub last_t: f64,
    pub records: usize,
    pub device_label: String,
    pub provenance: String,
    /// First time the final label was held.
    pub label_t: Option<f64>,
}

pub fn summarize_tracks(records: &[TrackRecord]) -> Vec<TrackSummary> {
    let mut by_id: BTreeMap<u64, Vec<&TrackRecord>> = BTreeMap::new();
    for r in records {
        by_id.entry(r.track_id).or_default().push(r);
    }
    by_id
        .into_iter()
        .map(|(id, rs)| {
            let last = rs[rs.len() - 1];
            let label_t = last
                .device_label
                .as_ref()
                .and_then(|l| rs.iter().find(|r| r.device_label.as_ref() == Some(l)).map(|r| r.t));
            TrackSummary {
                track_id: id,
                confirmed: rs.iter().any(|r| r.status == TrackStatus::Confirmed),
                first_t: rs[0].t,
                last_t: last.t,
                records: rs.len(),
                device_label: last.device_label.clone().unwrap_or_default(),
                provenance: last.provenance.to_string(),
                label_t,
            }
        })
        .collect()
}

fn write_summary(path: &Path, rows: &[TrackSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::Fusion(e.into()))?;
    if rows.is_empty() {
        w.write_record([
            "track_id", "confirmed", "first_t", "last_t", "records", "device_label", "provenance", "label_t",
        ])
        .map_err(|e| PipelineError::Fusion(e.into()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::Fusion(e.into()))?;
    }
    w.flush().map_err(io_err(path))
}

/// Rows: true class; columns: mean confidence per trained class.
fn write_confusion(path: &Path, classes: &ClassSet, rows: &[(String, Vec<(String, f64)>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(FingerprintError::from)?;
    let mut header = vec!["truth".to_string()];
    header.extend(classes.labels().iter().cloned());
    w.write_record(&header).map_err(FingerprintError::from)?;
    for (truth, means) in rows {
        let mut rec = vec![truth.clone()];
        rec.extend(means.iter().map(|(_, m)| m.to_string()));
        w.write_record(&rec).map_err(FingerprintError::from)?;
    }
    w.flush().map_err(io_err(path))
}
