//! Coarse-to-fine rotational speed estimation and the RMAE harness.
//!
//! Per target: a short step (default 1 ms) gives a coarse speed, which sets
//! the longest step that cannot rotate the target past half its symmetry
//! angle. Registration is then repeated once with that longer step.

use std::f64::consts::PI;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Event, EventStream, Micros};
use crate::extraction::{self, ExtractionError, ExtractionParams, Point2, SymmetryInfo, SymmetryParams};
use crate::registration::{self, IcpParams, RegistrationError};
use crate::simulator::{self, SceneSpec, SimError};

/// Spatial units per millisecond on the time axis. Large enough that nearest
/// neighbors pair events of nearly equal slice-relative time; with a shallow
/// time axis a shift along the blade helix registers as well as the rotation.
pub const DEFAULT_TEMPORAL_SCALE: f64 = 1000.0;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("stream lasts {duration} us, shorter than the {needed} us capture window")]
    StreamTooShort { duration: Micros, needed: Micros },

    #[error("target events span {span} us, {needed} us required")]
    SpanTooShort { span: Micros, needed: Micros },

    #[error("every slice pair failed: {0}")]
    EstimationFailed(String),

    #[error("RMAE is undefined: {0}")]
    Undefined(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error(transparent)]
    Extraction(#[from] ExtractionError),

    #[error(transparent)]
    Registration(#[from] RegistrationError),

    #[error(transparent)]
    Simulation(#[from] SimError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams {
    pub capture_len: Micros,
    pub t_l: Micros,
    pub t_s_initial: Micros,
    pub eta: f64,
    pub temporal_scale: f64,
    pub n_pairs: usize,
    pub extraction: ExtractionParams,
    pub symmetry: SymmetryParams,
    pub max_icp_iterations: usize,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        EstimatorParams {
            capture_len: 150_000,
            t_l: 10_000,
            t_s_initial: 1_000,
            eta: 0.8,
            temporal_scale: DEFAULT_TEMPORAL_SCALE,
            n_pairs: 10,
            extraction: ExtractionParams::default(),
            symmetry: SymmetryParams::default(),
            max_icp_iterations: 50,
        }
    }
}

impl EstimatorParams {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: String| Err(EstimatorError::InvalidParams(m));
        if !(0 < self.t_s_initial && self.t_s_initial <= self.t_l && self.t_l <= self.capture_len) {
            return bad(format!(
                "requires 0 < t_s_initial <= t_l <= capture_len (got {}, {}, {})",
                self.t_s_initial, self.t_l, self.capture_len
            ));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta must be in (0, 1), got {}", self.eta));
        }
        if !(self.temporal_scale > 0.0) || !self.temporal_scale.is_finite() {
            return bad(format!("temporal_scale must be positive, got {}", self.temporal_scale));
        }
        if self.n_pairs == 0 {
            return bad("n_pairs must be at least 1".into());
        }
        self.extraction.validate()?;
        Ok(())
    }

    pub fn icp(&self) -> IcpParams {
        IcpParams {
            temporal_scale: self.temporal_scale,
            max_iterations: self.max_icp_iterations,
            ..IcpParams::default()
        }
    }
}

/// Speed in rpm from a per-step rotation angle.
pub fn rpm_from_gamma(gamma: f64, step: Micros) -> f64 {
    gamma / (2.0 * PI * step as f64 * 1e-6) * 60.0
}

/// Outcome of one pairwise registration stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEstimate {
    /// Unsigned speed, median over pairs.
    pub rpm: f64,
    /// +1 counter-clockwise, -1 clockwise.
    pub direction: i8,
    pub step: Micros,
    pub slice_len: Micros,
    /// Sign-aligned mean yaw of every successful pair.
    pub gammas: Vec<f64>,
    pub converged: Vec<bool>,
    pub failures: Vec<String>,
}

/// Registers `n_pairs` slice pairs `(i*step, (i+1)*step)` of length `slice_len`
/// and converts the median absolute yaw to rpm.
pub fn pairwise_speed(
    events: &EventStream,
    step: Micros,
    slice_len: Micros,
    n_pairs: usize,
    icp: &IcpParams,
) -> Result<StageEstimate, EstimatorError> {
    let outcomes: Vec<Result<registration::BidirectionalYaw, RegistrationError>> = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let start = i as Micros * step;
            let p = events.slice(start, slice_len);
            let q = events.slice(start + step, slice_len);
            registration::bidirectional_yaw(&p, &q, icp)
        })
        .collect();

    let mut gammas = Vec::new();
    let mut converged = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(b) => {
                gammas.push(b.gamma);
                converged.push(b.converged);
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    if gammas.is_empty() {
        return Err(EstimatorError::EstimationFailed(failures.first().cloned().unwrap_or_default()));
    }
    let mut magnitudes: Vec<f64> = gammas.iter().map(|g| g.abs()).collect();
    let median = extraction::median(&mut magnitudes).unwrap();
    let signed: f64 = gammas.iter().sum();
    Ok(StageEstimate {
        rpm: rpm_from_gamma(median, step),
        direction: if signed < 0.0 { -1 } else { 1 },
        step,
        slice_len,
        gammas,
        converged,
        failures,
    })
}

fn span_of(events: &EventStream) -> Micros {
    match (events.events().first(), events.events().last()) {
        (Some(_), Some(last)) => last.t + 1,
        _ => 0,
    }
}

/// Coarse speed from `n_pairs` pairs at step `t_s_initial`.
pub fn initial_speed(events: &EventStream, params: &EstimatorParams) -> Result<StageEstimate, EstimatorError> {
    let needed = params.t_l + params.n_pairs as Micros * params.t_s_initial;
    let span = span_of(events).max(events.duration());
    if span < needed {
        return Err(EstimatorError::SpanTooShort { span, needed });
    }
    pairwise_speed(events, params.t_s_initial, params.t_l, params.n_pairs, &params.icp())
}

/// Longest step that keeps the rotation between slices below `eta` times
/// half the symmetry angle, in whole microseconds, clamped to
/// `[t_s_initial, capture_len / 4]`.
pub fn refined_step(rpm_init: f64, theta_c: f64, eta: f64, t_s_initial: Micros, capture_len: Micros) -> Micros {
    let seconds = eta * (60.0 / (2.0 * rpm_init)) * (theta_c / (2.0 * PI));
    let micros = (seconds * 1e6).floor();
    let upper = (capture_len / 4).max(t_s_initial);
    if !micros.is_finite() {
        return upper;
    }
    (micros.max(0.0) as Micros).clamp(t_s_initial, upper)
}

/// Slice length for the refinement pass: at least twice the step.
pub fn refined_slice_len(t_l: Micros, step: Micros) -> Micros {
    t_l.max(2 * step)
}

/// Number of pairs `(i*step, (i+1)*step)` of length `slice_len` fitting in `window`.
pub fn pairs_fitting(window: Micros, step: Micros, slice_len: Micros) -> usize {
    if window < step + slice_len {
        return 0;
    }
    ((window - step - slice_len) / step + 1) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedEstimate {
    pub target_id: usize,
    pub centroid: Point2,
    pub rpm_initial: f64,
    pub rpm_refined: f64,
    pub direction: i8,
    pub theta_c: f64,
    pub n_blades: u32,
    pub n_events: usize,
    /// Sign-aligned yaw per refinement pair.
    pub mean_gamma: Vec<f64>,
    pub refined_step: Micros,
    pub initial: StageEstimate,
    pub refined: StageEstimate,
    pub symmetry_fallback: bool,
}

impl SpeedEstimate {
    pub fn pairs_converged(&self) -> usize {
        self.refined.converged.iter().filter(|&&c| c).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetReport {
    pub id: usize,
    pub centroid: Point2,
    pub n_events: usize,
    pub outcome: Result<SpeedEstimate, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationReport {
    pub clusters: extraction::ClusterResult,
    pub targets: Vec<TargetReport>,
}

impl EstimationReport {
    pub fn estimates(&self) -> impl Iterator<Item = &SpeedEstimate> {
        self.targets.iter().filter_map(|t| t.outcome.as_ref().ok())
    }
}

/// Estimates one already isolated target.
pub fn estimate_target(
    id: usize,
    centroid: Point2,
    events: &EventStream,
    params: &EstimatorParams,
) -> Result<SpeedEstimate, EstimatorError> {
    let (symmetry, symmetry_fallback) = match extraction::symmetry_angle(events.events(), centroid, &params.symmetry) {
        Ok(s) => (s, false),
        Err(ExtractionError::SymmetryUndetermined { .. }) => (SymmetryInfo::asymmetric(), true),
        Err(e) => return Err(e.into()),
    };
    let initial = initial_speed(events, params)?;
    let step = refined_step(initial.rpm, symmetry.theta_c, params.eta, params.t_s_initial, params.capture_len);
    let slice_len = refined_slice_len(params.t_l, step);
    let n_pairs = pairs_fitting(params.capture_len, step, slice_len).clamp(1, params.n_pairs);
    let refined = pairwise_speed(events, step, slice_len, n_pairs, &params.icp())?;
    Ok(SpeedEstimate {
        target_id: id,
        centroid,
        rpm_initial: initial.rpm,
        rpm_refined: refined.rpm,
        direction: refined.direction,
        theta_c: symmetry.theta_c,
        n_blades: symmetry.n_repeats,
        n_events: events.len(),
        mean_gamma: refined.gammas.clone(),
        refined_step: step,
        initial,
        refined,
        symmetry_fallback,
    })
}

/// Full pipeline on the first `capture_len` microseconds of `stream`.
pub fn estimate_speed(stream: &EventStream, params: &EstimatorParams) -> Result<EstimationReport, EstimatorError> {
    params.validate()?;
    if stream.duration() < params.capture_len {
        return Err(EstimatorError::StreamTooShort {
            duration: stream.duration(),
            needed: params.capture_len,
        });
    }
    let capture = stream.slice(0, params.capture_len);
    let events: &[Event] = capture.events();
    let clusters = extraction::select_k(events, stream.geometry(), &params.extraction)?;

    let targets = (0..clusters.k)
        .into_par_iter()
        .map(|id| {
            let centroid = clusters.centroids[id];
            let members = clusters.members(events, id);
            let kept = extraction::remove_outliers(&members, centroid);
            let target = EventStream::new(kept, stream.geometry(), Some(params.capture_len))
                .expect("subset of a valid stream");
            let outcome = estimate_target(id, centroid, &target, params).map_err(|e| e.to_string());
            TargetReport {
                id,
                centroid,
                n_events: target.len(),
                outcome,
            }
        })
        .collect();
    Ok(EstimationReport { clusters, targets })
}

/// Relative mean absolute error of repeated measurements against one truth.
pub fn rmae(estimates: &[f64], ground_truth: f64) -> Result<f64, EstimatorError> {
    if estimates.is_empty() {
        return Err(EstimatorError::Undefined("no estimates".into()));
    }
    if !(ground_truth > 0.0) {
        return Err(EstimatorError::Undefined(format!("ground truth must be positive, got {ground_truth}")));
    }
    Ok(estimates.iter().map(|r| (r - ground_truth).abs() / ground_truth).sum::<f64>() / estimates.len() as f64)
}

/// Estimates matched to simulated targets by nearest centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedRun {
    /// Per truth target: `(initial, refined)` rpm, `None` when nothing matched.
    pub per_target: Vec<Option<(f64, f64)>>,
    pub k: usize,
    pub runtime_ms: f64,
    pub report: EstimationReport,
}

/// Simulates `scene`, runs the estimator and matches targets to the truth.
pub fn run_scene(scene: &SceneSpec, params: &EstimatorParams) -> Result<MatchedRun, EstimatorError> {
    let sim = simulator::simulate(scene)?;
    let started = Instant::now();
    let report = estimate_speed(&sim.stream, params)?;
    let runtime_ms = started.elapsed().as_secs_f64() * 1e3;
    let per_target = sim
        .truth
        .targets
        .iter()
        .map(|truth| {
            report
                .estimates()
                .min_by(|a, b| {
                    let da = (a.centroid[0] - truth.center[0]).hypot(a.centroid[1] - truth.center[1]);
                    let db = (b.centroid[0] - truth.center[0]).hypot(b.centroid[1] - truth.center[1]);
                    da.total_cmp(&db)
                })
                .map(|e| (e.rpm_initial, e.rpm_refined))
        })
        .collect();
    Ok(MatchedRun {
        per_target,
        k: report.clusters.k,
        runtime_ms,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub speeds: Vec<f64>,
    pub blades: Vec<u32>,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub speed: f64,
    pub n_blades: u32,
    pub rmae_initial: f64,
    pub rmae_refined: f64,
    pub mean_runtime_ms: f64,
}

/// One row per `(speed, blades)` configuration; each configuration runs
/// `repeats` seeds of `base` with every propeller set to that speed and
/// blade count. A target the estimator missed counts as a full (100%) error.
pub fn evaluate_sweep(base: &SceneSpec, sweep: &SweepSpec, params: &EstimatorParams) -> Result<Vec<SweepRow>, EstimatorError> {
    if sweep.repeats == 0 {
        return Err(EstimatorError::InvalidParams("repeats must be at least 1".into()));
    }
    if sweep.speeds.is_empty() || sweep.blades.is_empty() {
        return Err(EstimatorError::InvalidParams("sweep needs at least one speed and one blade count".into()));
    }
    params.validate()?;
    let configs: Vec<(f64, u32)> = sweep
        .speeds
        .iter()
        .flat_map(|&s| sweep.blades.iter().map(move |&b| (s, b)))
        .collect();
    for &(speed, blades) in &configs {
        let mut scene = base.clone();
        for p in &mut scene.propellers {
            p.rpm = speed;
            p.n_blades = blades;
        }
        scene.validate()?;
    }

    configs
        .par_iter()
        .map(|&(speed, blades)| {
            let runs: Vec<Result<MatchedRun, EstimatorError>> = (0..sweep.repeats)
                .into_par_iter()
                .map(|rep| {
                    let mut scene = base.clone();
                    scene.seed = sweep.seed.wrapping_add(rep as u64);
                    for p in &mut scene.propellers {
                        p.rpm = speed;
                        p.n_blades = blades;
                    }
                    run_scene(&scene, params)
                })
                .collect();
            let truth = speed.abs();
            let mut initial = Vec::new();
            let mut refined = Vec::new();
            let mut runtime = 0.0;
            for run in &runs {
                match run {
                    Ok(run) => {
                        runtime += run.runtime_ms;
                        for t in &run.per_target {
                            let (i, r) = t.unwrap_or((0.0, 0.0));
                            initial.push(i);
                            refined.push(r);
                        }
                    }
                    Err(EstimatorError::Simulation(e)) => return Err(EstimatorError::Simulation(e.clone())),
                    Err(_) => {
                        initial.push(0.0);
                        refined.push(0.0);
                    }
                }
            }
            Ok(SweepRow {
                speed,
                n_blades: blades,
                rmae_initial: rmae(&initial, truth)?,
                rmae_refined: rmae(&refined, truth)?,
                mean_runtime_ms: runtime / runs.len() as f64,
            })
        })
        .collect()
}
