//! Scenario simulation and filter benchmarking.
//!
//! Ties the estimation machinery together: closed-form truth trajectories,
//! synthetic gyro and direction-measurement streams with the matching noise
//! models, a runner that drives either the matrix Fisher filter or the MEKF
//! through any of the four combinations of angular-velocity frame and
//! reference-vector kind, per-run error metrics, Monte-Carlo aggregation,
//! and a CSV log format so recorded sensor data can be replayed offline.
//!
//! The four combinations are labeled `AV{I,B}_RV{I,B}`: angular velocity
//! measured in the inertial or body frame crossed with the reference vector
//! known in the inertial or body frame. `AVI_RVI` and `AVB_RVB` are the
//! observable pairings; the mixed ones leave the rotation about the
//! reference direction forever undetermined, which the runner's `rho` and
//! dispersion outputs make visible.

use std::fmt;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::matrix_fisher::{normalizer, MatrixFisher, MfError, MomentSolver};
use crate::measurement::{
    sample_body, sample_inertial, update, DirectionMeasurement, MeasurementKind,
};
use crate::mekf::{mekf_predict, mekf_update, ErrorFrame, MekfError, MekfState};
use crate::propagation::{propagate_mf_left_with, propagate_mf_right_with, Frame, Trivialization};
use crate::so3::{exp_so3, log_so3, proper_svd, random_rotation, Rotation};

/// Tolerance for matching measurement timestamps to step boundaries.
const SCHED_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("i/o failure")]
    Io(#[from] io::Error),
    /// A log row could not be parsed; `line` is 1-based and counts the header.
    #[error("log line {line}: {message}")]
    Parse { line: u64, message: String },
    /// The log header lacks a required column.
    #[error("log is missing required column `{column}`")]
    Schema { column: String },
    /// The matrix Fisher filter failed numerically mid-run.
    #[error("matrix Fisher filter aborted at t = {t} s (step {step})")]
    MfAbort {
        t: f64,
        step: usize,
        #[source]
        source: MfError,
    },
    /// The MEKF failed numerically mid-run.
    #[error("MEKF aborted at t = {t} s (step {step})")]
    MekfAbort {
        t: f64,
        step: usize,
        #[source]
        source: MekfError,
    },
}

/// The four pairings of angular-velocity frame and reference-vector kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Combo {
    AviRvi,
    AviRvb,
    AvbRvi,
    AvbRvb,
}

impl Combo {
    pub const ALL: [Combo; 4] = [Combo::AviRvi, Combo::AviRvb, Combo::AvbRvi, Combo::AvbRvb];

    /// Frame the gyro resolves the angular velocity in.
    pub fn velocity_frame(self) -> Frame {
        match self {
            Combo::AviRvi | Combo::AviRvb => Frame::Inertial,
            Combo::AvbRvi | Combo::AvbRvb => Frame::Body,
        }
    }

    /// Trivialization of the kinematics the filter propagates through.
    pub fn trivialization(self) -> Trivialization {
        match self.velocity_frame() {
            Frame::Inertial => Trivialization::Right,
            Frame::Body => Trivialization::Left,
        }
    }

    /// Kind of direction measurement the combination uses.
    pub fn measurement_kind(self) -> MeasurementKind {
        match self {
            Combo::AviRvi | Combo::AvbRvi => MeasurementKind::InertialRef,
            Combo::AviRvb | Combo::AvbRvb => MeasurementKind::BodyRef,
        }
    }

    /// Whether the full attitude is recoverable from this pairing.
    pub fn observable(self) -> bool {
        matches!(self, Combo::AviRvi | Combo::AvbRvb)
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Combo::AviRvi => "AVI_RVI",
            Combo::AviRvb => "AVI_RVB",
            Combo::AvbRvi => "AVB_RVI",
            Combo::AvbRvb => "AVB_RVB",
        };
        f.write_str(s)
    }
}

impl FromStr for Combo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "AVI_RVI" => Ok(Combo::AviRvi),
            "AVI_RVB" => Ok(Combo::AviRvb),
            "AVB_RVI" => Ok(Combo::AvbRvi),
            "AVB_RVB" => Ok(Combo::AvbRvb),
            other => Err(format!(
                "unknown combination `{other}` (expected AVI_RVI, AVI_RVB, AVB_RVI, or AVB_RVB)"
            )),
        }
    }
}

/// Closed-form truth trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthModel {
    /// Spin about the third body-fixed axis at 6 rad/s composed with
    /// precession about the second inertial axis at 1 rad/s.
    SpinPrecess,
    /// Rotation about a single fixed axis at π/2 rad/s; the inertial and
    /// body angular velocities are both constant.
    FixedAxis,
}

impl fmt::Display for TruthModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TruthModel::SpinPrecess => "spin_precess",
            TruthModel::FixedAxis => "fixed_axis",
        })
    }
}

impl FromStr for TruthModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "spin_precess" => Ok(TruthModel::SpinPrecess),
            "fixed_axis" => Ok(TruthModel::FixedAxis),
            other => Err(format!(
                "unknown truth model `{other}` (expected spin_precess or fixed_axis)"
            )),
        }
    }
}

/// Body-frame angular velocity of the fixed-axis truth model.
pub fn fixed_axis_velocity() -> Vector3<f64> {
    -(std::f64::consts::PI / (2.0 * 3.0_f64.sqrt())) * Vector3::new(1.0, 1.0, 1.0)
}

/// Simulation protocol for one run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Simulated time span, seconds.
    pub duration: f64,
    /// Gyro sampling rate, Hz; one prediction step per sample.
    pub gyro_rate: f64,
    /// Direction-measurement rate, Hz; must not exceed `gyro_rate`.
    pub meas_rate: f64,
    /// Angular random-walk density, rad/√s.
    pub gamma: f64,
    /// von Mises–Fisher concentration of the direction measurements.
    pub kappa: f64,
    /// Reference direction (normalized on use).
    pub ref_vector: [f64; 3],
    pub combo: Combo,
    pub truth: TruthModel,
    /// Base seed; Monte-Carlo run `i` uses `seed + i`.
    pub seed: u64,
}

impl Scenario {
    /// The benchmark protocol: 60 s of the spin–precess trajectory, 150 Hz
    /// gyro with γ = 10°/√s, 30 Hz direction measurements of `e1` with
    /// κ = 200.
    pub fn benchmark(combo: Combo, seed: u64) -> Self {
        Self {
            duration: 60.0,
            gyro_rate: 150.0,
            meas_rate: 30.0,
            gamma: 10.0_f64.to_radians(),
            kappa: 200.0,
            ref_vector: [1.0, 0.0, 0.0],
            combo,
            truth: TruthModel::SpinPrecess,
            seed,
        }
    }

    /// Validates invariants, returning a human-readable complaint.
    pub fn check(&self) -> Result<(), String> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.gyro_rate.is_finite() && self.gyro_rate > 0.0) {
            return Err(format!("gyro_rate must be positive, got {}", self.gyro_rate));
        }
        if !(self.meas_rate.is_finite() && self.meas_rate > 0.0) {
            return Err(format!("meas_rate must be positive, got {}", self.meas_rate));
        }
        if self.meas_rate > self.gyro_rate {
            return Err(format!(
                "meas_rate ({}) must not exceed gyro_rate ({})",
                self.meas_rate, self.gyro_rate
            ));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(format!("kappa must be positive, got {}", self.kappa));
        }
        let n = Vector3::from(self.ref_vector).norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(format!("ref_vector must be non-zero, got {:?}", self.ref_vector));
        }
        if (self.duration * self.gyro_rate).round() < 1.0 {
            return Err("duration × gyro_rate must cover at least one step".to_string());
        }
        Ok(())
    }

    /// Panicking form of [`Self::check`].
    pub fn validate(&self) {
        if let Err(e) = self.check() {
            panic!("invalid scenario: {e}");
        }
    }

    /// Unit reference direction.
    pub fn reference(&self) -> Vector3<f64> {
        Vector3::from(self.ref_vector).normalize()
    }
}

/// Truth state with the initial attitude factored in: returns the attitude
/// together with the angular velocity resolved in both frames.
fn truth_with_r0(model: TruthModel, r0: &Rotation, t: f64) -> (Rotation, Vector3<f64>, Vector3<f64>) {
    match model {
        TruthModel::SpinPrecess => {
            let r = exp_so3(&Vector3::new(0.0, t, 0.0))
                * *r0
                * exp_so3(&Vector3::new(0.0, 0.0, 6.0 * t));
            let omega = Vector3::y() + 6.0 * r.col(2);
            let big_omega = r.matrix().transpose() * Vector3::y() + 6.0 * Vector3::z();
            (r, omega, big_omega)
        }
        TruthModel::FixedAxis => {
            let big_omega = fixed_axis_velocity();
            let r = *r0 * exp_so3(&(t * big_omega));
            let omega = r0.matrix() * big_omega;
            (r, omega, big_omega)
        }
    }
}

/// Truth attitude and angular velocities at time `t`, starting from the
/// identity. Monte-Carlo runs randomize the initial attitude instead; see
/// [`synthesize_measurements`].
pub fn generate_truth(scenario: &Scenario, t: f64) -> (Rotation, Vector3<f64>, Vector3<f64>) {
    assert!(
        (0.0..=scenario.duration + SCHED_TOL).contains(&t),
        "t = {t} outside [0, {}]",
        scenario.duration
    );
    truth_with_r0(scenario.truth, &Rotation::identity(), t)
}

/// One gyro sample: angular velocity resolved in `frame`, valid from `t`
/// until the next sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GyroSample {
    pub t: f64,
    pub w: Vector3<f64>,
    pub frame: Frame,
}

/// One direction-measurement sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirSample {
    pub t: f64,
    pub reading: Vector3<f64>,
    pub kind: MeasurementKind,
}

/// Sensor streams plus (optionally) the true attitude for error metrics.
///
/// For synthetic streams `truth` holds one entry per gyro timestamp plus a
/// final entry at the scenario duration; ingested logs carry truth row by
/// row (or not at all).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogStreams {
    pub gyro: Vec<GyroSample>,
    pub directions: Vec<DirSample>,
    pub truth: Vec<(f64, Rotation)>,
}

/// Synthesizes sensor streams for one run.
///
/// Draws a uniformly random initial true attitude first, then the gyro
/// noise (per-sample standard deviation γ/√h, the discrete equivalent of
/// the continuous random walk), then the von Mises–Fisher direction
/// readings — all from `rng`, so a seeded generator makes the run
/// reproducible. With γ = 0 the gyro stream equals the true angular
/// velocity bit for bit.
pub fn synthesize_measurements(scenario: &Scenario, rng: &mut impl Rng) -> LogStreams {
    scenario.validate();
    let r0 = random_rotation(rng);
    let frame = scenario.combo.velocity_frame();
    let kind = scenario.combo.measurement_kind();
    let reference = scenario.reference();
    let h = 1.0 / scenario.gyro_rate;
    let n_gyro = (scenario.duration * scenario.gyro_rate).round() as usize;
    let n_meas = (scenario.duration * scenario.meas_rate).round() as usize;

    let mut gyro = Vec::with_capacity(n_gyro);
    let mut truth = Vec::with_capacity(n_gyro + 1);
    for k in 0..n_gyro {
        let t = k as f64 / scenario.gyro_rate;
        let (r, omega, big_omega) = truth_with_r0(scenario.truth, &r0, t);
        let w_true = match frame {
            Frame::Inertial => omega,
            Frame::Body => big_omega,
        };
        let w = if scenario.gamma > 0.0 {
            let noise = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            w_true + (scenario.gamma / h.sqrt()) * noise
        } else {
            w_true
        };
        gyro.push(GyroSample { t, w, frame });
        truth.push((t, r));
    }
    let (r_end, _, _) = truth_with_r0(scenario.truth, &r0, scenario.duration);
    truth.push((scenario.duration, r_end));

    let mut directions = Vec::with_capacity(n_meas);
    for j in 0..n_meas {
        let t = j as f64 / scenario.meas_rate;
        let (r, _, _) = truth_with_r0(scenario.truth, &r0, t);
        let reading = match kind {
            MeasurementKind::InertialRef => sample_inertial(&r, &reference, scenario.kappa, rng),
            MeasurementKind::BodyRef => sample_body(&r, &reference, scenario.kappa, rng),
        };
        directions.push(DirSample { t, reading, kind });
    }

    LogStreams {
        gyro,
        directions,
        truth,
    }
}

/// Angle between two attitudes, degrees in [0, 180].
pub fn full_error(r_est: &Rotation, r_true: &Rotation) -> f64 {
    let rel = Rotation::from_matrix_unchecked(r_true.matrix().transpose() * r_est.matrix());
    log_so3(&rel).norm().to_degrees().clamp(0.0, 180.0)
}

/// Attitude error ignoring the rotation about the reference direction:
/// the angle between the predicted and true direction readings, degrees.
pub fn partial_error(
    r_est: &Rotation,
    r_true: &Rotation,
    kind: MeasurementKind,
    reference: &Vector3<f64>,
) -> f64 {
    let dot = match kind {
        MeasurementKind::InertialRef => (r_true.matrix().transpose() * reference)
            .dot(&(r_est.matrix().transpose() * reference)),
        MeasurementKind::BodyRef => (r_true.matrix() * reference).dot(&(r_est.matrix() * reference)),
    };
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

/// One row of a run's error time series.
///
/// `rho` is the observability index of the matrix Fisher posterior (NaN for
/// MEKF runs, which have no such index); `std_deg` are the estimated
/// standard deviations of the error rotation vector — principal-axes frame
/// for the matrix Fisher filter, the reference vector's frame for the MEKF.
/// Entries are infinite when a degree of freedom is completely unknown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRecord {
    pub t: f64,
    pub full_err_deg: f64,
    pub partial_err_deg: f64,
    pub rho: f64,
    pub std_deg: [f64; 3],
}

impl ErrorRecord {
    pub const CSV_HEADER: &'static str =
        "t,full_err_deg,partial_err_deg,rho,std1_deg,std2_deg,std3_deg";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.t,
            self.full_err_deg,
            self.partial_err_deg,
            self.rho,
            self.std_deg[0],
            self.std_deg[1],
            self.std_deg[2]
        )
    }
}

/// Error time series and per-run time averages for one filter run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub series: Vec<ErrorRecord>,
    pub mean_full_deg: f64,
    pub mean_partial_deg: f64,
}

impl RunResult {
    pub fn write_series_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", ErrorRecord::CSV_HEADER)?;
        for rec in &self.series {
            writeln!(w, "{}", rec.csv_row())?;
        }
        Ok(())
    }
}

/// Which filter to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    MatrixFisher,
    Mekf,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::MatrixFisher => "matrix_fisher",
            Estimator::Mekf => "mekf",
        })
    }
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "matrix_fisher" | "mf" => Ok(Estimator::MatrixFisher),
            "mekf" => Ok(Estimator::Mekf),
            other => Err(format!(
                "unknown estimator `{other}` (expected matrix_fisher or mekf)"
            )),
        }
    }
}

/// Read-only view of the filter state handed to a probe at every recorded
/// instant.
pub enum EstimatorStateView<'a> {
    MatrixFisher(&'a MatrixFisher),
    Mekf(&'a MekfState),
}

enum State {
    Mf { mf: MatrixFisher, solver: MomentSolver },
    Kf(MekfState),
}

fn make_record(
    state: &State,
    t: f64,
    truth: Option<&Rotation>,
    kind: MeasurementKind,
    reference: &Vector3<f64>,
) -> Result<ErrorRecord, MfError> {
    let (r_est, rho, std_deg) = match state {
        State::Mf { mf, .. } => {
            let s = mf.s();
            let d = normalizer(&s)?.d;
            let o = Vector3::new(d[1] + d[2], d[2] + d[0], d[0] + d[1]);
            // Dispersion of the error rotation vector in the principal-axes
            // frame: (tr(S)I − S)⁻¹, diagonal with entries 1/(sⱼ + sₖ).
            let std_deg = [
                (1.0 / (s[1] + s[2])).sqrt().to_degrees(),
                (1.0 / (s[2] + s[0])).sqrt().to_degrees(),
                (1.0 / (s[0] + s[1])).sqrt().to_degrees(),
            ];
            (mf.mean_attitude(), o.product().max(0.0), std_deg)
        }
        State::Kf(st) => {
            let frame = match kind {
                MeasurementKind::InertialRef => ErrorFrame::Inertial,
                MeasurementKind::BodyRef => ErrorFrame::Body,
            };
            let cov = st.cov_in(frame);
            let std_deg = [
                cov[(0, 0)].sqrt().to_degrees(),
                cov[(1, 1)].sqrt().to_degrees(),
                cov[(2, 2)].sqrt().to_degrees(),
            ];
            (st.mean, f64::NAN, std_deg)
        }
    };
    let (full, partial) = match truth {
        Some(r_true) => (
            full_error(&r_est, r_true),
            partial_error(&r_est, r_true, kind, reference),
        ),
        None => (f64::NAN, f64::NAN),
    };
    Ok(ErrorRecord {
        t,
        full_err_deg: full,
        partial_err_deg: partial,
        rho,
        std_deg,
    })
}

/// Runs one filter over synthesized streams. See [`run_filter_on_streams`].
pub fn run_filter(scenario: &Scenario, estimator: Estimator) -> Result<RunResult, HarnessError> {
    run_filter_probed(scenario, estimator, &mut |_, _| {})
}

/// [`run_filter`] with a probe called at every recorded instant.
pub fn run_filter_probed(
    scenario: &Scenario,
    estimator: Estimator,
    probe: &mut dyn FnMut(f64, EstimatorStateView<'_>),
) -> Result<RunResult, HarnessError> {
    let mut rng = StdRng::seed_from_u64(scenario.seed);
    let streams = synthesize_measurements(scenario, &mut rng);
    run_filter_on_streams(scenario, &streams, estimator, probe)
}

/// Drives a filter through recorded or synthesized streams.
///
/// Each gyro sample holds until the next one; the final sample's step is
/// padded to the scenario duration. Direction measurements are applied
/// after the prediction step that reaches their timestamp (measurements at
/// or before the first gyro timestamp are applied immediately, so a t = 0
/// measurement updates the prior before any prediction). An error record is
/// emitted after every measurement batch and at the end of the run; the
/// matrix Fisher filter starts from the uniform distribution, the MEKF from
/// its completely-unknown surrogate.
pub fn run_filter_on_streams(
    scenario: &Scenario,
    streams: &LogStreams,
    estimator: Estimator,
    probe: &mut dyn FnMut(f64, EstimatorStateView<'_>),
) -> Result<RunResult, HarnessError> {
    assert!(!streams.gyro.is_empty(), "gyro stream must not be empty");
    let kind = scenario.combo.measurement_kind();
    let reference = scenario.reference();
    let gamma = scenario.gamma;

    let mut state = match estimator {
        Estimator::MatrixFisher => State::Mf {
            mf: MatrixFisher::uniform(),
            solver: MomentSolver::new(),
        },
        Estimator::Mekf => State::Kf(MekfState::completely_unknown()),
    };

    let truth_at = |idx: usize| -> Option<&Rotation> {
        if streams.truth.is_empty() {
            None
        } else {
            Some(&streams.truth[idx.min(streams.truth.len() - 1)].1)
        }
    };

    let n = streams.gyro.len();
    let end_time = scenario.duration.max(streams.gyro[n - 1].t);
    let mut series = Vec::new();
    let mut meas_idx = 0usize;

    let apply_due = |state: &mut State,
                         meas_idx: &mut usize,
                         t_now: f64,
                         step: usize|
     -> Result<bool, HarnessError> {
        let mut updated = false;
        while *meas_idx < streams.directions.len()
            && streams.directions[*meas_idx].t <= t_now + SCHED_TOL
        {
            let sample = &streams.directions[*meas_idx];
            let meas = DirectionMeasurement::new(
                sample.kind,
                reference,
                sample.reading,
                scenario.kappa,
                sample.t,
            );
            match state {
                State::Mf { mf, .. } => *mf = update(mf, &meas),
                State::Kf(st) => {
                    *st = mekf_update(st, &meas).map_err(|source| HarnessError::MekfAbort {
                        t: t_now,
                        step,
                        source,
                    })?
                }
            }
            *meas_idx += 1;
            updated = true;
        }
        Ok(updated)
    };

    let mut t_cur = streams.gyro[0].t;
    if apply_due(&mut state, &mut meas_idx, t_cur, 0)? {
        let rec = make_record(&state, t_cur, truth_at(0), kind, &reference).map_err(|source| {
            HarnessError::MfAbort {
                t: t_cur,
                step: 0,
                source,
            }
        })?;
        match &state {
            State::Mf { mf, .. } => probe(t_cur, EstimatorStateView::MatrixFisher(mf)),
            State::Kf(st) => probe(t_cur, EstimatorStateView::Mekf(st)),
        }
        series.push(rec);
    }

    for k in 0..n {
        let step_end = if k + 1 < n {
            streams.gyro[k + 1].t
        } else {
            end_time
        };
        let h = step_end - t_cur;
        if h > SCHED_TOL {
            let g = &streams.gyro[k];
            match &mut state {
                State::Mf { mf, solver } => {
                    let next = match g.frame {
                        Frame::Inertial => propagate_mf_right_with(solver, mf, &g.w, h, gamma),
                        Frame::Body => propagate_mf_left_with(solver, mf, &g.w, h, gamma),
                    }
                    .map_err(|source| HarnessError::MfAbort {
                        t: t_cur,
                        step: k,
                        source,
                    })?;
                    *mf = next;
                }
                State::Kf(st) => *st = mekf_predict(st, &g.w, g.frame, h, gamma),
            }
        }
        t_cur = step_end;

        let updated = apply_due(&mut state, &mut meas_idx, t_cur, k)?;
        if updated || k + 1 == n {
            let rec = make_record(&state, t_cur, truth_at(k + 1), kind, &reference).map_err(
                |source| HarnessError::MfAbort {
                    t: t_cur,
                    step: k,
                    source,
                },
            )?;
            match &state {
                State::Mf { mf, .. } => probe(t_cur, EstimatorStateView::MatrixFisher(mf)),
                State::Kf(st) => probe(t_cur, EstimatorStateView::Mekf(st)),
            }
            series.push(rec);
        }
    }

    let mean_of = |pick: fn(&ErrorRecord) -> f64| -> f64 {
        let vals: Vec<f64> = series.iter().map(pick).filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let mean_full_deg = mean_of(|r| r.full_err_deg);
    let mean_partial_deg = mean_of(|r| r.partial_err_deg);

    Ok(RunResult {
        series,
        mean_full_deg,
        mean_partial_deg,
    })
}

/// One row of the Monte-Carlo summary table: across-run mean ± standard
/// deviation of the per-run time-averaged errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub estimator: Estimator,
    pub combo: Combo,
    pub n_runs: usize,
    pub full_mean: f64,
    pub full_sd: f64,
    pub partial_mean: f64,
    pub partial_sd: f64,
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str =
        "estimator,combo,full_mean,full_sd,partial_mean,partial_sd";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.estimator, self.combo, self.full_mean, self.full_sd, self.partial_mean,
            self.partial_sd
        )
    }
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], mut w: W) -> io::Result<()> {
    writeln!(w, "{}", SummaryRow::CSV_HEADER)?;
    for row in rows {
        writeln!(w, "{}", row.csv_row())?;
    }
    Ok(())
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// The individual runs behind a Monte-Carlo row. Run `i` uses seed
/// `template.seed + i`; runs execute in parallel but collection is
/// index-ordered, so results are deterministic.
pub fn monte_carlo_runs(
    template: &Scenario,
    estimator: Estimator,
    n_runs: usize,
) -> Result<Vec<RunResult>, HarnessError> {
    assert!(n_runs >= 1, "need at least one run");
    (0..n_runs)
        .into_par_iter()
        .map(|i| {
            let mut sc = template.clone();
            sc.seed = template.seed.wrapping_add(i as u64);
            run_filter(&sc, estimator)
        })
        .collect()
}

/// Aggregates per-run time averages into a summary row.
pub fn summarize_runs(estimator: Estimator, combo: Combo, runs: &[RunResult]) -> SummaryRow {
    assert!(!runs.is_empty(), "need at least one run");
    let (full_mean, full_sd) = mean_sd(&runs.iter().map(|r| r.mean_full_deg).collect::<Vec<_>>());
    let (partial_mean, partial_sd) =
        mean_sd(&runs.iter().map(|r| r.mean_partial_deg).collect::<Vec<_>>());
    SummaryRow {
        estimator,
        combo,
        n_runs: runs.len(),
        full_mean,
        full_sd,
        partial_mean,
        partial_sd,
    }
}

/// Monte-Carlo statistics for one estimator and the template's combination.
pub fn monte_carlo_row(
    template: &Scenario,
    estimator: Estimator,
    n_runs: usize,
) -> Result<SummaryRow, HarnessError> {
    let runs = monte_carlo_runs(template, estimator, n_runs)?;
    Ok(summarize_runs(estimator, template.combo, &runs))
}

/// The full summary table: both estimators across all four combinations,
/// using the template's scenario parameters. Seeds repeat across rows, so
/// every combination sees the same sequence of initial attitudes.
pub fn monte_carlo(template: &Scenario, n_runs: usize) -> Result<Vec<SummaryRow>, HarnessError> {
    let mut rows = Vec::with_capacity(8);
    for estimator in [Estimator::MatrixFisher, Estimator::Mekf] {
        for combo in Combo::ALL {
            let mut sc = template.clone();
            sc.combo = combo;
            rows.push(monte_carlo_row(&sc, estimator, n_runs)?);
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Log CSV format
// ---------------------------------------------------------------------------

const LOG_COLUMNS: [&str; 9] = [
    "t", "wx", "wy", "wz", "w_frame", "dx", "dy", "dz", "d_kind",
];
const TRUTH_COLUMNS: [&str; 9] = [
    "rt11", "rt12", "rt13", "rt21", "rt22", "rt23", "rt31", "rt32", "rt33",
];

/// Writes streams as a CSV log: one row per gyro sample, direction columns
/// blank except on rows whose timestamp carries a measurement, truth
/// columns row-major (all blank when no truth is available). Floats use
/// shortest round-trip formatting, so ingestion reproduces them bit for
/// bit.
pub fn write_log<W: Write>(streams: &LogStreams, w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    let header: Vec<&str> = LOG_COLUMNS.iter().chain(TRUTH_COLUMNS.iter()).copied().collect();
    out.write_record(&header).map_err(csv_err)?;

    let mut dir_idx = 0usize;
    for (k, g) in streams.gyro.iter().enumerate() {
        let mut fields: Vec<String> = Vec::with_capacity(18);
        fields.push(format!("{}", g.t));
        fields.push(format!("{}", g.w[0]));
        fields.push(format!("{}", g.w[1]));
        fields.push(format!("{}", g.w[2]));
        fields.push(
            match g.frame {
                Frame::Inertial => "inertial",
                Frame::Body => "body",
            }
            .to_string(),
        );
        if dir_idx < streams.directions.len()
            && (streams.directions[dir_idx].t - g.t).abs() <= SCHED_TOL
        {
            let d = &streams.directions[dir_idx];
            fields.push(format!("{}", d.reading[0]));
            fields.push(format!("{}", d.reading[1]));
            fields.push(format!("{}", d.reading[2]));
            fields.push(
                match d.kind {
                    MeasurementKind::InertialRef => "inertial_ref",
                    MeasurementKind::BodyRef => "body_ref",
                }
                .to_string(),
            );
            dir_idx += 1;
        } else {
            fields.extend(std::iter::repeat(String::new()).take(4));
        }
        if k < streams.truth.len() {
            let m = streams.truth[k].1.matrix();
            for i in 0..3 {
                for j in 0..3 {
                    fields.push(format!("{}", m[(i, j)]));
                }
            }
        } else {
            fields.extend(std::iter::repeat(String::new()).take(9));
        }
        out.write_record(&fields).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// [`write_log`] to a file path.
pub fn export_log(streams: &LogStreams, path: &Path) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path)?;
    write_log(streams, io::BufWriter::new(file))
}

fn parse_f64(s: &str, line: u64, column: &str) -> Result<f64, HarnessError> {
    s.parse::<f64>().map_err(|_| HarnessError::Parse {
        line,
        message: format!("column `{column}`: invalid number `{s}`"),
    })
}

/// Reads a CSV log written in the [`write_log`] schema.
///
/// Direction readings are renormalized when they drift off unit length by
/// more than 1e-9, with a warning once the deviation exceeds 1e-3; truth
/// rotations are re-orthonormalized under the same policy. Gyro timestamps
/// must increase strictly.
pub fn read_log<R: Read>(r: R) -> Result<LogStreams, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(r);

    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| -> Option<usize> { headers.iter().position(|h| h == name) };
    let mut required = [0usize; 9];
    for (slot, name) in required.iter_mut().zip(LOG_COLUMNS) {
        *slot = col(name).ok_or_else(|| HarnessError::Schema {
            column: name.to_string(),
        })?;
    }
    let truth_cols: Vec<Option<usize>> = TRUTH_COLUMNS.iter().map(|n| col(n)).collect();
    let have_truth = truth_cols.iter().all(|c| c.is_some());
    if !have_truth && truth_cols.iter().any(|c| c.is_some()) {
        let missing = TRUTH_COLUMNS
            .iter()
            .zip(&truth_cols)
            .find(|(_, c)| c.is_none())
            .map(|(n, _)| *n)
            .unwrap();
        return Err(HarnessError::Schema {
            column: missing.to_string(),
        });
    }

    let mut streams = LogStreams::default();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize| record.get(idx).unwrap_or("");

        let t = parse_f64(field(required[0]), line, "t")?;
        if let Some(last) = streams.gyro.last() {
            if t <= last.t {
                return Err(HarnessError::Parse {
                    line,
                    message: format!("timestamp {t} does not increase past {}", last.t),
                });
            }
        }
        let w = Vector3::new(
            parse_f64(field(required[1]), line, "wx")?,
            parse_f64(field(required[2]), line, "wy")?,
            parse_f64(field(required[3]), line, "wz")?,
        );
        let frame = match field(required[4]) {
            "inertial" => Frame::Inertial,
            "body" => Frame::Body,
            other => {
                return Err(HarnessError::Parse {
                    line,
                    message: format!("column `w_frame`: expected `inertial` or `body`, got `{other}`"),
                })
            }
        };
        streams.gyro.push(GyroSample { t, w, frame });

        let dir_fields = [
            field(required[5]),
            field(required[6]),
            field(required[7]),
            field(required[8]),
        ];
        let blanks = dir_fields.iter().filter(|f| f.is_empty()).count();
        if blanks == 0 {
            let mut reading = Vector3::new(
                parse_f64(dir_fields[0], line, "dx")?,
                parse_f64(dir_fields[1], line, "dy")?,
                parse_f64(dir_fields[2], line, "dz")?,
            );
            let kind = match dir_fields[3] {
                "inertial_ref" => MeasurementKind::InertialRef,
                "body_ref" => MeasurementKind::BodyRef,
                other => {
                    return Err(HarnessError::Parse {
                        line,
                        message: format!(
                            "column `d_kind`: expected `inertial_ref` or `body_ref`, got `{other}`"
                        ),
                    })
                }
            };
            let norm = reading.norm();
            if !norm.is_finite() || norm == 0.0 {
                return Err(HarnessError::Parse {
                    line,
                    message: "direction reading has zero or non-finite norm".to_string(),
                });
            }
            if (norm - 1.0).abs() > 1e-3 {
                log::warn!("log line {line}: direction norm {norm} off unit; renormalizing");
            }
            if (norm - 1.0).abs() > 1e-9 {
                reading /= norm;
            }
            streams.directions.push(DirSample { t, reading, kind });
        } else if blanks != 4 {
            return Err(HarnessError::Parse {
                line,
                message: "direction columns must be all present or all blank".to_string(),
            });
        }

        if have_truth {
            let cells: Vec<&str> = truth_cols.iter().map(|c| field(c.unwrap())).collect();
            let blanks = cells.iter().filter(|f| f.is_empty()).count();
            if blanks == 0 {
                let mut m = Matrix3::zeros();
                for (idx, cell) in cells.iter().enumerate() {
                    m[(idx / 3, idx % 3)] = parse_f64(cell, line, TRUTH_COLUMNS[idx])?;
                }
                if !(m.determinant() > 0.0) {
                    return Err(HarnessError::Parse {
                        line,
                        message: "truth rotation has non-positive determinant".to_string(),
                    });
                }
                let defect = (m.transpose() * m - Matrix3::identity()).norm();
                if defect > 1e-3 {
                    log::warn!(
                        "log line {line}: truth rotation off orthonormal by {defect:.2e}; projecting"
                    );
                }
                let r = if defect > 1e-9 {
                    let p = proper_svd(&m);
                    Rotation::from_matrix_unchecked(p.u.matrix() * p.v.matrix().transpose())
                } else {
                    Rotation::from_matrix_unchecked(m)
                };
                streams.truth.push((t, r));
            } else if blanks != 9 {
                return Err(HarnessError::Parse {
                    line,
                    message: "truth columns must be all present or all blank".to_string(),
                });
            }
        }
    }
    Ok(streams)
}

/// [`read_log`] from a file path.
pub fn ingest_log(path: &Path) -> Result<LogStreams, HarnessError> {
    let file = std::fs::File::open(path)?;
    read_log(io::BufReader::new(file))
}

fn csv_err(e: csv::Error) -> HarnessError {
    let line = e.position().map_or(0, |p| p.line());
    HarnessError::Parse {
        line,
        message: e.to_string(),
    }
}
