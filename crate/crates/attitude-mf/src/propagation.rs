//! Uncertainty propagation through stochastic attitude kinematics.
//!
//! Attitude kinematics driven by white angular-velocity noise can be written
//! two ways: *right-trivialized*, `dR = (ω dt + H dW)^∧ R`, with the angular
//! velocity resolved in the inertial frame, or *left-trivialized*,
//! `dR = R (Ω dt + H dW)^∧`, resolved in the body frame. Deterministically
//! the two are the same equation in different coordinates; stochastically
//! they are not, and this module makes the difference computable:
//!
//! * [`phi_magnus`] — second-order Magnus rotation vector of the advection
//!   flow over an interval, for either trivialization;
//! * [`gramian`] — the diffusion Gramian, i.e. the noise covariance
//!   conjugated along the advection flow and accumulated over the interval;
//! * [`transition_right`] / [`transition_left`] — first-moment transition
//!   operators: `E[R(τ)] ≈ Φ_R·E[R(t)]` and `E[R(τ)] ≈ E[R(t)]·Φ_L`;
//! * [`propagate_mf_right`] / [`propagate_mf_left`] — one discrete step of
//!   matrix Fisher parameter propagation under isotropic noise, where the
//!   asymmetry becomes visible in which SVD factor stays put;
//! * [`simulate_sde`] — a geometric Euler–Maruyama path sampler staying
//!   exactly on SO(3), used as the ground-truth oracle for everything above.

use nalgebra::{Matrix3, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::matrix_fisher::{MatrixFisher, MfError, MomentSolver};
use crate::so3::{exp_so3, log_so3, RotVec, Rotation};

/// Frame in which an angular velocity signal is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// `ω(t)`: drives the right-trivialized kinematics `dR = ω̂ R dt + …`.
    Inertial,
    /// `Ω(t)`: drives the left-trivialized kinematics `dR = R Ω̂ dt + …`.
    Body,
}

/// How to read the signal between samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    ZeroOrderHold,
    Linear,
}

/// Which trivialization an operator refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trivialization {
    Right,
    Left,
}

/// A time-indexed angular velocity trajectory.
#[derive(Debug, Clone)]
pub struct AngularVelocitySignal {
    pub frame: Frame,
    /// `(t [s], ω [rad/s])`, strictly increasing in `t`.
    pub samples: Vec<(f64, Vector3<f64>)>,
    pub interpolation: Interpolation,
}

impl AngularVelocitySignal {
    /// Builds a signal, validating the timestamp and finiteness invariants.
    pub fn new(
        frame: Frame,
        samples: Vec<(f64, Vector3<f64>)>,
        interpolation: Interpolation,
    ) -> Self {
        assert!(!samples.is_empty(), "signal needs at least one sample");
        for pair in samples.windows(2) {
            assert!(
                pair[0].0 < pair[1].0,
                "timestamps must be strictly increasing"
            );
        }
        for (t, w) in &samples {
            assert!(t.is_finite() && w.iter().all(|x| x.is_finite()));
        }
        Self {
            frame,
            samples,
            interpolation,
        }
    }

    /// A constant signal (single sample, zero-order hold).
    pub fn constant(frame: Frame, w: Vector3<f64>) -> Self {
        Self::new(frame, vec![(0.0, w)], Interpolation::ZeroOrderHold)
    }

    /// Signal value at `t`; clamps to the end samples outside the range.
    pub fn value(&self, t: f64) -> Vector3<f64> {
        // Index of the first sample with timestamp > t.
        let after = self.samples.partition_point(|&(ts, _)| ts <= t);
        if after == 0 {
            return self.samples[0].1;
        }
        match self.interpolation {
            Interpolation::ZeroOrderHold => self.samples[after - 1].1,
            Interpolation::Linear => {
                if after == self.samples.len() {
                    return self.samples[after - 1].1;
                }
                let (t0, w0) = self.samples[after - 1];
                let (t1, w1) = self.samples[after];
                let alpha = (t - t0) / (t1 - t0);
                w0 + alpha * (w1 - w0)
            }
        }
    }
}

/// Diffusion model `H(t)` scaling the Wiener process, with an isotropic
/// shortcut `H ≡ γI` where closed-form parameter propagation applies.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    /// `(t [s], H [rad/√s])`, zero-order hold, strictly increasing in `t`.
    samples: Vec<(f64, Matrix3<f64>)>,
    isotropic_gamma: Option<f64>,
}

impl NoiseModel {
    /// Isotropic noise `H(t) ≡ γI`.
    pub fn isotropic(gamma: f64) -> Self {
        assert!(gamma.is_finite() && gamma >= 0.0);
        Self {
            samples: vec![(0.0, gamma * Matrix3::identity())],
            isotropic_gamma: Some(gamma),
        }
    }

    /// No diffusion at all.
    pub fn zero() -> Self {
        Self::isotropic(0.0)
    }

    /// A constant, possibly anisotropic `H`.
    pub fn constant(h: Matrix3<f64>) -> Self {
        Self::time_varying(vec![(0.0, h)])
    }

    /// A time-varying `H(t)` held constant between samples.
    pub fn time_varying(samples: Vec<(f64, Matrix3<f64>)>) -> Self {
        assert!(!samples.is_empty(), "noise model needs at least one sample");
        for pair in samples.windows(2) {
            assert!(
                pair[0].0 < pair[1].0,
                "timestamps must be strictly increasing"
            );
        }
        for (t, h) in &samples {
            assert!(t.is_finite() && h.iter().all(|x| x.is_finite()));
        }
        Self {
            samples,
            isotropic_gamma: None,
        }
    }

    /// `H(t)` (zero-order hold, clamped at the ends).
    pub fn h(&self, t: f64) -> Matrix3<f64> {
        let after = self.samples.partition_point(|&(ts, _)| ts <= t);
        self.samples[after.saturating_sub(1)].1
    }

    /// The isotropic concentration γ if this model was built as `γI`.
    pub fn isotropic_gamma(&self) -> Option<f64> {
        self.isotropic_gamma
    }
}

/// Second-order Magnus rotation vector over one interval of exactly linear
/// (or constant) angular velocity.
///
/// For the right trivialization the flow is `Ṙ = ω̂R` and the two-term
/// Magnus/Picard expansion of the exponent is
/// `½(ω_a+ω_b)Δ − (Δ²/12)·ω_a×ω_b`; the left trivialization `Ṙ = RΩ̂`
/// carries the opposite bracket sign.
fn segment_phi(w_a: &Vector3<f64>, w_b: &Vector3<f64>, dt: f64, triv: Trivialization) -> RotVec {
    let base = 0.5 * (w_a + w_b) * dt;
    let cross = w_a.cross(w_b) * (dt * dt / 12.0);
    match triv {
        Trivialization::Right => base - cross,
        Trivialization::Left => base + cross,
    }
}

/// Magnus rotation vector `φ(τ, t)` of the advection flow: for the right
/// trivialization the noise-free flow satisfies `R(τ) = exp(φ̂_R(τ,t))·R(t)`,
/// for the left one `R(τ) = R(t)·exp(φ̂_L(τ,t))`, both up to the third-order
/// Magnus remainder within each interpolation segment.
///
/// Intervals spanning several segments are composed exactly by exponential
/// products and reduced back to a (principal) rotation vector.
pub fn phi_magnus(
    signal: &AngularVelocitySignal,
    t: f64,
    tau: f64,
    triv: Trivialization,
) -> RotVec {
    assert!(tau >= t, "backward intervals are not supported");
    if tau == t {
        return RotVec::zeros();
    }
    let mut cuts = vec![t];
    for &(ts, _) in &signal.samples {
        if ts > t && ts < tau {
            cuts.push(ts);
        }
    }
    cuts.push(tau);

    let mut phis = Vec::with_capacity(cuts.len() - 1);
    for pair in cuts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let phi = match signal.interpolation {
            // Constant over the segment: the bracket vanishes and the
            // integral is exact.
            Interpolation::ZeroOrderHold => signal.value(a) * (b - a),
            Interpolation::Linear => segment_phi(&signal.value(a), &signal.value(b), b - a, triv),
        };
        phis.push(phi);
    }
    if phis.len() == 1 {
        return phis[0];
    }
    let mut m = Matrix3::identity();
    match triv {
        // Later segments act from the left: exp(φ_n)···exp(φ_1).
        Trivialization::Right => {
            for phi in &phis {
                m = exp_so3(phi).matrix() * m;
            }
        }
        // Later segments act from the right: exp(φ_1)···exp(φ_n).
        Trivialization::Left => {
            for phi in &phis {
                m *= exp_so3(phi).matrix();
            }
        }
    }
    log_so3(&Rotation::from_matrix_unchecked(m))
}

/// Default trapezoid resolution for [`gramian`].
pub const GRAMIAN_NODES_DEFAULT: usize = 16;

/// Diffusion Gramian over `[t, τ]` with a configurable trapezoid resolution.
///
/// The integrand conjugates the instantaneous noise covariance `H(σ)Hᵀ(σ)`
/// along the advection flow: `exp(−φ̂(σ))·HHᵀ·exp(φ̂(σ))` for the right
/// trivialization and `exp(φ̂(σ))·HHᵀ·exp(−φ̂(σ))` for the left. The output
/// is symmetrized; it is PSD up to quadrature rounding.
pub fn gramian_with_nodes<F: Fn(f64) -> RotVec>(
    noise: &NoiseModel,
    phi_path: F,
    t: f64,
    tau: f64,
    triv: Trivialization,
    nodes: usize,
) -> Matrix3<f64> {
    assert!(tau >= t, "backward intervals are not supported");
    assert!(nodes >= 2, "trapezoid rule needs at least two nodes");
    if tau == t {
        return Matrix3::zeros();
    }
    let step = (tau - t) / (nodes - 1) as f64;
    let mut g = Matrix3::zeros();
    for i in 0..nodes {
        let sigma = t + i as f64 * step;
        let h = noise.h(sigma);
        let hh = h * h.transpose();
        let e = *exp_so3(&phi_path(sigma)).matrix();
        let kernel = match triv {
            Trivialization::Right => e.transpose() * hh * e,
            Trivialization::Left => e * hh * e.transpose(),
        };
        let weight = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
        g += weight * step * kernel;
    }
    0.5 * (g + g.transpose())
}

/// [`gramian_with_nodes`] at the default resolution.
pub fn gramian<F: Fn(f64) -> RotVec>(
    noise: &NoiseModel,
    phi_path: F,
    t: f64,
    tau: f64,
    triv: Trivialization,
) -> Matrix3<f64> {
    gramian_with_nodes(noise, phi_path, t, tau, triv, GRAMIAN_NODES_DEFAULT)
}

/// First-moment transition operator of the right-trivialized kinematics:
/// `E[R(τ)] = Φ_R(τ,t)·E[R(t)] + O((τ−t)²)`, with
/// `Φ_R = exp(φ̂_R)·{I + ½(G_R − tr(G_R)·I)}`.
pub fn transition_right(
    t: f64,
    tau: f64,
    signal: &AngularVelocitySignal,
    noise: &NoiseModel,
) -> Matrix3<f64> {
    debug_assert!(
        signal.frame == Frame::Inertial,
        "right trivialization expects an inertial-frame signal"
    );
    let phi = phi_magnus(signal, t, tau, Trivialization::Right);
    let g = gramian(
        noise,
        |sigma| phi_magnus(signal, t, sigma, Trivialization::Right),
        t,
        tau,
        Trivialization::Right,
    );
    exp_so3(&phi).matrix()
        * (Matrix3::identity() + 0.5 * (g - g.trace() * Matrix3::identity()))
}

/// First-moment transition operator of the left-trivialized kinematics:
/// `E[R(τ)] = E[R(t)]·Φ_L(τ,t) + O((τ−t)²)`, with
/// `Φ_L = {I + ½(G_L − tr(G_L)·I)}·exp(φ̂_L)`.
pub fn transition_left(
    t: f64,
    tau: f64,
    signal: &AngularVelocitySignal,
    noise: &NoiseModel,
) -> Matrix3<f64> {
    debug_assert!(
        signal.frame == Frame::Body,
        "left trivialization expects a body-frame signal"
    );
    let phi = phi_magnus(signal, t, tau, Trivialization::Left);
    let g = gramian(
        noise,
        |sigma| phi_magnus(signal, t, sigma, Trivialization::Left),
        t,
        tau,
        Trivialization::Left,
    );
    (Matrix3::identity() + 0.5 * (g - g.trace() * Matrix3::identity())) * exp_so3(&phi).matrix()
}

/// Shrinks the moment by `1 − hγ²` and re-fits the concentrations, reusing
/// a caller-provided solver for warm starts.
fn shrink_concentrations(
    solver: &mut MomentSolver,
    s: &Vector3<f64>,
    h: f64,
    gamma: f64,
) -> Result<Vector3<f64>, MfError> {
    assert!(h > 0.0, "step must be positive");
    assert!(gamma >= 0.0, "gamma must be non-negative");
    let factor = 1.0 - h * gamma * gamma;
    assert!(
        factor > 0.0,
        "step too large: h·γ² must stay below 1 for the first-order moment shrinkage"
    );
    if gamma == 0.0 {
        // No diffusion: the dispersion is carried over unchanged.
        return Ok(*s);
    }
    let d = crate::matrix_fisher::normalizer(s)?.d;
    solver.solve(&(factor * d), Some(*s))
}

/// One discrete step of matrix Fisher propagation through the
/// right-trivialized kinematics with isotropic noise: the left factor
/// advances by the step rotation, the body-frame factor `V` stays fixed, and
/// the concentrations re-fit the shrunk moment.
pub fn propagate_mf_right_with(
    solver: &mut MomentSolver,
    f_k: &MatrixFisher,
    omega_k: &Vector3<f64>,
    h: f64,
    gamma: f64,
) -> Result<MatrixFisher, MfError> {
    let p = f_k.svd();
    let s_new = shrink_concentrations(solver, &p.s, h, gamma)?;
    let u_new = exp_so3(&(h * omega_k)) * p.u;
    Ok(MatrixFisher::from_proper(u_new, s_new, p.v))
}

/// [`propagate_mf_right_with`] with a one-shot solver.
pub fn propagate_mf_right(
    f_k: &MatrixFisher,
    omega_k: &Vector3<f64>,
    h: f64,
    gamma: f64,
) -> Result<MatrixFisher, MfError> {
    propagate_mf_right_with(&mut MomentSolver::new(), f_k, omega_k, h, gamma)
}

/// One discrete step of matrix Fisher propagation through the
/// left-trivialized kinematics with isotropic noise: the inertial factor `U`
/// stays fixed and the body-frame factor absorbs the step rotation.
pub fn propagate_mf_left_with(
    solver: &mut MomentSolver,
    f_k: &MatrixFisher,
    omega_big_k: &Vector3<f64>,
    h: f64,
    gamma: f64,
) -> Result<MatrixFisher, MfError> {
    let p = f_k.svd();
    let s_new = shrink_concentrations(solver, &p.s, h, gamma)?;
    let v_new = exp_so3(&(-h * omega_big_k)) * p.v;
    Ok(MatrixFisher::from_proper(p.u, s_new, v_new))
}

/// [`propagate_mf_left_with`] with a one-shot solver.
pub fn propagate_mf_left(
    f_k: &MatrixFisher,
    omega_big_k: &Vector3<f64>,
    h: f64,
    gamma: f64,
) -> Result<MatrixFisher, MfError> {
    propagate_mf_left_with(&mut MomentSolver::new(), f_k, omega_big_k, h, gamma)
}

/// Walks one sample path of the SDE from `t = 0` to `t_end`, visiting every
/// post-step state. The trivialization follows the signal's frame.
fn sde_walk(
    r0: &Rotation,
    signal: &AngularVelocitySignal,
    noise: &NoiseModel,
    h: f64,
    t_end: f64,
    rng: &mut impl Rng,
    mut visit: impl FnMut(f64, &Rotation),
) {
    assert!(h > 0.0, "step must be positive");
    let mut r = *r0;
    let mut t = 0.0;
    while t < t_end - 1e-12 {
        let dt = h.min(t_end - t);
        // Midpoint drift keeps the deterministic part second-order accurate
        // for time-varying signals; the diffusion term stays Euler–Maruyama.
        let w = signal.value(t + 0.5 * dt);
        let xi = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let inc = w * dt + noise.h(t) * xi * dt.sqrt();
        r = match signal.frame {
            Frame::Inertial => exp_so3(&inc) * r,
            Frame::Body => r * exp_so3(&inc),
        };
        t += dt;
        visit(t, &r);
    }
}

/// Samples one path of the stochastic kinematics by geometric
/// Euler–Maruyama: each step left- (right-trivialized) or right-multiplies
/// (left-trivialized) by `exp((ω·dt + H·√dt·ξ)^∧)`, so every returned state
/// is exactly a rotation matrix.
pub fn simulate_sde(
    r0: &Rotation,
    signal: &AngularVelocitySignal,
    noise: &NoiseModel,
    h: f64,
    t_end: f64,
    rng: &mut impl Rng,
) -> Vec<(f64, Rotation)> {
    let mut out = vec![(0.0, *r0)];
    sde_walk(r0, signal, noise, h, t_end, rng, |t, r| out.push((t, *r)));
    out
}

/// Ensemble first-moment statistics of the SDE terminal state.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleStats {
    /// Sample mean of `R(t_end)` over the ensemble.
    pub mean: Matrix3<f64>,
    /// Per-entry standard error of the mean.
    pub standard_error: Matrix3<f64>,
    pub paths: usize,
}

/// Runs `n_paths` independent SDE paths (path `i` seeded with
/// `base_seed + i`) and returns the terminal first-moment statistics.
///
/// Paths are distributed across threads in fixed-size chunks whose partial
/// sums are reduced in chunk order, so the result is bitwise reproducible
/// regardless of thread count.
pub fn ensemble_stats(
    r0: &Rotation,
    signal: &AngularVelocitySignal,
    noise: &NoiseModel,
    h: f64,
    t_end: f64,
    n_paths: usize,
    base_seed: u64,
) -> EnsembleStats {
    assert!(n_paths >= 2);
    const CHUNK: usize = 512;
    let n_chunks = n_paths.div_ceil(CHUNK);
    let partials: Vec<(Matrix3<f64>, Matrix3<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut sum = Matrix3::zeros();
            let mut sumsq = Matrix3::zeros();
            for i in (c * CHUNK)..((c + 1) * CHUNK).min(n_paths) {
                let mut rng = StdRng::seed_from_u64(base_seed.wrapping_add(i as u64));
                let mut r = *r0;
                sde_walk(r0, signal, noise, h, t_end, &mut rng, |_, state| r = *state);
                let m = *r.matrix();
                sum += m;
                sumsq += m.component_mul(&m);
            }
            (sum, sumsq)
        })
        .collect();
    let mut sum = Matrix3::zeros();
    let mut sumsq = Matrix3::zeros();
    for (s, q) in partials {
        sum += s;
        sumsq += q;
    }
    let n = n_paths as f64;
    let mean = sum / n;
    let variance = (sumsq / n - mean.component_mul(&mean)) * (n / (n - 1.0));
    EnsembleStats {
        mean,
        standard_error: variance.map(|v| (v.max(0.0) / n).sqrt()),
        paths: n_paths,
    }
}
