//! The matrix Fisher distribution on SO(3).
//!
//! `p(R) = exp(tr(Fᵀ R)) / c(F)` with respect to normalized Haar measure
//! (`c(0) = 1`). Through the proper singular value decomposition
//! `F = U·diag(s)·Vᵀ` everything of interest — normalizing constant, moments,
//! maximum-likelihood fitting — reduces to functions of the three proper
//! singular values `s`, which this module evaluates by one-dimensional
//! adaptive quadrature of Bessel-function kernels.
//!
//! All exponentials are carried in log space with explicit offsets so that
//! concentrations up to `max|sᵢ| = 500` stay inside `f64` range.

use crate::numeric::{adaptive_simpson, bessel_i0_scaled, bessel_i1_scaled};
use crate::so3::{hat, proper_svd, random_rotation, ProperSvd, Rotation};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MfError {
    /// Adaptive quadrature of the normalizing-constant kernels failed to
    /// reach the required relative tolerance.
    #[error("quadrature failed to converge (achieved relative error {achieved:.3e})")]
    QuadratureFailure { achieved: f64 },
    /// A matrix offered as a first moment has largest proper singular value
    /// ≥ 1 and therefore cannot be the mean of any distribution on SO(3).
    #[error("not a first moment of a rotation distribution (d1 = {d1:.6})")]
    NotAMoment { d1: f64 },
    /// The moment-inversion Newton iteration did not converge.
    #[error("moment inversion failed to converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: u32, residual: f64 },
}

/// Matrix Fisher distribution with parameter `F`, carrying its proper SVD.
///
/// Values are immutable: every operation that changes the parameter builds a
/// new value, so the cached decomposition can never go stale.
#[derive(Debug, Clone, Copy)]
pub struct MatrixFisher {
    f: Matrix3<f64>,
    svd: ProperSvd,
}

impl MatrixFisher {
    /// Wraps a parameter matrix, computing its proper SVD.
    pub fn new(f: Matrix3<f64>) -> Self {
        MatrixFisher {
            f,
            svd: proper_svd(&f),
        }
    }

    /// The uniform distribution, `F = 0`.
    pub fn uniform() -> Self {
        Self::new(Matrix3::zeros())
    }

    /// Builds the distribution directly from proper-SVD factors. Falls back
    /// to a fresh decomposition if the provided singular values are not in
    /// canonical order (`s1 ≥ s2 ≥ |s3|`).
    pub fn from_proper(u: Rotation, s: Vector3<f64>, v: Rotation) -> Self {
        let f = u.matrix() * Matrix3::from_diagonal(&s) * v.matrix().transpose();
        if s[0] >= s[1] && s[1] >= s[2].abs() {
            MatrixFisher {
                f,
                svd: ProperSvd { u, s, v },
            }
        } else {
            Self::new(f)
        }
    }

    pub fn f(&self) -> &Matrix3<f64> {
        &self.f
    }

    pub fn svd(&self) -> &ProperSvd {
        &self.svd
    }

    /// Proper singular values of `F` (the concentration parameters).
    pub fn s(&self) -> Vector3<f64> {
        self.svd.s
    }

    /// The mode / Frobenius-MMSE attitude `U·Vᵀ`.
    ///
    /// When singular values repeat, the SVD factors are not unique and any
    /// valid choice may be returned; only gauge-invariant functions of the
    /// result should be consumed downstream.
    pub fn mean_attitude(&self) -> Rotation {
        self.svd.u * self.svd.v.transpose()
    }
}

/// Normalizing constant `c(S)` together with its logarithmic derivatives
/// `dᵢ = (∂c/∂sᵢ)/c`, which are exactly the proper singular values of the
/// first moment.
///
/// The log form is the primary representation: for concentrations in the
/// hundreds the raw constant overflows `f64`.
#[derive(Debug, Clone, Copy)]
pub struct Normalizer {
    pub log_c: f64,
    pub d: Vector3<f64>,
}

impl Normalizer {
    /// Raw normalizing constant. Overflows to `inf` once `log_c` exceeds
    /// ~709; use `log_c` in that regime.
    pub fn c(&self) -> f64 {
        self.log_c.exp()
    }

    /// Raw partial derivatives `∂c/∂sᵢ`. Subject to the same overflow caveat
    /// as [`Normalizer::c`].
    pub fn dc(&self) -> Vector3<f64> {
        self.d * self.c()
    }
}

/// Proper-SVD form of a first moment `E[R] = U·diag(d)·Vᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct MomentTriple {
    pub d: Vector3<f64>,
    pub u: Rotation,
    pub v: Rotation,
}

const QUAD_TARGET: f64 = 1e-11;
const QUAD_ACCEPT: f64 = 1e-9;
const QUAD_DEPTH: u32 = 48;

/// Computes `c(S)` and all three partials `∂c/∂sᵢ` for arbitrary finite `s`
/// (negative entries allowed; validated domain `max|sᵢ| ≤ 5000`).
///
/// One cyclic pair `(i,j)` is folded into Bessel functions and the third
/// index `k` remains in the exponent:
///
/// `c = ∫ ½ I₀(a) I₀(b) e^{sₖu} du`,  `a = (sᵢ−sⱼ)(1−u)/2`, `b = (sᵢ+sⱼ)(1+u)/2`,
///
/// with the partials obtained by differentiating under the integral sign
/// (`I₀' = I₁`, with `I₁` odd). All four integrands share one adaptive grid.
/// The exponent `|a|+|b|+sₖu` is linear in `u`, so the offset that keeps the
/// scaled integrand ≤ 1 is its maximum over the endpoints.
pub fn normalizer(s: &Vector3<f64>) -> Result<Normalizer, MfError> {
    normalizer_cyclic(s, 2)
}

/// Same as [`normalizer`] with an explicit choice of which index stays in the
/// exponent; all three choices must agree, which the tests exploit.
pub(crate) fn normalizer_cyclic(s: &Vector3<f64>, k: usize) -> Result<Normalizer, MfError> {
    let (i, j) = ((k + 1) % 3, (k + 2) % 3);
    let (si, sj, sk) = (s[i], s[j], s[k]);

    let diff = si - sj;
    let sum = si + sj;
    // E(u) = |a| + |b| + sk·u is linear; its endpoint values give the offset.
    let e_at = |u: f64| 0.5 * diff.abs() * (1.0 - u) + 0.5 * sum.abs() * (1.0 + u) + sk * u;
    let (e_lo, e_hi) = (e_at(-1.0), e_at(1.0));
    let offset = e_lo.max(e_hi);

    let kernel = move |u: f64| -> [f64; 4] {
        let a = 0.5 * diff * (1.0 - u);
        let b = 0.5 * sum * (1.0 + u);
        let w = (a.abs() + b.abs() + sk * u - offset).exp();
        let i0a = bessel_i0_scaled(a);
        let i0b = bessel_i0_scaled(b);
        let i1a = bessel_i1_scaled(a);
        let i1b = bessel_i1_scaled(b);
        let gc = 0.5 * i0a * i0b * w;
        let gi = 0.25 * ((1.0 - u) * i1a * i0b + (1.0 + u) * i0a * i1b) * w;
        let gj = 0.25 * (-(1.0 - u) * i1a * i0b + (1.0 + u) * i0a * i1b) * w;
        let gk = 0.5 * u * i0a * i0b * w;
        [gc, gi, gj, gk]
    };

    let points = initial_partition(e_lo, e_hi, 0.5 * diff.abs() + 0.5 * sum.abs() + sk.abs());
    let q = adaptive_simpson(&kernel, &points, QUAD_TARGET, QUAD_DEPTH);
    if q.rel_err > QUAD_ACCEPT || !q.value[0].is_finite() || q.value[0] <= 0.0 {
        return Err(MfError::QuadratureFailure {
            achieved: q.rel_err,
        });
    }
    let c_scaled = q.value[0];
    let mut d = Vector3::zeros();
    d[i] = q.value[1] / c_scaled;
    d[j] = q.value[2] / c_scaled;
    d[k] = q.value[3] / c_scaled;
    Ok(Normalizer {
        log_c: c_scaled.ln() + offset,
        d,
    })
}

/// Pairwise partial `∂c/∂sᵢ + ∂c/∂sⱼ` from its own dedicated kernel,
/// `∫ ½ (1+u) I₀(a) I₁(b) e^{sₖu} du` (scaled by `e^{-offset}` like the main
/// integral). This is an independent identity used to cross-validate the
/// single-index partials.
#[cfg(test)]
pub(crate) fn pair_partial_scaled(s: &Vector3<f64>, k: usize) -> (f64, f64, f64) {
    let (i, j) = ((k + 1) % 3, (k + 2) % 3);
    let (si, sj, sk) = (s[i], s[j], s[k]);
    let diff = si - sj;
    let sum = si + sj;
    let e_at = |u: f64| 0.5 * diff.abs() * (1.0 - u) + 0.5 * sum.abs() * (1.0 + u) + sk * u;
    let offset = e_at(-1.0).max(e_at(1.0));
    let kernel = move |u: f64| -> [f64; 2] {
        let a = 0.5 * diff * (1.0 - u);
        let b = 0.5 * sum * (1.0 + u);
        let w = (a.abs() + b.abs() + sk * u - offset).exp();
        let c = 0.5 * bessel_i0_scaled(a) * bessel_i0_scaled(b) * w;
        let pair = 0.5 * (1.0 + u) * bessel_i0_scaled(a) * bessel_i1_scaled(b) * w;
        [c, pair]
    };
    let points = initial_partition(
        e_at(-1.0),
        e_at(1.0),
        0.5 * diff.abs() + 0.5 * sum.abs() + sk.abs(),
    );
    let q = adaptive_simpson(&kernel, &points, QUAD_TARGET, QUAD_DEPTH);
    (q.value[0], q.value[1], offset)
}

/// Initial quadrature partition of `[-1, 1]`.
///
/// The integrand varies on two scales: the (linear) exponent, whose slope is
/// `½(e_hi − e_lo)`, and the scaled Bessel factors, whose arguments collapse
/// to zero at one endpoint each — the integrand turns over there in layers
/// of width `~1/layer_scale`. (A rank-one concentration is the extreme case:
/// the exponent is exactly flat while both endpoints carry such layers.)
/// Geometric refinement from both endpoints at the layer width lets the
/// coarse pass see every feature before adaptivity takes over.
fn initial_partition(e_lo: f64, e_hi: f64, layer_scale: f64) -> Vec<f64> {
    let scale = layer_scale.max(0.5 * (e_hi - e_lo).abs());
    if scale < 2.0 {
        return vec![-1.0, 0.0, 1.0];
    }
    let mut pts = vec![-1.0, 0.0, 1.0];
    for sign in [-1.0, 1.0] {
        let mut w = 2.0 / scale;
        while w < 2.0 {
            pts.push(sign * (1.0 - w));
            w *= 2.0;
        }
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    pts
}

/// Log density `tr(FᵀR) − log c(S)`.
pub fn log_density(mf: &MatrixFisher, r: &Rotation) -> Result<f64, MfError> {
    let n = normalizer(&mf.s())?;
    Ok((mf.f().transpose() * r.matrix()).trace() - n.log_c)
}

/// Density `exp(tr(FᵀR)) / c(S)`, evaluated in log space internally.
pub fn density(mf: &MatrixFisher, r: &Rotation) -> Result<f64, MfError> {
    Ok(log_density(mf, r)?.exp())
}

/// First moment `E[R] = U·diag(d)·Vᵀ` with `dᵢ = (∂c/∂sᵢ)/c`.
pub fn first_moment(mf: &MatrixFisher) -> Result<Matrix3<f64>, MfError> {
    let n = normalizer(&mf.s())?;
    Ok(mf.svd().u.matrix() * Matrix3::from_diagonal(&n.d) * mf.svd().v.matrix().transpose())
}

/// First moment in proper-SVD form (shares `U`, `V` with the parameter).
pub fn moment_triple(mf: &MatrixFisher) -> Result<MomentTriple, MfError> {
    let n = normalizer(&mf.s())?;
    Ok(MomentTriple {
        d: n.d,
        u: mf.svd().u,
        v: mf.svd().v,
    })
}

/// Maximum-likelihood parameter recovery: given a matrix that is the first
/// moment of some rotation distribution, find the matrix Fisher distribution
/// with exactly that moment.
///
/// The orientation factors transfer directly from the proper SVD of the
/// moment; the concentrations solve `d(s) = d_target` by damped Newton
/// iteration (see [`MomentSolver`]).
pub fn mle_from_moment(ebar: &Matrix3<f64>) -> Result<MatrixFisher, MfError> {
    let p = proper_svd(ebar);
    let s = MomentSolver::new().solve(&p.s, None)?;
    Ok(MatrixFisher::from_proper(p.u, s, p.v))
}

/// Convenience wrapper around [`MomentSolver`] for one-off inversions.
pub fn solve_concentrations(
    d_target: &Vector3<f64>,
    warm_start: Option<Vector3<f64>>,
) -> Result<Vector3<f64>, MfError> {
    MomentSolver::new().solve(d_target, warm_start)
}

/// Newton solver for the moment equations `dᵢ(s) = (∂c/∂sᵢ)/c = targetᵢ`.
///
/// The Jacobian `∂d/∂s` (the Hessian of `log c`, hence symmetric positive
/// definite) is estimated by central finite differences and then kept up to
/// date with Broyden rank-one corrections; a filter that solves a slowly
/// drifting sequence of targets can reuse one solver instance and amortize
/// the finite-difference cost across many steps.
#[derive(Debug, Default, Clone)]
pub struct MomentSolver {
    cached_jacobian: Option<(Vector3<f64>, Matrix3<f64>)>,
}

const SOLVE_TOL: f64 = 1e-10;
const MAX_ITERATIONS: u32 = 200;
/// Keeps iterates inside the validated quadrature domain. A conjugate update
/// can push a rank-one posterior's concentration to roughly the measurement
/// concentration κ before process noise pulls it back toward equilibrium, so
/// the domain must comfortably exceed realistic κ values.
const S_CLAMP: f64 = 5000.0;

impl MomentSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solves for the concentrations reproducing `d_target`, optionally
    /// starting from a known nearby solution.
    pub fn solve(
        &mut self,
        d_target: &Vector3<f64>,
        warm_start: Option<Vector3<f64>>,
    ) -> Result<Vector3<f64>, MfError> {
        let d1 = d_target.amax();
        if d1 >= 1.0 {
            return Err(MfError::NotAMoment { d1 });
        }
        if d1 < 1e-14 {
            return Ok(Vector3::zeros());
        }
        // Moments with two vanishing components force the matching
        // concentrations to vanish exactly; reduce to a scalar problem so
        // the zeros stay bit-exact (rank-one posteriors rely on this).
        if d_target[1].abs() <= 1e-12 && d_target[2].abs() <= 1e-12 {
            let s1 = solve_scalar(d_target[0], warm_start.map(|w| w[0]))?;
            return Ok(Vector3::new(s1, 0.0, 0.0));
        }

        let mut s = warm_start.unwrap_or_else(|| initial_guess(d_target));
        let mut residual = normalizer(&s)?.d - d_target;
        let mut jac = match &self.cached_jacobian {
            Some((s_at, j)) if (s_at - s).amax() < 0.5 * (1.0 + s.amax()) => *j,
            _ => fd_jacobian(&s)?,
        };
        let mut stale = 0u32;

        for iteration in 0..MAX_ITERATIONS {
            if residual.amax() <= SOLVE_TOL {
                self.cached_jacobian = Some((s, jac));
                return Ok(s);
            }
            let step = match jac.lu().solve(&(-residual)) {
                Some(step) => step,
                None => {
                    jac = fd_jacobian(&s)?;
                    stale = 0;
                    jac.lu()
                        .solve(&(-residual))
                        .ok_or(MfError::NoConvergence {
                            iterations: iteration,
                            residual: residual.amax(),
                        })?
                }
            };

            // Damped line search: halve until the residual shrinks.
            let mut lambda = 1.0;
            let mut improved = false;
            let (mut s_new, mut r_new) = (s, residual);
            for _ in 0..30 {
                let candidate = (s + lambda * step).map(|x| x.clamp(-S_CLAMP, S_CLAMP));
                let r = normalizer(&candidate)?.d - d_target;
                if r.amax() < residual.amax() {
                    s_new = candidate;
                    r_new = r;
                    improved = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !improved {
                jac = fd_jacobian(&s)?;
                stale = 0;
                continue;
            }

            // Broyden update keeps the Jacobian honest between FD refreshes.
            let ds = s_new - s;
            let dr = r_new - residual;
            let denom = ds.dot(&ds);
            if denom > 0.0 {
                jac += (dr - jac * ds) * ds.transpose() / denom;
            }
            stale += 1;
            // Slow linear progress means the quasi-Newton Jacobian has
            // drifted; refresh it.
            if stale >= 8 && r_new.amax() > 0.2 * residual.amax() {
                jac = fd_jacobian(&s_new)?;
                stale = 0;
            }
            s = s_new;
            residual = r_new;
        }
        Err(MfError::NoConvergence {
            iterations: MAX_ITERATIONS,
            residual: residual.amax(),
        })
    }
}

/// Central-difference Jacobian of `d(s)`, symmetrized (the exact Jacobian is
/// the Hessian of `log c`). Step scales with `‖s‖` because at concentration
/// `s` the derivatives are `O(1/s²)` while quadrature noise is absolute.
fn fd_jacobian(s: &Vector3<f64>) -> Result<Matrix3<f64>, MfError> {
    let h = 1e-4 * (1.0 + s.amax());
    let mut j = Matrix3::zeros();
    for col in 0..3 {
        let mut sp = *s;
        let mut sm = *s;
        sp[col] += h;
        sm[col] -= h;
        let dp = normalizer(&sp)?.d;
        let dm = normalizer(&sm)?.d;
        j.set_column(col, &((dp - dm) / (2.0 * h)));
    }
    Ok(0.5 * (j + j.transpose()))
}

/// Starting point for the Newton iteration.
///
/// Nearly uniform moments invert the small-concentration expansion
/// `d ≈ s/3`; concentrated moments invert the asymptotic
/// `dᵢ ≈ 1 − ½(1/(sᵢ+sⱼ) + 1/(sᵢ+sₖ))`, whose pair sums come out as
/// `sᵢ+sⱼ = 1/(εᵢ+εⱼ−εₖ)` with `ε = 1 − d` (clamped away from the
/// degenerate boundary where the pair sum diverges).
fn initial_guess(d: &Vector3<f64>) -> Vector3<f64> {
    if d.amax() < 0.5 {
        return 3.0 * d;
    }
    let eps = Vector3::new(1.0 - d[0], 1.0 - d[1], 1.0 - d[2]);
    let mut sigma = Vector3::zeros(); // σₖ = sᵢ + sⱼ for the pair excluding k
    for k in 0..3 {
        let (i, j) = ((k + 1) % 3, (k + 2) % 3);
        let q = (eps[i] + eps[j] - eps[k]).max(1e-3);
        sigma[k] = 1.0 / q;
    }
    let mut s = Vector3::zeros();
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        s[i] = 0.5 * (sigma[j] + sigma[k] - sigma[i]);
    }
    if s.iter().all(|x| x.is_finite()) {
        s.map(|x| x.clamp(-S_CLAMP, S_CLAMP))
    } else {
        3.0 * d
    }
}

/// Scalar Newton iteration for rank-one targets `d(s1, 0, 0) = (t, 0, 0)`.
fn solve_scalar(target: f64, warm: Option<f64>) -> Result<f64, MfError> {
    let d_of = |x: f64| -> Result<f64, MfError> {
        Ok(normalizer(&Vector3::new(x, 0.0, 0.0))?.d[0])
    };
    let mut x = warm.unwrap_or(if target.abs() < 0.5 {
        3.0 * target
    } else {
        1.0 / (1.0 - target.abs()) * target.signum()
    })
    .clamp(-S_CLAMP, S_CLAMP);
    let mut r = d_of(x)? - target;
    for iteration in 0..MAX_ITERATIONS {
        if r.abs() <= SOLVE_TOL {
            return Ok(x);
        }
        let h = 1e-4 * (1.0 + x.abs());
        let slope = (d_of(x + h)? - d_of(x - h)?) / (2.0 * h);
        let step = if slope.abs() > 0.0 { -r / slope } else { -r.signum() };
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand = (x + lambda * step).clamp(-S_CLAMP, S_CLAMP);
            let rc = d_of(cand)? - target;
            if rc.abs() < r.abs() {
                x = cand;
                r = rc;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if !improved {
            return Err(MfError::NoConvergence {
                iterations: iteration,
                residual: r.abs(),
            });
        }
    }
    Err(MfError::NoConvergence {
        iterations: MAX_ITERATIONS,
        residual: r.abs(),
    })
}

/// Draws `n` i.i.d. rotations by rejection sampling.
///
/// Proposals are uniform on SO(3); a proposal `R` is accepted with
/// probability `exp(tr(FᵀR) − (s1+s2+s3))`, which is ≤ 1 because the trace
/// is maximized at the mode. The expected acceptance rate is
/// `c(S)·e^{−(s1+s2+s3)}`, which decays roughly like the product of the
/// pair-sum square roots — fine for the moderate concentrations the oracles
/// use, increasingly wasteful beyond `‖s‖ ≈ 100`.
pub fn sample(mf: &MatrixFisher, rng: &mut impl rand::Rng, n: usize) -> Vec<Rotation> {
    let peak = mf.s().sum();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let r = random_rotation(rng);
        // tr(FᵀR) is the Frobenius inner product ⟨F, R⟩.
        let log_accept = mf.f().dot(r.matrix()) - peak;
        // u ∈ (0, 1] so ln(u) is finite and rejection at prob 0 is certain.
        let u = 1.0 - rng.random::<f64>();
        if u.ln() < log_accept {
            out.push(r);
        }
    }
    out
}

/// Default angular resolution for [`marginal_axis_density`].
pub const MARGINAL_GRID_DEFAULT: usize = 360;

/// Marginal density of the `axis_index`-th body axis (column of `R`) at the
/// unit direction `dir`, with respect to unnormalized area measure on S²
/// (so the sphere integral is 1 and the uniform value is `1/4π`).
///
/// Computed by averaging the joint density over the fiber of rotations whose
/// axis lands on `dir`: `R(ψ) = exp(ψ·d̂ir)·R₀`, trapezoid rule with `grid_n`
/// points over the full turn (spectrally accurate for this periodic
/// integrand).
pub fn marginal_axis_density(
    mf: &MatrixFisher,
    axis_index: usize,
    dir: &Vector3<f64>,
    grid_n: usize,
) -> Result<f64, MfError> {
    assert!((1..=3).contains(&axis_index), "axis_index is 1-based");
    assert!(grid_n >= 8, "grid too coarse");
    let x = {
        let n = dir.norm();
        assert!((n - 1.0).abs() < 1e-6, "dir must be a unit vector");
        dir / n
    };
    let r0 = rotation_taking_axis_to(axis_index - 1, &x);
    // Exponent along the fiber: tr(Fᵀ exp(ψ x̂) R₀) = A + B cos ψ + C sin ψ.
    let m = r0.matrix() * mf.f().transpose();
    let a = (x.transpose() * m * x)[(0, 0)];
    let b = m.trace() - a;
    let c = (m * hat(&x)).trace();

    let offset = a + (b * b + c * c).sqrt();
    let mut acc = 0.0;
    for i in 0..grid_n {
        let psi = 2.0 * std::f64::consts::PI * i as f64 / grid_n as f64;
        acc += (a + b * psi.cos() + c * psi.sin() - offset).exp();
    }
    let log_fiber_avg = (acc / grid_n as f64).ln() + offset;
    let n = normalizer(&mf.s())?;
    Ok((log_fiber_avg - n.log_c).exp() / (4.0 * std::f64::consts::PI))
}

/// Any rotation mapping basis vector `eᵢ` (0-based) to the unit vector `x`.
fn rotation_taking_axis_to(i: usize, x: &Vector3<f64>) -> Rotation {
    let e = Vector3::ith(i, 1.0);
    let cross = e.cross(x);
    let sin = cross.norm();
    let cos = e.dot(x);
    if sin < 1e-12 {
        if cos > 0.0 {
            return Rotation::identity();
        }
        // Antipodal: a half turn about any axis orthogonal to e.
        return crate::so3::exp_so3(&(std::f64::consts::PI * Vector3::ith((i + 1) % 3, 1.0)));
    }
    let axis = cross / sin;
    crate::so3::exp_so3(&(sin.atan2(cos) * axis))
}

/// One row of the sphere-density export: vertex position and marginal density.
#[derive(Debug, Clone, Copy)]
pub struct SphereDensityRow {
    pub axis_index: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub density: f64,
}

/// Evaluates the marginal density of one body axis on an icosphere grid.
pub fn sphere_density_rows(
    mf: &MatrixFisher,
    axis_index: usize,
    subdivision: u32,
    grid_n: usize,
) -> Result<Vec<SphereDensityRow>, MfError> {
    let verts = icosphere_vertices(subdivision);
    let mut rows = Vec::with_capacity(verts.len());
    for v in verts {
        let density = marginal_axis_density(mf, axis_index, &v, grid_n)?;
        rows.push(SphereDensityRow {
            axis_index,
            x: v.x,
            y: v.y,
            z: v.z,
            density,
        });
    }
    Ok(rows)
}

/// Writes sphere-density rows as CSV with header `axis_index,x,y,z,density`.
pub fn write_sphere_density_csv<W: std::io::Write>(
    out: &mut W,
    rows: &[SphereDensityRow],
) -> std::io::Result<()> {
    writeln!(out, "axis_index,x,y,z,density")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.axis_index, r.x, r.y, r.z, r.density)?;
    }
    Ok(())
}

/// Vertices of an icosahedron subdivided `level` times and projected onto the
/// unit sphere: a quasi-uniform grid with `10·4^level + 2` points.
pub fn icosphere_vertices(level: u32) -> Vec<Vector3<f64>> {
    icosphere(level).0
}

/// Icosphere vertices together with the triangulation (vertex index triples),
/// for callers that integrate over the sphere rather than just sampling it.
pub fn icosphere(level: u32) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    use std::collections::HashMap;
    for _ in 0..level {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint.entry(key).or_insert_with(|| {
                    verts.push((verts[a] + verts[b]).normalize());
                    verts.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    (verts, faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::exp_so3;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_s(rng: &mut impl Rng, max: f64) -> Vector3<f64> {
        // Proper-ordered: s1 ≥ s2 ≥ |s3|, s3 possibly negative.
        let mut v = [
            rng.random_range(0.0..max),
            rng.random_range(0.0..max),
            rng.random_range(0.0..max),
        ];
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let sign = if rng.random::<f64>() < 0.4 { -1.0 } else { 1.0 };
        Vector3::new(v[0], v[1], sign * v[2])
    }

    // ---- normalizer -------------------------------------------------------

    #[test]
    fn normalizer_uniform() {
        let n = normalizer(&Vector3::zeros()).unwrap();
        assert_relative_eq!(n.c(), 1.0, epsilon = 1e-12);
        assert!(n.d.amax() < 1e-12);
    }

    #[test]
    fn normalizer_zero_pair_sum() {
        // s2 + s3 = 0 forces d2 + d3 = 0.
        let n = normalizer(&Vector3::new(5.0, 0.0, 0.0)).unwrap();
        assert!((n.d[1] + n.d[2]).abs() < 1e-10);
        for t in [0.0, 1.0, 5.0, 20.0] {
            let n = normalizer(&Vector3::new(t, -t, 0.0)).unwrap();
            assert!(
                (n.d[0] + n.d[1]).abs() < 1e-10,
                "pair sum violated at t = {t}"
            );
        }
    }

    #[test]
    fn normalizer_zero_pair_components() {
        // s_i = s_j = 0 forces d_i = d_j = 0 individually.
        for t in [0.5, 3.0, 30.0] {
            let n = normalizer(&Vector3::new(t, 0.0, 0.0)).unwrap();
            assert!(n.d[1].abs() < 1e-10 && n.d[2].abs() < 1e-10);
        }
    }

    #[test]
    fn normalizer_cyclic_choices_agree() {
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..30 {
            let s = random_s(&mut rng, 30.0);
            let n0 = normalizer_cyclic(&s, 0).unwrap();
            let n1 = normalizer_cyclic(&s, 1).unwrap();
            let n2 = normalizer_cyclic(&s, 2).unwrap();
            assert_relative_eq!(n0.log_c, n2.log_c, epsilon = 1e-8);
            assert_relative_eq!(n1.log_c, n2.log_c, epsilon = 1e-8);
            assert_relative_eq!(n0.d, n2.d, epsilon = 1e-8);
            assert_relative_eq!(n1.d, n2.d, epsilon = 1e-8);
        }
    }

    #[test]
    fn normalizer_validated_at_extreme_concentrations() {
        // The three cyclic reductions are genuinely different integrals, so
        // their agreement validates the quadrature wherever it is probed —
        // here across the full solver clamp domain, including the rank-one
        // profile whose flat exponent stresses the endpoint layers.
        for s in [
            Vector3::new(800.0, 0.0, 0.0),
            Vector3::new(3000.0, 0.0, 0.0),
            Vector3::new(5000.0, 0.0, 0.0),
            Vector3::new(2000.0, 500.0, -300.0),
            Vector3::new(3000.0, 2900.0, -2850.0),
            Vector3::new(4500.0, 4400.0, 4300.0),
        ] {
            let n0 = normalizer_cyclic(&s, 0).unwrap();
            let n1 = normalizer_cyclic(&s, 1).unwrap();
            let n2 = normalizer_cyclic(&s, 2).unwrap();
            assert_relative_eq!(n0.log_c, n2.log_c, epsilon = 1e-7);
            assert_relative_eq!(n1.log_c, n2.log_c, epsilon = 1e-7);
            assert_relative_eq!(n0.d, n2.d, epsilon = 1e-8);
            assert_relative_eq!(n1.d, n2.d, epsilon = 1e-8);
        }

        // d₁ is the log-derivative of the normalizer; a central difference of
        // log c uses only the c kernel and must match the gᵢ kernel output.
        let delta = 0.25;
        for s1 in [800.0, 5000.0] {
            let d1 = normalizer(&Vector3::new(s1, 0.0, 0.0)).unwrap().d[0];
            let lp = normalizer(&Vector3::new(s1 + delta, 0.0, 0.0)).unwrap().log_c;
            let lm = normalizer(&Vector3::new(s1 - delta, 0.0, 0.0)).unwrap().log_c;
            assert!(
                (d1 - (lp - lm) / (2.0 * delta)).abs() < 1e-8,
                "log-derivative mismatch at s1 = {s1}"
            );
        }

        // Concentration keeps paying off: d₁ increases toward 1.
        let d_at = |s1: f64| normalizer(&Vector3::new(s1, 0.0, 0.0)).unwrap().d[0];
        let (a, b, c) = (d_at(1500.0), d_at(3000.0), d_at(5000.0));
        assert!(a < b && b < c && c < 1.0, "d1 not monotone: {a} {b} {c}");
    }

    #[test]
    fn moment_solver_round_trips_extreme_concentrations() {
        let d1 = normalizer(&Vector3::new(4000.0, 0.0, 0.0)).unwrap().d[0];
        let s = solve_concentrations(&Vector3::new(d1, 0.0, 0.0), None).unwrap();
        assert!((s[0] - 4000.0).abs() < 0.5, "rank-one solve gave {}", s[0]);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], 0.0);

        let s_true = Vector3::new(2000.0, 500.0, -300.0);
        let d = normalizer(&s_true).unwrap().d;
        let s = solve_concentrations(&d, None).unwrap();
        assert!(
            (s - s_true).amax() < 1.0,
            "full-rank solve gave {s:?} for {s_true:?}"
        );
    }

    #[test]
    fn single_index_partials_match_pairwise_identity() {
        // The pairwise kernel is an independent derivation; the sums of
        // single-index partials must reproduce it for every pair choice.
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..25 {
            let s = random_s(&mut rng, 40.0);
            for k in 0..3 {
                let n = normalizer_cyclic(&s, k).unwrap();
                let (c_sc, pair_sc, _off) = pair_partial_scaled(&s, k);
                let (i, j) = ((k + 1) % 3, (k + 2) % 3);
                assert_relative_eq!(n.d[i] + n.d[j], pair_sc / c_sc, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn partials_match_monte_carlo() {
        // Second validation path for the single-index partials: d_i is the
        // i-th diagonal of E[Q] under the standardized distribution, which a
        // plain uniform-proposal importance average estimates directly.
        let mut rng = StdRng::seed_from_u64(12);
        for s in [
            Vector3::new(1.0, 0.7, 0.3),
            Vector3::new(5.0, 2.0, -1.0),
            Vector3::new(3.0, 3.0, 3.0),
        ] {
            let n = normalizer(&s).unwrap();
            let draws = 200_000;
            let mut wsum = 0.0;
            let mut msum = Vector3::zeros();
            let mut w2 = 0.0;
            for _ in 0..draws {
                let q = random_rotation(&mut rng);
                let diag = Vector3::new(q.matrix()[(0, 0)], q.matrix()[(1, 1)], q.matrix()[(2, 2)]);
                let w = (s.dot(&diag) - s.sum()).exp();
                wsum += w;
                w2 += w * w;
                msum += w * diag;
            }
            let est = msum / wsum;
            // Rough self-normalized importance-sampling standard error.
            let ess = wsum * wsum / w2;
            let se = (1.0 / ess).sqrt();
            assert!(
                (est - n.d).amax() < 5.0 * se.max(1e-3),
                "MC disagreement at s = {s:?}: est {est:?} vs {:?}",
                n.d
            );
        }
    }

    #[test]
    fn normalizer_matches_euler_angle_quadrature() {
        let s = Vector3::new(1.0, 1.0, 1.0);
        let n = normalizer(&s).unwrap();
        let oracle = euler_haar_c(&s, 80, 160);
        assert_relative_eq!(n.c(), oracle, max_relative = 1e-6);
    }

    /// Brute-force oracle: c(S) as a 3D Haar integral in Z-Y-Z Euler angles,
    /// trapezoid in the two periodic angles, Simpson in β with weight sin β.
    pub(crate) fn euler_haar_c(s: &Vector3<f64>, n_angle: usize, n_beta: usize) -> f64 {
        let mut total = 0.0;
        let nb = if n_beta % 2 == 0 { n_beta } else { n_beta + 1 };
        for bi in 0..=nb {
            let beta = std::f64::consts::PI * bi as f64 / nb as f64;
            let wb = if bi == 0 || bi == nb {
                1.0
            } else if bi % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let (sb, cb) = beta.sin_cos();
            let mut inner = 0.0;
            for ai in 0..n_angle {
                let alpha = 2.0 * std::f64::consts::PI * ai as f64 / n_angle as f64;
                let (sa, ca) = alpha.sin_cos();
                for gi in 0..n_angle {
                    let gamma = 2.0 * std::f64::consts::PI * gi as f64 / n_angle as f64;
                    let (sg, cg) = gamma.sin_cos();
                    // tr(diag(s)·R) for R = Rz(α)Ry(β)Rz(γ)
                    let r11 = ca * cb * cg - sa * sg;
                    let r22 = -sa * cb * sg + ca * cg;
                    let r33 = cb;
                    inner += (s[0] * r11 + s[1] * r22 + s[2] * r33).exp();
                }
            }
            total += wb * sb * inner;
        }
        // Simpson weight h/3 in β; the trapezoid means over α,γ carry 1/n².
        let h = std::f64::consts::PI / nb as f64;
        total * (h / 3.0) / (n_angle * n_angle) as f64 / 2.0
    }

    #[test]
    fn lemma_pair_sum_monotonicity() {
        // For fixed s_i − s_j and s_k, d_i + d_j increases strictly with
        // s_i + s_j: a 10-point ladder per pair.
        for k in 0..3 {
            let (i, j) = ((k + 1) % 3, (k + 2) % 3);
            let mut prev = -1.0;
            for step in 0..10 {
                let sum = 0.2 + 1.3 * step as f64;
                let diff = 0.3;
                let mut s = Vector3::zeros();
                s[i] = 0.5 * (sum + diff);
                s[j] = 0.5 * (sum - diff);
                s[k] = 0.7;
                let n = normalizer(&s).unwrap();
                let pair = n.d[i] + n.d[j];
                assert!(
                    pair > prev + 1e-9,
                    "pair sum not increasing at k={k} step={step}"
                );
                prev = pair;
            }
        }
    }

    // ---- density / moments ------------------------------------------------

    #[test]
    fn density_uniform_is_one() {
        let mf = MatrixFisher::uniform();
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..5 {
            let r = random_rotation(&mut rng);
            assert_relative_eq!(density(&mf, &r).unwrap(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn density_at_mean_attitude_is_max() {
        let f = exp_so3(&Vector3::new(0.2, -0.1, 0.4)).matrix()
            * Matrix3::from_diagonal(&Vector3::new(6.0, 3.0, 1.0));
        let mf = MatrixFisher::new(f);
        let n = normalizer(&mf.s()).unwrap();
        let at_mean = density(&mf, &mf.mean_attitude()).unwrap();
        assert_relative_eq!(
            at_mean,
            (mf.s().sum() - n.log_c).exp(),
            max_relative = 1e-9
        );
        let mut rng = StdRng::seed_from_u64(14);
        for r in sample(&mf, &mut rng, 200) {
            assert!(density(&mf, &r).unwrap() <= at_mean * (1.0 + 1e-12));
        }
    }

    #[test]
    fn density_on_principal_axis_curves() {
        // p(U exp(θ êᵢ) Vᵀ) = e^{sᵢ}/c · e^{(sⱼ+sₖ) cos θ}
        let u = exp_so3(&Vector3::new(0.3, 0.7, -0.2));
        let v = exp_so3(&Vector3::new(-0.5, 0.1, 0.9));
        let s = Vector3::new(4.0, 2.5, -0.5);
        let mf = MatrixFisher::from_proper(u, s, v);
        let n = normalizer(&s).unwrap();
        for i in 0..3 {
            let (j, k) = ((i + 1) % 3, (i + 2) % 3);
            for theta in [0.0_f64, 0.4, 1.2, 2.8] {
                let r = u * exp_so3(&(theta * Vector3::ith(i, 1.0))) * v.transpose();
                let want = (s[i] - n.log_c + (s[j] + s[k]) * theta.cos()).exp();
                assert_relative_eq!(density(&mf, &r).unwrap(), want, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn first_moment_basics() {
        assert!(first_moment(&MatrixFisher::uniform()).unwrap().norm() < 1e-12);

        // Concentrated about e1: d1 → 1 while d2 + d3 stays 0.
        for s1 in [50.0, 200.0, 500.0] {
            let mf = MatrixFisher::new(Matrix3::from_diagonal(&Vector3::new(s1, 0.0, 0.0)));
            let n = normalizer(&mf.s()).unwrap();
            assert!((n.d[1] + n.d[2]).abs() < 1e-10);
            assert!(1.0 - n.d[0] < 1.5 / s1);
        }
    }

    #[test]
    fn first_moment_matches_sampling() {
        let mf = MatrixFisher::new(Matrix3::from_diagonal(&Vector3::new(5.0, 2.0, 1.0)));
        let want = first_moment(&mf).unwrap();
        let mut rng = StdRng::seed_from_u64(15);
        let n = 1_000_000;
        let mut mean = Matrix3::zeros();
        let mut sq = Matrix3::zeros();
        for r in sample(&mf, &mut rng, n) {
            mean += r.matrix();
            sq += r.matrix().component_mul(r.matrix());
        }
        mean /= n as f64;
        sq /= n as f64;
        for r in 0..3 {
            for c in 0..3 {
                let var = (sq[(r, c)] - mean[(r, c)] * mean[(r, c)]).max(0.0);
                let se = (var / n as f64).sqrt();
                assert!(
                    (mean[(r, c)] - want[(r, c)]).abs() <= 3.0 * se + 1e-9,
                    "entry ({r},{c}): sampled {} vs predicted {} (se {se:.2e})",
                    mean[(r, c)],
                    want[(r, c)]
                );
            }
        }
    }

    #[test]
    fn mean_attitude_cases() {
        let mf = MatrixFisher::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1.0)));
        assert_relative_eq!(
            mf.mean_attitude().matrix(),
            &Matrix3::identity(),
            epsilon = 1e-12
        );

        // Rank-one 500·e1e1ᵀ: gauge freedom about e1, but every valid mean
        // fixes e1.
        let mf = MatrixFisher::new(500.0 * Vector3::x() * Vector3::x().transpose());
        let m = mf.mean_attitude();
        assert_relative_eq!(m * Vector3::x(), Vector3::x(), epsilon = 1e-9);

        let u = exp_so3(&Vector3::new(0.0, 0.4, 0.0));
        let mf = MatrixFisher::new(u.matrix() * Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, 1.0)));
        assert_relative_eq!(mf.mean_attitude().matrix(), u.matrix(), epsilon = 1e-9);
    }

    #[test]
    fn density_integrates_to_one() {
        // Euler-angle Haar grid against the quadrature normalizer.
        let s = Vector3::new(8.0, 4.0, -2.0);
        let c_grid = euler_haar_c(&s, 120, 240);
        let n = normalizer(&s).unwrap();
        assert_relative_eq!(c_grid / n.c(), 1.0, epsilon = 1e-4);
    }

    // ---- MLE / solver -----------------------------------------------------

    #[test]
    fn mle_trivial_and_infeasible() {
        let mf = mle_from_moment(&Matrix3::zeros()).unwrap();
        assert!(mf.f().norm() < 1e-12);

        let bad = Matrix3::from_diagonal(&Vector3::new(1.2, 0.1, 0.1));
        assert!(matches!(
            mle_from_moment(&bad),
            Err(MfError::NotAMoment { .. })
        ));
    }

    #[test]
    fn mle_roundtrip_through_first_moment() {
        let s = Vector3::new(10.0, 4.0, -1.0);
        let mf = MatrixFisher::new(Matrix3::from_diagonal(&s));
        let ebar = first_moment(&mf).unwrap();
        let rec = mle_from_moment(&ebar).unwrap();
        assert_relative_eq!(rec.s(), s, epsilon = 1e-6);
        assert!((first_moment(&rec).unwrap() - ebar).norm() < 1e-7);
    }

    #[test]
    fn mle_roundtrip_random_orientations() {
        let mut rng = StdRng::seed_from_u64(16);
        for _ in 0..100 {
            let s = random_s(&mut rng, 50.0);
            let u = random_rotation(&mut rng);
            let v = random_rotation(&mut rng);
            let mf = MatrixFisher::from_proper(u, s, v);
            let ebar = first_moment(&mf).unwrap();
            let rec = mle_from_moment(&ebar).unwrap();
            assert!(
                (rec.s() - s).amax() < 1e-6 * (1.0 + s.amax()),
                "s mismatch: {:?} vs {s:?}",
                rec.s()
            );
            assert!(
                (first_moment(&rec).unwrap() - ebar).norm() < 1e-7,
                "moment not reproduced"
            );
        }
    }

    #[test]
    fn solver_handles_concentrated_and_negative_targets() {
        // All-positive near-unity targets can still require a negative s3.
        let d = Vector3::new(0.9, 0.85, 0.8);
        let s = solve_concentrations(&d, None).unwrap();
        assert!(s[2] < 0.0, "expected negative s3, got {s:?}");
        assert!((normalizer(&s).unwrap().d - d).amax() < 1e-9);

        // A genuinely negative-d3 target (feasible: d1 + d2 - d3 < 1).
        let d = Vector3::new(0.5, 0.3, -0.15);
        let s = solve_concentrations(&d, None).unwrap();
        assert!(s[2] < 0.0, "expected negative s3, got {s:?}");
        assert!((normalizer(&s).unwrap().d - d).amax() < 1e-9);
    }

    #[test]
    fn solver_rank_one_targets_keep_exact_zeros() {
        let s = solve_concentrations(&Vector3::new(0.9, 0.0, 0.0), None).unwrap();
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], 0.0);
        assert!((normalizer(&s).unwrap().d[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn solver_warm_start_sequence() {
        // A shrinking-moment sequence like the filter produces: the warm
        // started solver must track it without drama.
        let mut solver = MomentSolver::new();
        let mut s = solver
            .solve(&Vector3::new(0.88, 0.8, 0.7), None)
            .unwrap();
        let mut d = normalizer(&s).unwrap().d;
        for _ in 0..50 {
            d *= 1.0 - 2.03e-4;
            s = solver.solve(&d, Some(s)).unwrap();
        }
        assert!((normalizer(&s).unwrap().d - d).amax() < 1e-9);
    }

    #[test]
    fn solver_rejects_boundary_moment() {
        // d1 + d2 − d3 = 1 is achievable only in a singular limit; the solver
        // must fail honestly rather than return something.
        let d = Vector3::new(0.999, 0.998, 0.997);
        match solve_concentrations(&d, None) {
            Err(MfError::NoConvergence { .. }) | Err(MfError::QuadratureFailure { .. }) => {}
            other => panic!("expected failure for boundary moment, got {other:?}"),
        }
    }

    // ---- sampling ---------------------------------------------------------

    #[test]
    fn sample_uniform_mean_near_zero() {
        let mf = MatrixFisher::uniform();
        let mut rng = StdRng::seed_from_u64(17);
        let mut mean = Matrix3::zeros();
        let n = 100_000;
        for r in sample(&mf, &mut rng, n) {
            mean += r.matrix();
        }
        mean /= n as f64;
        assert!(mean.amax() < 0.02);
    }

    #[test]
    fn sample_mle_recovers_concentration() {
        let s = Vector3::new(20.0, 20.0, 20.0);
        let mf = MatrixFisher::new(Matrix3::from_diagonal(&s));
        let mut rng = StdRng::seed_from_u64(18);
        let n = 20_000;
        let mut mean = Matrix3::zeros();
        for r in sample(&mf, &mut rng, n) {
            mean += r.matrix();
        }
        mean /= n as f64;
        let rec = mle_from_moment(&mean).unwrap();
        assert!(
            (rec.s() - s).amax() < 0.05 * 20.0,
            "recovered {:?}",
            rec.s()
        );
    }

    #[test]
    fn sample_deterministic_under_seed() {
        let mf = MatrixFisher::new(Matrix3::from_diagonal(&Vector3::new(3.0, 1.0, 0.5)));
        let a = sample(&mf, &mut StdRng::seed_from_u64(19), 50);
        let b = sample(&mf, &mut StdRng::seed_from_u64(19), 50);
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.matrix(), rb.matrix());
        }
    }

    // ---- marginal axis density -------------------------------------------

    #[test]
    fn marginal_uniform_is_inverse_sphere_area() {
        let mf = MatrixFisher::uniform();
        let want = 1.0 / (4.0 * std::f64::consts::PI);
        for dir in [Vector3::x(), Vector3::y(), -Vector3::z()] {
            for axis in 1..=3 {
                let p = marginal_axis_density(&mf, axis, &dir, 64).unwrap();
                assert_relative_eq!(p, want, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn marginal_integrates_to_one() {
        let f = exp_so3(&Vector3::new(0.1, 0.2, 0.3)).matrix()
            * Matrix3::from_diagonal(&Vector3::new(6.0, 2.0, 1.0));
        let mf = MatrixFisher::new(f);
        // Integrate over the icosphere triangulation: spherical triangle area
        // (l'Huilier) times the mean of the vertex densities.
        let (verts, faces) = icosphere(3);
        let densities: Vec<[f64; 3]> = verts
            .iter()
            .map(|v| {
                std::array::from_fn(|i| marginal_axis_density(&mf, i + 1, v, 180).unwrap())
            })
            .collect();
        let spherical_area = |a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>| {
            let la = (b.dot(c).clamp(-1.0, 1.0)).acos();
            let lb = (c.dot(a).clamp(-1.0, 1.0)).acos();
            let lc = (a.dot(b).clamp(-1.0, 1.0)).acos();
            let s = 0.5 * (la + lb + lc);
            4.0 * ((s / 2.0).tan()
                * ((s - la) / 2.0).tan()
                * ((s - lb) / 2.0).tan()
                * ((s - lc) / 2.0).tan())
            .sqrt()
            .atan()
        };
        for axis in 0..3 {
            let mut total = 0.0;
            for f in &faces {
                let area = spherical_area(&verts[f[0]], &verts[f[1]], &verts[f[2]]);
                let mean =
                    (densities[f[0]][axis] + densities[f[1]][axis] + densities[f[2]][axis]) / 3.0;
                total += area * mean;
            }
            assert!(
                (total - 1.0).abs() < 1e-3,
                "axis {} integral {total}",
                axis + 1
            );
        }
    }

    #[test]
    fn marginal_matches_bessel_closed_form() {
        // The fiber average has the closed form
        //   p(v) = e^{A} I₀(√(B²+C²)) / (4π c(S)),
        // an independent route through the same decomposition. Checked at the
        // concentrations used by the visualization export.
        let mf = MatrixFisher::new(Matrix3::from_diagonal(&Vector3::new(150.0, 10.0, 0.0)));
        let n = normalizer(&mf.s()).unwrap();
        for (axis, dir) in [
            (1usize, Vector3::x()),
            (1, -Vector3::x()),
            (2, Vector3::y()),
            (3, Vector3::new(0.6, 0.0, 0.8)),
        ] {
            let x = dir.normalize();
            let r0 = rotation_taking_axis_to(axis - 1, &x);
            let mm = r0.matrix() * mf.f().transpose();
            let a = (x.transpose() * mm * x)[(0, 0)];
            let b = mm.trace() - a;
            let c = (mm * hat(&x)).trace();
            let z = (b * b + c * c).sqrt();
            let log_want = a + bessel_i0_scaled(z).ln() + z.abs()
                - (4.0 * std::f64::consts::PI).ln()
                - n.log_c;
            let p = marginal_axis_density(&mf, axis, &dir, 720).unwrap();
            if log_want > -700.0 {
                assert_relative_eq!(p.ln(), log_want, epsilon = 1e-6);
            } else {
                assert!(p < 1e-300);
            }
        }
    }

    /// Integral of the first-axis marginal over the spherical cap
    /// `{x : x·dir > cap_cos}`: midpoint rule in `cos θ`, trapezoid in
    /// azimuth (the density is smooth, so this converges fast).
    fn cap_probability(mf: &MatrixFisher, dir: &Vector3<f64>, cap_cos: f64) -> f64 {
        let t1 = {
            let trial = if dir.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let t = trial - dir * trial.dot(dir);
            t / t.norm()
        };
        let t2 = dir.cross(&t1);
        let (nu, nphi) = (24, 48);
        let du = (1.0 - cap_cos) / nu as f64;
        let mut acc = 0.0;
        for iu in 0..nu {
            let u = cap_cos + (iu as f64 + 0.5) * du;
            let rho = (1.0 - u * u).sqrt();
            for iphi in 0..nphi {
                let phi = 2.0 * std::f64::consts::PI * iphi as f64 / nphi as f64;
                let x = dir * u + (t1 * phi.cos() + t2 * phi.sin()) * rho;
                acc += marginal_axis_density(mf, 1, &x, 180).unwrap();
            }
        }
        acc * du * 2.0 * std::f64::consts::PI / nphi as f64
    }

    #[test]
    fn marginal_matches_sample_histogram() {
        // Distributional check tying the sampler to the marginal density:
        // the fraction of sampled first axes landing in a spherical cap must
        // match the density integrated over that cap, within binomial noise.
        let mf = MatrixFisher::new(Matrix3::from_diagonal(&Vector3::new(5.0, 2.0, 0.0)));
        let mut rng = StdRng::seed_from_u64(20);
        let n = 200_000usize;
        let samples = sample(&mf, &mut rng, n);
        let cap_cos = 0.95; // ~18° cap
        let half = std::f64::consts::FRAC_1_SQRT_2;
        for dir in [Vector3::x(), Vector3::new(half, half, 0.0), Vector3::new(half, 0.0, half)] {
            let count = samples
                .iter()
                .filter(|r| r.col(0).dot(&dir) > cap_cos)
                .count();
            let q = cap_probability(&mf, &dir, cap_cos);
            let sigma = (q * (1.0 - q) / n as f64).sqrt();
            let err = (count as f64 / n as f64 - q).abs();
            // 4σ statistical band plus a 1% margin for cap quadrature error.
            assert!(
                err < 4.0 * sigma + 0.01 * q,
                "cap fraction {:.5} vs predicted {q:.5} at dir {dir:?} ({count} counts)",
                count as f64 / n as f64,
            );
            assert!(count > 500, "cap too sparse for the check to mean much");
        }
    }

    #[test]
    fn icosphere_sizes() {
        assert_eq!(icosphere_vertices(0).len(), 12);
        assert_eq!(icosphere_vertices(1).len(), 42);
        assert_eq!(icosphere_vertices(3).len(), 642);
        for v in icosphere_vertices(2) {
            assert_relative_eq!(v.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sphere_density_csv_shape() {
        let mf = MatrixFisher::new(Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 0.0)));
        let rows = sphere_density_rows(&mf, 2, 1, 90).unwrap();
        assert_eq!(rows.len(), 42);
        let mut buf = Vec::new();
        write_sphere_density_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("axis_index,x,y,z,density\n"));
        assert_eq!(text.lines().count(), 43);
    }
}
