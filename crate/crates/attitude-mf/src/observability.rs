//! Stochastic attitude observability from posterior first moments.
//!
//! Whether attitude is observable can be read off the first moment
//! `E[R] = U·diag(d)·Vᵀ` (proper SVD): the minimum-mean-square-error
//! estimate is unique exactly when `d₂+d₃ > 0`, and otherwise the set of
//! minimizers is a 1-, 2- or 3-dimensional subgroup coset. This module
//! provides
//!
//! * [`classify_mmse`] — the four-way classification of the MMSE set;
//! * [`fim_full`] — the 9×9 Fisher information matrix of the matrix Fisher
//!   parameters `(U, S, V)` on SO(3)×ℝ³×SO(3);
//! * [`fim_mean_attitude`] — the 3×3 Fisher information of the mean
//!   attitude `UVᵀ`, whose diagonal `½(dⱼ+dₖ)(sⱼ+sₖ)` vanishes exactly on
//!   the unobservable axes;
//! * [`report_from_mf`] / [`report_from_moment`] — an [`ObservabilityReport`]
//!   bundling the moment diagnostics with the scalar observability measure
//!   `ρ = (d₁+d₂)(d₃+d₁)(d₂+d₃)`;
//! * [`deterministic_rank`] — the classical nonlinear-observability rank
//!   test (differentials of Lie derivatives of the measurement map), which
//!   reaches rank 3 for an inertially known reference observed in the body
//!   frame but saturates at rank 2 for a body-fixed reference observed in
//!   the inertial frame.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

use crate::matrix_fisher::{
    mle_from_moment, moment_triple, normalizer, MatrixFisher, MfError, MomentTriple,
};
use crate::measurement::MeasurementKind;
use crate::so3::{exp_so3, hat, proper_svd, ProperSvd, Rotation};

/// Default tolerance for treating a `dᵢ+dⱼ` sum as zero. The `d` values are
/// quadrature outputs themselves, so exact comparisons are meaningless.
pub const MMSE_TOL_DEFAULT: f64 = 1e-8;

/// Which set of rotations attains the minimum mean square error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmseCase {
    /// `d₂+d₃ > 0`: the single rotation `UVᵀ`.
    Unique,
    /// `d₁ ≠ d₂`, `d₂+d₃ = 0`: the circle `{U·exp(θê₁)·Vᵀ}`.
    Ambiguous1d,
    /// `d₁ = d₂ = −d₃ > 0`: rotations about any horizontal axis of `U`.
    Ambiguous2d,
    /// `d = 0`: all of SO(3).
    Uniform3d,
}

impl MmseCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            MmseCase::Unique => "unique",
            MmseCase::Ambiguous1d => "ambiguous_1d",
            MmseCase::Ambiguous2d => "ambiguous_2d",
            MmseCase::Uniform3d => "uniform_3d",
        }
    }
}

/// Classification of the MMSE attitude estimate for a given first moment.
#[derive(Debug, Clone, Copy)]
pub struct MmseClassification {
    pub case: MmseCase,
    /// `UVᵀ` — contained in the MMSE set in every case.
    pub representative: Rotation,
    /// Inertial-frame axis `U·e₁` of the unresolved rotation (1D case only).
    pub ambiguity_axis: Option<Vector3<f64>>,
}

/// Classifies the MMSE set of a first moment; sums with `|·| < tol` count
/// as zero.
pub fn classify_mmse(ebar: &Matrix3<f64>, tol: f64) -> MmseClassification {
    assert!(tol >= 0.0 && ebar.iter().all(|x| x.is_finite()));
    let p = proper_svd(ebar);
    let d = p.s;
    let representative = p.u * p.v.transpose();
    let (case, axis) = if d[1] + d[2] > tol {
        (MmseCase::Unique, None)
    } else if d[0] <= tol {
        (MmseCase::Uniform3d, None)
    } else if d[0] - d[1] > tol {
        (MmseCase::Ambiguous1d, Some(p.u.col(0)))
    } else {
        // d1 = d2 = −d3 > 0: rotations about any axis orthogonal to U·e3.
        (MmseCase::Ambiguous2d, None)
    };
    MmseClassification {
        case,
        representative,
        ambiguity_axis: axis,
    }
}

/// Hessian `∂²log c(S)/∂s²` of the log normalizing constant, computed by
/// central finite differences of the first derivatives `d(s)` at step 1e-4,
/// symmetrized. Equals the covariance of `diag(UᵀRV)`, hence PSD.
pub fn d2_log_c(s: &Vector3<f64>) -> Result<Matrix3<f64>, MfError> {
    const STEP: f64 = 1e-4;
    let mut m = Matrix3::zeros();
    for j in 0..3 {
        let mut hi = *s;
        let mut lo = *s;
        hi[j] += STEP;
        lo[j] -= STEP;
        let col = (normalizer(&hi)?.d - normalizer(&lo)?.d) / (2.0 * STEP);
        m.set_column(j, &col);
    }
    Ok(0.5 * (m + m.transpose()))
}

/// 9×9 Fisher information of the parameters `(U, S, V)`, in the trivialized
/// coordinates `(u, ς, v)` (tangent rotations of `U` and `V`, shifts of `s`):
///
/// ```text
/// ⎡ tr(DS)I − DS        0        Σᵢ sᵢ·êᵢDêᵢ ⎤
/// ⎢      0         ∂²log c/∂s²        0       ⎥
/// ⎣ Σᵢ sᵢ·êᵢDêᵢ         0       tr(DS)I − DS ⎦
/// ```
///
/// with `D = diag(d)` from the first moment. The matrix depends on the
/// parameters only through `s` and `d`.
pub fn fim_full(
    svd: &ProperSvd,
    moments: &MomentTriple,
    d2_logc: &Matrix3<f64>,
) -> SMatrix<f64, 9, 9> {
    let s = svd.s;
    let d_mat = Matrix3::from_diagonal(&moments.d);
    let s_mat = Matrix3::from_diagonal(&s);
    let ds = d_mat * s_mat;
    let corner = ds.trace() * Matrix3::identity() - ds;
    let mut cross = Matrix3::zeros();
    for i in 0..3 {
        let ei = hat(&Vector3::ith(i, 1.0));
        cross += s[i] * ei * d_mat * ei;
    }
    let mut out = SMatrix::<f64, 9, 9>::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&corner);
    out.fixed_view_mut::<3, 3>(6, 6).copy_from(&corner);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(d2_logc);
    out.fixed_view_mut::<3, 3>(0, 6).copy_from(&cross);
    out.fixed_view_mut::<3, 3>(6, 0).copy_from(&cross);
    out
}

/// [`fim_full`] with the moment and normalizer pieces computed from the
/// distribution.
pub fn fim_full_from_mf(mf: &MatrixFisher) -> Result<SMatrix<f64, 9, 9>, MfError> {
    let moments = moment_triple(mf)?;
    let hess = d2_log_c(&mf.s())?;
    Ok(fim_full(mf.svd(), &moments, &hess))
}

/// Fisher information of the mean attitude `UVᵀ`, expressed in the body
/// frame of the mean: `½·diag[(d₂+d₃)(s₂+s₃), (d₃+d₁)(s₃+s₁),
/// (d₁+d₂)(s₁+s₂)]`. A zero diagonal entry means rotations about that
/// principal axis carry no information.
pub fn fim_mean_attitude(mf: &MatrixFisher) -> Result<Matrix3<f64>, MfError> {
    let s = mf.s();
    let d = normalizer(&s)?.d;
    Ok(Matrix3::from_diagonal(&Vector3::new(
        0.5 * (d[1] + d[2]) * (s[1] + s[2]),
        0.5 * (d[2] + d[0]) * (s[2] + s[0]),
        0.5 * (d[0] + d[1]) * (s[0] + s[1]),
    )))
}

/// Moment-level observability diagnostics of one posterior.
#[derive(Debug, Clone)]
pub struct ObservabilityReport {
    /// Proper singular values of the first moment, `d₁ ≥ d₂ ≥ |d₃|`.
    pub d: Vector3<f64>,
    /// Diagonal of `𝒪 = tr(D)I − D = diag[d₂+d₃, d₃+d₁, d₁+d₂]`.
    pub o_diag: Vector3<f64>,
    /// `det 𝒪 = (d₁+d₂)(d₃+d₁)(d₂+d₃)`; positive iff observable.
    pub rho: f64,
    /// Diagonal of the mean-attitude Fisher information.
    pub fim_diag: Vector3<f64>,
    pub classification: MmseClassification,
}

impl ObservabilityReport {
    pub fn o_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.o_diag)
    }

    pub fn fim_mean(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.fim_diag)
    }

    pub const CSV_HEADER: &'static str = "t,d1,d2,d3,rho,fim1,fim2,fim3,case";

    /// One CSV row matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self, t: f64) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            t,
            self.d[0],
            self.d[1],
            self.d[2],
            self.rho,
            self.fim_diag[0],
            self.fim_diag[1],
            self.fim_diag[2],
            self.classification.case.as_str()
        )
    }
}

fn build_report(d: Vector3<f64>, fim: Matrix3<f64>, cls: MmseClassification) -> ObservabilityReport {
    let o_diag = Vector3::new(d[1] + d[2], d[2] + d[0], d[0] + d[1]);
    ObservabilityReport {
        d,
        o_diag,
        rho: o_diag.product(),
        fim_diag: fim.diagonal(),
        classification: cls,
    }
}

/// Observability report of a matrix Fisher posterior.
pub fn report_from_mf(mf: &MatrixFisher) -> Result<ObservabilityReport, MfError> {
    let moments = moment_triple(mf)?;
    let fim = fim_mean_attitude(mf)?;
    let ebar = moments.u.matrix() * Matrix3::from_diagonal(&moments.d) * moments.v.matrix().transpose();
    Ok(build_report(moments.d, fim, classify_mmse(&ebar, MMSE_TOL_DEFAULT)))
}

/// Observability report of a raw first moment. The Fisher information part
/// requires fitting a matrix Fisher distribution to the moment, so moments
/// not attainable by any such distribution propagate the fitting error.
pub fn report_from_moment(ebar: &Matrix3<f64>) -> Result<ObservabilityReport, MfError> {
    let d = proper_svd(ebar).s;
    let fitted = mle_from_moment(ebar)?;
    let fim = fim_mean_attitude(&fitted)?;
    Ok(build_report(d, fim, classify_mmse(ebar, MMSE_TOL_DEFAULT)))
}

/// Rank of the deterministic nonlinear-observability test for the kinematics
/// `Ṙ = ω̂R` (controls spanning ω) under one direction measurement.
///
/// The observation space is spanned by the measurement map and its Lie
/// derivatives along the basis vector fields `R ↦ êᵢR`, which have closed
/// forms (`Rᵀêᵢᵀa`, `Rᵀêⱼᵀêᵢᵀa`, … for an inertially known reference;
/// `êᵢRb`, `êᵢêⱼRb`, … for a body-fixed one). Derivatives up to second
/// order are stacked so the rank-2 ceiling of the body-fixed case is
/// exercised, not just reached. Their differentials at `r0` are evaluated in
/// the local exponential chart `θ ↦ exp(θ̂)·r0` by central differences
/// (step 1e-5), and the rank uses a singular-value cutoff of 1e-7.
pub fn deterministic_rank(r0: &Rotation, kind: MeasurementKind, reference: &Vector3<f64>) -> usize {
    assert!((reference.norm() - 1.0).abs() < 1e-9, "reference must be unit");
    let a = *reference;
    // Measurement map and its Lie derivatives up to order two.
    let mut funcs: Vec<Box<dyn Fn(&Rotation) -> Vector3<f64>>> = Vec::new();
    match kind {
        MeasurementKind::InertialRef => {
            funcs.push(Box::new(move |r: &Rotation| r.matrix().transpose() * a));
            for i in 0..3 {
                let hi = hat(&Vector3::ith(i, 1.0));
                funcs.push(Box::new(move |r: &Rotation| {
                    r.matrix().transpose() * hi.transpose() * a
                }));
                for j in 0..3 {
                    let hj = hat(&Vector3::ith(j, 1.0));
                    funcs.push(Box::new(move |r: &Rotation| {
                        r.matrix().transpose() * hj.transpose() * hi.transpose() * a
                    }));
                }
            }
        }
        MeasurementKind::BodyRef => {
            funcs.push(Box::new(move |r: &Rotation| r.matrix() * a));
            for i in 0..3 {
                let hi = hat(&Vector3::ith(i, 1.0));
                funcs.push(Box::new(move |r: &Rotation| hi * (r.matrix() * a)));
                for j in 0..3 {
                    let hj = hat(&Vector3::ith(j, 1.0));
                    funcs.push(Box::new(move |r: &Rotation| hi * hj * (r.matrix() * a)));
                }
            }
        }
    }

    const STEP: f64 = 1e-5;
    let mut rows = Vec::with_capacity(funcs.len() * 3);
    for f in &funcs {
        let mut jac = Matrix3::zeros();
        for k in 0..3 {
            let dir = Vector3::ith(k, STEP);
            let plus = f(&(exp_so3(&dir) * *r0));
            let minus = f(&(exp_so3(&-dir) * *r0));
            jac.set_column(k, &((plus - minus) / (2.0 * STEP)));
        }
        for r in 0..3 {
            rows.extend_from_slice(&[jac[(r, 0)], jac[(r, 1)], jac[(r, 2)]]);
        }
    }
    let stacked = DMatrix::from_row_slice(rows.len() / 3, 3, &rows);
    stacked
        .svd(false, false)
        .singular_values
        .iter()
        .filter(|&&sv| sv > 1e-7)
        .count()
}
