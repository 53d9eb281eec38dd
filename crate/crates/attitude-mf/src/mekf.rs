//! Multiplicative extended Kalman filter baseline.
//!
//! The linearization-based reference point for the matrix Fisher filter: the
//! attitude estimate is a mean rotation `R̂` plus a Gaussian over the
//! body-frame error rotation vector `ε`, with the true attitude modeled as
//! `R = R̂·exp(ε̂)`. Prediction supports angular velocity resolved in either
//! frame (the body-frame error makes inertial-velocity transport the
//! identity, and body-velocity transport the step rotation's adjoint);
//! updates linearize the direction measurement and use the Joseph-form
//! covariance recursion with the von Mises–Fisher noise mapped to its
//! tangent-plane Gaussian limit.
//!
//! The filter deliberately mirrors what a practitioner would build without
//! the distributional machinery: it cannot represent complete ignorance
//! (a large isotropic covariance stands in for the uniform distribution),
//! and its behavior under the unobservable measurement pairings is part of
//! what the comparison harness measures.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::measurement::{tangent_basis, DirectionMeasurement, MeasurementKind};
use crate::propagation::Frame;
use crate::so3::{exp_so3, hat, Rotation};

/// Frame in which the error rotation vector (and hence the covariance) is
/// expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFrame {
    Body,
    Inertial,
}

#[derive(Debug, Error)]
pub enum MekfError {
    /// The tangent-plane innovation covariance could not be inverted.
    #[error("projected innovation covariance is numerically singular (det = {det})")]
    SingularInnovationCov { det: f64 },
}

/// Gaussian attitude estimate: mean rotation and error-vector covariance.
///
/// The filter always works with a body-frame error; [`MekfState::cov_in`]
/// transports the covariance to the inertial frame for reporting.
#[derive(Debug, Clone, Copy)]
pub struct MekfState {
    pub mean: Rotation,
    /// Covariance of the error rotation vector, rad².
    pub cov: Matrix3<f64>,
    pub frame_of_error: ErrorFrame,
}

/// Stand-in standard deviation (rad) for a completely unknown attitude.
pub const UNKNOWN_ATTITUDE_SIGMA: f64 = 1e4;

impl MekfState {
    /// Builds a state, validating symmetry and positive semi-definiteness.
    pub fn new(mean: Rotation, cov: Matrix3<f64>) -> Self {
        let scale = cov.norm().max(1.0);
        assert!(
            (cov - cov.transpose()).norm() <= 1e-12 * scale,
            "covariance must be symmetric"
        );
        assert!(
            cov.symmetric_eigenvalues().iter().all(|&l| l >= -1e-12 * scale),
            "covariance must be positive semi-definite"
        );
        Self {
            mean,
            cov,
            frame_of_error: ErrorFrame::Body,
        }
    }

    /// The conventional surrogate for a uniform prior: identity mean with a
    /// huge isotropic covariance. A Gaussian cannot represent the uniform
    /// distribution, which is precisely the baseline's handicap.
    pub fn completely_unknown() -> Self {
        Self::new(
            Rotation::identity(),
            UNKNOWN_ATTITUDE_SIGMA * UNKNOWN_ATTITUDE_SIGMA * Matrix3::identity(),
        )
    }

    /// Covariance transported to the requested frame. Body-frame errors map
    /// to inertial ones through the mean: `ε_inertial = R̂·ε_body`.
    pub fn cov_in(&self, frame: ErrorFrame) -> Matrix3<f64> {
        match (self.frame_of_error, frame) {
            (ErrorFrame::Body, ErrorFrame::Body) | (ErrorFrame::Inertial, ErrorFrame::Inertial) => {
                self.cov
            }
            (ErrorFrame::Body, ErrorFrame::Inertial) => {
                self.mean.matrix() * self.cov * self.mean.matrix().transpose()
            }
            (ErrorFrame::Inertial, ErrorFrame::Body) => {
                self.mean.matrix().transpose() * self.cov * self.mean.matrix()
            }
        }
    }

    pub const CSV_HEADER: &'static str = "t,r11,r12,r13,r21,r22,r23,r31,r32,r33,p11,p22,p33";

    /// One CSV row matching [`Self::CSV_HEADER`] (rotation row-major,
    /// covariance diagonal in the state's error frame).
    pub fn csv_row(&self, t: f64) -> String {
        let r = self.mean.matrix();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            t,
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            self.cov[(0, 0)],
            self.cov[(1, 1)],
            self.cov[(2, 2)]
        )
    }
}

/// One prediction step under angular velocity `w` resolved in `frame`, with
/// isotropic white noise of strength `gamma` (rad/√s).
///
/// The mean advances by the step rotation on the matching side. For the
/// body-frame error, inertial velocity leaves the error untouched (`Φ = I`)
/// while body velocity transports it by `exp(−h·ŵ)`; isotropic noise injects
/// `h·γ²·I` in either case.
pub fn mekf_predict(state: &MekfState, w: &Vector3<f64>, frame: Frame, h: f64, gamma: f64) -> MekfState {
    assert!(h > 0.0, "step must be positive");
    assert!(gamma >= 0.0);
    let step = exp_so3(&(h * w));
    let (mean, cov) = match frame {
        Frame::Inertial => (step * state.mean, state.cov),
        Frame::Body => {
            let phi = exp_so3(&(-h * w));
            (
                state.mean * step,
                phi.matrix() * state.cov * phi.matrix().transpose(),
            )
        }
    };
    let cov = cov + h * gamma * gamma * Matrix3::identity();
    MekfState {
        mean,
        cov: 0.5 * (cov + cov.transpose()),
        frame_of_error: state.frame_of_error,
    }
}

/// One measurement update.
///
/// The direction model is linearized about the predicted direction `μ`
/// (`μ = R̂ᵀa` for an inertially known reference, `μ = R̂b` for a body-fixed
/// one), the vMF noise becomes the tangent-plane Gaussian `(1/κ)(I − μμᵀ)`,
/// and the innovation is processed in an orthonormal tangent basis so the
/// 2×2 system stays well conditioned. The mean is retracted through the
/// exponential map and the covariance uses the Joseph form.
pub fn mekf_update(state: &MekfState, meas: &DirectionMeasurement) -> Result<MekfState, MekfError> {
    let r_hat = state.mean.matrix();
    // Predicted direction and measurement Jacobian w.r.t. the body-frame
    // error rotation vector.
    let (mu, h_jac) = match meas.kind {
        // x(ε) = exp(−ε̂)·R̂ᵀa ≈ μ + μ×ε
        MeasurementKind::InertialRef => {
            let mu = r_hat.transpose() * meas.reference;
            (mu, hat(&mu))
        }
        // y(ε) = R̂·exp(ε̂)·b ≈ μ − R̂·b̂·ε
        MeasurementKind::BodyRef => {
            let mu = r_hat * meas.reference;
            (mu, -r_hat * hat(&meas.reference))
        }
    };

    let (t1, t2) = tangent_basis(&mu);
    // 2×3 projection onto the tangent plane at μ.
    let project = |v: &Vector3<f64>| Vector2::new(t1.dot(v), t2.dot(v));

    // H̃ = Tᵀ·H (rows of H projected).
    let mut h2 = nalgebra::SMatrix::<f64, 2, 3>::zeros();
    for c in 0..3 {
        let col = h_jac.column(c).into_owned();
        h2.set_column(c, &project(&col));
    }
    let r2 = Matrix2::identity() / meas.kappa;
    let s2 = h2 * state.cov * h2.transpose() + r2;
    let det = s2.determinant();
    if !det.is_finite() || det <= 0.0 {
        return Err(MekfError::SingularInnovationCov { det });
    }
    let s2_inv = s2
        .try_inverse()
        .ok_or(MekfError::SingularInnovationCov { det })?;

    let gain = state.cov * h2.transpose() * s2_inv;
    let innovation = project(&(meas.reading - mu));
    let delta = gain * innovation;

    let mean = state.mean * exp_so3(&delta);
    let ikh = Matrix3::identity() - gain * h2;
    let cov = ikh * state.cov * ikh.transpose() + gain * r2 * gain.transpose();
    Ok(MekfState {
        mean,
        cov: 0.5 * (cov + cov.transpose()),
        frame_of_error: state.frame_of_error,
    })
}
