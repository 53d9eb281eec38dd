//! Attitude estimation on SO(3) with matrix Fisher distributions.
//!
//! The matrix Fisher distribution `p(R) ∝ exp(tr(Fᵀ R))` is the exponential
//! family on the rotation group generated by linear functions of the attitude
//! matrix. It is conjugate to direction-vector measurements, which makes a
//! fully Bayesian attitude filter tractable: propagation and measurement
//! updates both stay inside the family.
//!
//! The crate provides
//!
//! * [`so3`] — rotation-group primitives (hat/vee, exponential/logarithm,
//!   proper singular value decomposition, the inverse of the differential of
//!   the exponential);
//! * [`matrix_fisher`] — the distribution itself: normalizing constant and its
//!   derivatives, first moments, maximum-likelihood fitting, sampling and
//!   marginal axis densities;
//! * [`propagation`] — uncertainty propagation for attitude kinematics driven
//!   by white angular-velocity noise, in both the right-trivialized (inertial
//!   noise) and left-trivialized (body-frame noise) formulations, together
//!   with a geometric Euler–Maruyama simulator used to validate them;
//! * [`measurement`] — von Mises–Fisher direction measurements of inertially
//!   known or body-fixed reference vectors and their conjugate updates;
//! * [`observability`] — posterior-moment based observability analysis:
//!   MMSE-estimate classification, Fisher information, and the scalar index
//!   that detects when a single reference direction leaves one attitude degree
//!   of freedom unconstrained;
//! * [`mekf`] — a multiplicative extended Kalman filter used as the
//!   linearization-based baseline;
//! * [`harness`] — scenario generation, synthetic sensor streams, filter
//!   drivers and Monte-Carlo summaries;
//! * [`cli`] — the command-line front end.

pub mod cli;
pub mod harness;
pub mod matrix_fisher;
pub mod measurement;
pub mod mekf;
pub mod numeric;
pub mod observability;
pub mod propagation;
pub mod so3;

pub use matrix_fisher::MatrixFisher;
pub use so3::{ProperSvd, Rotation};
