//! Rotation-group primitives: hat/vee maps, exponential and logarithm,
//! proper singular value decomposition, and the inverse differential of the
//! exponential map.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum So3Error {
    /// The matrix handed to [`vee`] is not skew-symmetric.
    #[error("matrix is not skew-symmetric (‖S + Sᵀ‖ = {asymmetry:.3e})")]
    NotSkew { asymmetry: f64 },
    /// The matrix handed to [`Rotation::from_matrix`] is not a rotation.
    #[error("matrix is not a rotation (orthogonality defect {defect:.3e}, det {det:.6})")]
    NotRotation { defect: f64, det: f64 },
}

/// A rotation matrix in SO(3).
///
/// The checked constructor enforces orthonormality and unit determinant to
/// 1e-10; code that produces rotations by construction (exponential map,
/// products of rotations) uses the unchecked path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix after verifying `RᵀR = I` and `det R = 1` to 1e-10.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, So3Error> {
        let defect = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if defect > 1e-10 || (det - 1.0).abs() > 1e-10 {
            return Err(So3Error::NotRotation { defect, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix that is a rotation by construction.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        debug_assert!(
            (m.transpose() * m - Matrix3::identity()).norm() < 1e-8,
            "from_matrix_unchecked received a non-rotation"
        );
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// Column `i` as a vector (the image of the `i`-th basis vector).
    pub fn col(&self, i: usize) -> Vector3<f64> {
        self.0.column(i).into()
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        log_so3(self).norm()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Rotation vector (axis times angle, radians). The logarithm returns the
/// canonical representative with `‖v‖ ≤ π`.
pub type RotVec = Vector3<f64>;

/// Proper singular value decomposition `M = U·diag(s)·Vᵀ` with
/// `U, V ∈ SO(3)`. The price of proper factors is that `s3` may be negative;
/// the ordering guarantee is `s1 ≥ s2 ≥ |s3|`.
#[derive(Debug, Clone, Copy)]
pub struct ProperSvd {
    pub u: Rotation,
    pub s: Vector3<f64>,
    pub v: Rotation,
}

impl ProperSvd {
    /// Reassembles `U·diag(s)·Vᵀ`.
    pub fn reconstruct(&self) -> Matrix3<f64> {
        self.u.matrix() * Matrix3::from_diagonal(&self.s) * self.v.matrix().transpose()
    }
}

/// The skew-symmetric matrix of `v`, defined by `hat(v)·y = v × y`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Inverse of [`hat`]. Fails with [`So3Error::NotSkew`] unless
/// `‖S + Sᵀ‖ < 1e-9`.
pub fn vee(s: &Matrix3<f64>) -> Result<Vector3<f64>, So3Error> {
    let asymmetry = (s + s.transpose()).norm();
    if asymmetry >= 1e-9 {
        return Err(So3Error::NotSkew { asymmetry });
    }
    Ok(Vector3::new(s[(2, 1)], s[(0, 2)], s[(1, 0)]))
}

/// Extracts the skew part of a matrix and returns its coordinates,
/// `vee((M − Mᵀ)/2)`. Unlike [`vee`] this never fails; it is the projection
/// used when a product is skew only up to rounding.
pub fn skew_coords(m: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}

/// Exponential map: Rodrigues' formula, with a second-order Taylor branch for
/// angles below 1e-6 to avoid 0/0.
pub fn exp_so3(v: &RotVec) -> Rotation {
    let theta = v.norm();
    let k = hat(v);
    let m = if theta < 1e-6 {
        Matrix3::identity() + k + 0.5 * (k * k)
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Matrix3::identity() + a * k + b * (k * k)
    };
    Rotation(m)
}

/// Logarithm map, returning the canonical rotation vector with norm in
/// `[0, π]`.
///
/// The angle comes from `atan2(‖R − Rᵀ‖/2-coordinates, (tr R − 1)/2)`, which
/// stays accurate where `acos` loses digits. Near angle π the axis is
/// extracted from the dominant column of `R + I`; exactly at π, where both
/// signs are valid, the largest-diagonal column rule makes the choice
/// deterministic.
pub fn log_so3(r: &Rotation) -> RotVec {
    let m = r.matrix();
    let w = skew_coords(m); // = sin(θ) · axis
    let sin_theta = w.norm();
    let cos_theta = 0.5 * (m.trace() - 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < 1e-6 {
        // log R ≈ (1/2)(R − Rᵀ)ᵛ · (1 + θ²/6)
        return w * (1.0 + theta * theta / 6.0);
    }
    if theta > std::f64::consts::PI - 1e-4 {
        // Near π the sin-based axis is ill-conditioned, but the exact
        // identity R + Rᵀ = 2cosθ·I + 2(1−cosθ)·aaᵀ stays well-conditioned:
        // at θ ≈ π the denominator 1−cosθ ≈ 2. Extract the axis from the
        // dominant column of aaᵀ (the largest-diagonal rule also fixes the
        // sign when θ = π exactly and both ±a are valid).
        let outer = (0.5 * (m + m.transpose()) - cos_theta * Matrix3::identity())
            / (1.0 - cos_theta);
        let j = (0..3)
            .max_by(|&p, &q| outer[(p, p)].partial_cmp(&outer[(q, q)]).unwrap())
            .unwrap();
        let mut axis: Vector3<f64> = outer.column(j) / outer[(j, j)].max(f64::MIN_POSITIVE).sqrt();
        axis /= axis.norm();
        // Keep the sign consistent with the skew part while it is resolvable:
        // w·axis = sin θ with absolute noise ~1e-15 from the matrix entries,
        // so the sign is trustworthy down to sin θ ≈ 1e-11. Below that the
        // rotation is a half turn to within rounding and either sign is a
        // valid logarithm; the largest-diagonal rule makes the choice stable.
        if sin_theta > 1e-11 && w.dot(&axis) < 0.0 {
            axis = -axis;
        }
        return theta * axis;
    }
    w * (theta / sin_theta)
}

/// Proper singular value decomposition (see [`ProperSvd`]).
///
/// Runs a standard SVD and then repairs signs: any factor with determinant −1
/// has its last column negated, compensated in `s3`, so that both factors end
/// up in SO(3).
pub fn proper_svd(m: &Matrix3<f64>) -> ProperSvd {
    let svd = m.svd_unordered(true, true);
    let mut u = svd.u.expect("svd requested with u");
    let vt = svd.v_t.expect("svd requested with v_t");
    let mut v = vt.transpose();
    let mut s = svd.singular_values;

    // Sort descending by magnitude (all values still non-negative here).
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
    let su = u.clone_owned();
    let sv = v.clone_owned();
    let ss = s;
    for (new, &old) in idx.iter().enumerate() {
        u.set_column(new, &su.column(old));
        v.set_column(new, &sv.column(old));
        s[new] = ss[old];
    }

    let det_u = u.determinant();
    let det_v = v.determinant();
    if det_u < 0.0 {
        let c = -u.column(2).clone_owned();
        u.set_column(2, &c);
    }
    if det_v < 0.0 {
        let c = -v.column(2).clone_owned();
        v.set_column(2, &c);
    }
    s[2] *= det_u.signum() * det_v.signum();

    ProperSvd {
        u: Rotation::from_matrix_unchecked(u),
        s,
        v: Rotation::from_matrix_unchecked(v),
    }
}

/// Draws a rotation from the uniform (Haar) distribution on SO(3), via a
/// normalized 4-vector of standard normals interpreted as a quaternion.
pub fn random_rotation(rng: &mut impl rand::Rng) -> Rotation {
    use rand_distr::{Distribution, StandardNormal};
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Rotation::from_matrix_unchecked(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Inverse differential of the exponential map on 𝔰𝔬(3):
/// `dexp⁻¹_c(a) = a − ½ c×a + g(‖c‖) c×(c×a)` with
/// `g(θ) = (1 − (θ/2)·cot(θ/2)) / θ²`.
///
/// This is the closed form of the Bernoulli-number series
/// `Σ (Bₖ/k!) adₖ_c a`; it is what converts a body- or space-frame angular
/// velocity into the derivative of the rotation-vector coordinate. Valid for
/// `‖c‖ < 2π`, with a Taylor branch below 1e-6.
pub fn dexp_inv(c: &RotVec, a: &Vector3<f64>) -> Vector3<f64> {
    let theta = c.norm();
    debug_assert!(theta < 2.0 * std::f64::consts::PI, "dexp_inv domain is ‖c‖ < 2π");
    let g = if theta < 1e-6 {
        // g(θ) = 1/12 + θ²/720 + O(θ⁴)
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * (half.cos() / half.sin())) / (theta * theta)
    };
    let ca = c.cross(a);
    a - 0.5 * ca + g * c.cross(&ca)
}
