//! Single-direction measurements and their conjugate attitude updates.
//!
//! A direction sensor reads a known unit reference vector through the
//! (unknown) attitude, with von Mises–Fisher noise on the sphere. Two
//! geometries occur in practice and behave very differently:
//!
//! * **inertial reference** (star tracker, sun sensor, magnetometer): the
//!   reference `a` is fixed in the inertial frame and the reading
//!   `x ≈ Rᵀa` is resolved in the body frame;
//! * **body reference** (landmark bearing from a ground station, GPS antenna
//!   baseline): the reference `b` is fixed to the body and the reading
//!   `y ≈ R·b` is resolved in the inertial frame.
//!
//! Both likelihoods are conjugate to the matrix Fisher family: the posterior
//! parameter is the prior parameter plus a rank-one term, `F + κaxᵀ` for the
//! inertial case and `F + κybᵀ` for the body case. The placement of the
//! rank-one term is what makes the two cases distinguishable downstream: an
//! inertial measurement pins the *left* (inertial) principal axis at `a`,
//! a body measurement pins the *right* (body) principal axis at `b`, and the
//! rotation about that axis stays completely unknown either way.

use nalgebra::Vector3;
use rand::Rng;

use crate::matrix_fisher::MatrixFisher;
use crate::so3::Rotation;

/// Which frame holds the known reference vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    /// Reference fixed in the inertial frame, reading resolved in the body
    /// frame (`x ≈ Rᵀa`).
    InertialRef,
    /// Reference fixed in the body frame, reading resolved in the inertial
    /// frame (`y ≈ R·b`).
    BodyRef,
}

/// One time-stamped unit-direction reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionMeasurement {
    pub kind: MeasurementKind,
    /// The known reference direction (`a` or `b`), unit length.
    pub reference: Vector3<f64>,
    /// The sensed direction (`x` or `y`), unit length.
    pub reading: Vector3<f64>,
    /// von Mises–Fisher concentration of the sensor noise.
    pub kappa: f64,
    /// Measurement time in seconds.
    pub t: f64,
}

impl DirectionMeasurement {
    /// Builds a measurement, checking the unit-vector and concentration
    /// invariants (violations are programming errors, so this panics).
    pub fn new(
        kind: MeasurementKind,
        reference: Vector3<f64>,
        reading: Vector3<f64>,
        kappa: f64,
        t: f64,
    ) -> Self {
        assert!(
            (reference.norm() - 1.0).abs() < 1e-9,
            "reference must be unit length"
        );
        assert!(
            (reading.norm() - 1.0).abs() < 1e-9,
            "reading must be unit length"
        );
        assert!(kappa > 0.0, "kappa must be positive");
        Self {
            kind,
            reference,
            reading,
            kappa,
            t,
        }
    }
}

/// Two unit vectors completing `n` to an orthonormal frame.
pub(crate) fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let trial = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let t1 = (trial - n * trial.dot(n)).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

/// Draws from the von Mises–Fisher distribution on S² with the given mean
/// direction and concentration.
///
/// On S² the cosine of the polar angle has density ∝ `exp(κt)` on `[-1, 1]`,
/// which inverts in closed form: `t = 1 + ln(1 + (1-u)(e^{-2κ}-1))/κ` for
/// uniform `u ∈ (0, 1]`, written with `ln_1p`/`exp_m1` so it stays accurate
/// from κ ≈ 0 up to κ = 1e8 and beyond. The azimuth is uniform.
pub fn sample_vmf(mean: &Vector3<f64>, kappa: f64, rng: &mut impl Rng) -> Vector3<f64> {
    assert!((mean.norm() - 1.0).abs() < 1e-9, "mean must be unit length");
    assert!(kappa > 0.0, "kappa must be positive");
    // 1 - random::<f64>() lies in (0, 1]; u = 0 would send t to -∞.
    let u = 1.0 - rng.random::<f64>();
    let t = (1.0 + f64::ln_1p((1.0 - u) * f64::exp_m1(-2.0 * kappa)) / kappa).clamp(-1.0, 1.0);
    let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    let rho = (1.0 - t * t).max(0.0).sqrt();
    let (t1, t2) = tangent_basis(mean);
    mean * t + (t1 * phi.cos() + t2 * phi.sin()) * rho
}

/// Simulates an inertial-reference reading `x | R ~ vMF(Rᵀa, κ)`.
pub fn sample_inertial(
    r_true: &Rotation,
    a: &Vector3<f64>,
    kappa: f64,
    rng: &mut impl Rng,
) -> Vector3<f64> {
    sample_vmf(&(r_true.matrix().transpose() * a), kappa, rng)
}

/// Simulates a body-reference reading `y | R ~ vMF(R·b, κ)`.
pub fn sample_body(
    r_true: &Rotation,
    b: &Vector3<f64>,
    kappa: f64,
    rng: &mut impl Rng,
) -> Vector3<f64> {
    sample_vmf(&(r_true.matrix() * b), kappa, rng)
}

/// Log-likelihood `ln p(reading | R)` of a direction measurement, including
/// the vMF normalizing constant (evaluated overflow-free for large κ).
pub fn log_likelihood(m: &DirectionMeasurement, r: &Rotation) -> f64 {
    let align = match m.kind {
        MeasurementKind::InertialRef => m.reference.dot(&(r.matrix() * m.reading)),
        MeasurementKind::BodyRef => m.reference.dot(&(r.matrix().transpose() * m.reading)),
    };
    // ln[κ / (4π sinh κ)] = ln κ - ln(4π) - κ - ln((1 - e^{-2κ})/2)
    let log_norm = m.kappa.ln()
        - (4.0 * std::f64::consts::PI).ln()
        - m.kappa
        - f64::ln_1p(-(-2.0 * m.kappa).exp())
        + std::f64::consts::LN_2;
    log_norm + m.kappa * align
}

/// Conjugate update for an inertial-reference reading: `F⁺ = F⁻ + κaxᵀ`.
///
/// Exact (no approximation): the vMF likelihood in `R` is proportional to
/// `exp(tr((κaxᵀ)ᵀ R))`, so parameters add.
pub fn update_inertial(
    prior: &MatrixFisher,
    a: &Vector3<f64>,
    x: &Vector3<f64>,
    kappa: f64,
) -> MatrixFisher {
    MatrixFisher::new(prior.f() + kappa * a * x.transpose())
}

/// Conjugate update for a body-reference reading: `F⁺ = F⁻ + κybᵀ`.
pub fn update_body(
    prior: &MatrixFisher,
    b: &Vector3<f64>,
    y: &Vector3<f64>,
    kappa: f64,
) -> MatrixFisher {
    MatrixFisher::new(prior.f() + kappa * y * b.transpose())
}

/// Applies whichever conjugate update matches the measurement kind.
pub fn update(prior: &MatrixFisher, m: &DirectionMeasurement) -> MatrixFisher {
    match m.kind {
        MeasurementKind::InertialRef => update_inertial(prior, &m.reference, &m.reading, m.kappa),
        MeasurementKind::BodyRef => update_body(prior, &m.reference, &m.reading, m.kappa),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix_fisher::log_density;
    use crate::so3::{exp_so3, random_rotation};
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn unit(v: Vector3<f64>) -> Vector3<f64> {
        v.normalize()
    }

    // ---- sampling ---------------------------------------------------------

    #[test]
    fn noiseless_limit_recovers_rotated_reference() {
        let mut rng = StdRng::seed_from_u64(100);
        let r = random_rotation(&mut rng);
        let a = unit(Vector3::new(0.3, -0.5, 0.8));
        let x = sample_inertial(&r, &a, 1e8, &mut rng);
        assert!((x - r.matrix().transpose() * a).norm() < 1e-3);

        let b = unit(Vector3::new(-0.2, 0.9, 0.4));
        let y = sample_body(&r, &b, 1e8, &mut rng);
        assert!((y - r * b).norm() < 1e-3);
    }

    #[test]
    fn sample_mean_matches_vmf_resultant() {
        // E[reading] = A(κ)·center with A(κ) = coth κ - 1/κ.
        let mut rng = StdRng::seed_from_u64(101);
        let r = random_rotation(&mut rng);
        let kappa = 5.0;
        let a = unit(Vector3::new(1.0, 2.0, -1.0));
        let n = 100_000;
        let mut acc = Vector3::zeros();
        for _ in 0..n {
            acc += sample_inertial(&r, &a, kappa, &mut rng);
        }
        let mean = acc / n as f64;
        let resultant = mean.norm();
        let expect = 1.0 / kappa.tanh() - 1.0 / kappa;
        assert!(
            (resultant / expect - 1.0).abs() < 0.01,
            "resultant {resultant} vs {expect}"
        );
        let center = r.matrix().transpose() * a;
        assert!(mean.normalize().dot(&center) > 0.9999);
    }

    #[test]
    fn body_sample_mean_centers_on_rotated_body_vector() {
        let mut rng = StdRng::seed_from_u64(102);
        let r = random_rotation(&mut rng);
        let kappa = 20.0;
        let b = unit(Vector3::new(0.1, -0.7, 0.7));
        let n = 100_000;
        let mut acc = Vector3::zeros();
        for _ in 0..n {
            acc += sample_body(&r, &b, kappa, &mut rng);
        }
        let mean = acc / n as f64;
        let expect = 1.0 / kappa.tanh() - 1.0 / kappa;
        assert!((mean.norm() / expect - 1.0).abs() < 0.01);
        assert!(mean.normalize().dot(&(r * b)) > 0.9999);
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let r = random_rotation(&mut StdRng::seed_from_u64(103));
        let a = unit(Vector3::new(0.5, 0.5, -0.7));
        let draw = |seed| {
            let mut rng = StdRng::seed_from_u64(seed);
            (0..10)
                .map(|_| sample_inertial(&r, &a, 50.0, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn vmf_cosine_distribution_matches_cdf() {
        // Beyond the mean direction: the full cosine law has CDF
        // (e^{κt} - e^{-κ})/(e^{κ} - e^{-κ}); check a few quantiles.
        let mut rng = StdRng::seed_from_u64(104);
        let kappa = 3.0;
        let mean = Vector3::z();
        let n = 200_000;
        let mut cosines: Vec<f64> = (0..n)
            .map(|_| sample_vmf(&mean, kappa, &mut rng).dot(&mean))
            .collect();
        cosines.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for q in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let t_emp = cosines[(q * n as f64) as usize];
            // invert CDF analytically
            let t_exact =
                1.0 + f64::ln_1p((1.0 - q) * f64::exp_m1(-2.0 * kappa)) / kappa;
            assert!(
                (t_emp - t_exact).abs() < 0.01,
                "quantile {q}: {t_emp} vs {t_exact}"
            );
        }
    }

    // ---- conjugate updates ------------------------------------------------

    #[test]
    fn vacuous_prior_inertial_update_is_rank_one_about_reference() {
        let prior = MatrixFisher::uniform();
        let a = Vector3::x();
        let x = Vector3::x();
        let post = update_inertial(&prior, &a, &x, 500.0);
        assert_relative_eq!(
            post.s(),
            Vector3::new(500.0, 0.0, 0.0),
            epsilon = 1e-9
        );
        // First inertial principal axis is the reference direction (up to
        // the sign ambiguity of a principal line).
        assert!(post.svd().u.col(0).dot(&a).abs() > 1.0 - 1e-9);

        // Same with a generic geometry: F = κaxᵀ has principal axes a and x.
        let a = unit(Vector3::new(1.0, -2.0, 2.0));
        let x = unit(Vector3::new(0.0, 0.6, -0.8));
        let post = update_inertial(&prior, &a, &x, 500.0);
        assert_relative_eq!(post.s(), Vector3::new(500.0, 0.0, 0.0), epsilon = 1e-9);
        assert!(post.svd().u.col(0).dot(&a).abs() > 1.0 - 1e-9);
        assert!(post.svd().v.col(0).dot(&x).abs() > 1.0 - 1e-9);
    }

    #[test]
    fn vacuous_prior_body_update_is_rank_one_about_body_reference() {
        let prior = MatrixFisher::uniform();
        let b = Vector3::x();
        let y = Vector3::x();
        let post = update_body(&prior, &b, &y, 500.0);
        assert_relative_eq!(post.s(), Vector3::new(500.0, 0.0, 0.0), epsilon = 1e-9);
        // The *body-frame* principal axis (right factor) is b.
        assert!(post.svd().v.col(0).dot(&b).abs() > 1.0 - 1e-9);

        let b = unit(Vector3::new(-0.4, 0.2, 0.9));
        let y = unit(Vector3::new(0.8, 0.1, 0.6));
        let post = update_body(&prior, &b, &y, 500.0);
        assert_relative_eq!(post.s(), Vector3::new(500.0, 0.0, 0.0), epsilon = 1e-9);
        assert!(post.svd().v.col(0).dot(&b).abs() > 1.0 - 1e-9);
        assert!(post.svd().u.col(0).dot(&y).abs() > 1.0 - 1e-9);
    }

    #[test]
    fn posterior_density_is_pointwise_bayes() {
        // log posterior - log prior - log likelihood must be the same
        // constant (the negative log evidence) at every rotation.
        let prior = MatrixFisher::new(Matrix3::new(
            2.0, 0.3, -0.1, //
            0.0, 1.5, 0.2, //
            0.4, -0.2, 1.0,
        ));
        let mut rng = StdRng::seed_from_u64(105);
        for kind in [MeasurementKind::InertialRef, MeasurementKind::BodyRef] {
            let m = DirectionMeasurement::new(
                kind,
                unit(Vector3::new(0.2, -1.0, 0.5)),
                unit(Vector3::new(0.9, 0.1, -0.4)),
                35.0,
                0.0,
            );
            let post = update(&prior, &m);
            let mut offsets = Vec::new();
            for _ in 0..500 {
                let r = random_rotation(&mut rng);
                let lhs = log_density(&post, &r).unwrap();
                let rhs = log_density(&prior, &r).unwrap() + log_likelihood(&m, &r);
                offsets.push(lhs - rhs);
            }
            let (lo, hi) = offsets
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            assert!(
                hi - lo < 1e-10,
                "Bayes offset not constant for {kind:?}: spread {}",
                hi - lo
            );
        }
    }

    #[test]
    fn zero_concentration_measurement_is_uninformative() {
        let prior = MatrixFisher::new(Matrix3::new(
            3.0, 0.0, 0.1, //
            0.2, 2.0, 0.0, //
            0.0, 0.1, 1.0,
        ));
        let post = update_inertial(&prior, &Vector3::x(), &Vector3::y(), 0.0);
        assert_eq!(post.f(), prior.f());
        let post = update_body(&prior, &Vector3::z(), &Vector3::x(), 0.0);
        assert_eq!(post.f(), prior.f());
    }

    #[test]
    fn single_inertial_measurement_leaves_rotation_about_reference_free() {
        // From a vacuous prior, the posterior cannot distinguish rotations
        // that differ by a turn about the inertial reference axis.
        let a = unit(Vector3::new(0.6, 0.0, 0.8));
        let x = unit(Vector3::new(-0.3, 0.9, 0.3));
        let post = update_inertial(&MatrixFisher::uniform(), &a, &x, 120.0);
        let mut rng = StdRng::seed_from_u64(106);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let base = log_density(&post, &r).unwrap();
            for theta in [0.3, 1.2, 2.9, -1.7] {
                let turned = exp_so3(&(theta * a)) * r;
                assert_relative_eq!(
                    log_density(&post, &turned).unwrap(),
                    base,
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn single_body_measurement_leaves_rotation_about_body_reference_free() {
        let b = unit(Vector3::new(0.0, -0.6, 0.8));
        let y = unit(Vector3::new(0.7, 0.7, 0.14));
        let post = update_body(&MatrixFisher::uniform(), &b, &y, 120.0);
        let mut rng = StdRng::seed_from_u64(107);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let base = log_density(&post, &r).unwrap();
            for theta in [0.3, 1.2, 2.9, -1.7] {
                let turned = r * exp_so3(&(theta * b));
                assert_relative_eq!(
                    log_density(&post, &turned).unwrap(),
                    base,
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn same_kind_updates_commute() {
        // Parameter addition with exactly representable inputs commutes to
        // the bit; generic inputs commute to rounding.
        let prior = MatrixFisher::new(Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 4.0)));
        let a1 = Vector3::x();
        let x1 = Vector3::x();
        let a2 = Vector3::y();
        let x2 = Vector3::x();
        let p12 = update_inertial(&update_inertial(&prior, &a1, &x1, 512.0), &a2, &x2, 256.0);
        let p21 = update_inertial(&update_inertial(&prior, &a2, &x2, 256.0), &a1, &x1, 512.0);
        assert_eq!(p12.f(), p21.f());

        let mut rng = StdRng::seed_from_u64(108);
        let rv = |rng: &mut StdRng| {
            unit(Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ))
        };
        let (a1, x1, a2, x2) = (rv(&mut rng), rv(&mut rng), rv(&mut rng), rv(&mut rng));
        let p12 = update_inertial(&update_inertial(&prior, &a1, &x1, 37.0), &a2, &x2, 91.0);
        let p21 = update_inertial(&update_inertial(&prior, &a2, &x2, 91.0), &a1, &x1, 37.0);
        assert_relative_eq!(p12.f(), p21.f(), epsilon = 1e-12);
    }

    #[test]
    fn measurement_constructor_enforces_invariants() {
        let ok = DirectionMeasurement::new(
            MeasurementKind::InertialRef,
            Vector3::x(),
            Vector3::y(),
            10.0,
            1.5,
        );
        assert_eq!(ok.t, 1.5);
        assert!(std::panic::catch_unwind(|| {
            DirectionMeasurement::new(
                MeasurementKind::InertialRef,
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::y(),
                10.0,
                0.0,
            )
        })
        .is_err());
        assert!(std::panic::catch_unwind(|| {
            DirectionMeasurement::new(
                MeasurementKind::BodyRef,
                Vector3::x(),
                Vector3::y(),
                0.0,
                0.0,
            )
        })
        .is_err());
    }
}
