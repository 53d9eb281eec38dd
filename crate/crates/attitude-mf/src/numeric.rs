//! Scalar special functions and adaptive quadrature.
//!
//! The normalizing constant of the matrix Fisher distribution reduces to
//! one-dimensional integrals of products of modified Bessel functions against
//! an exponential. For concentration parameters in the hundreds the raw
//! factors overflow `f64`, so everything here works in scaled form: Bessel
//! functions are returned as `e^{-|x|} I_ν(x)` and the caller tracks the
//! discarded exponent separately.

/// Exponentially scaled modified Bessel function of order zero,
/// `e^{-|x|} I₀(x)`.
///
/// Power series below `x = 20`, asymptotic series above; both branches agree
/// to a few ULPs at the joint. Even in `x`.
pub fn bessel_i0_scaled(x: f64) -> f64 {
    let ax = x.abs();
    if ax < ASYMPTOTIC_CUTOVER {
        // I₀(x) = Σ (x²/4)ᵏ / (k!)², all terms positive so no cancellation.
        let q = 0.25 * ax * ax;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term > 1e-18 * sum {
            term *= q / (k * k);
            sum += term;
            k += 1.0;
        }
        sum * (-ax).exp()
    } else {
        bessel_asymptotic_scaled(0, ax)
    }
}

/// Exponentially scaled modified Bessel function of order one,
/// `e^{-|x|} I₁(x)`. Odd in `x`.
pub fn bessel_i1_scaled(x: f64) -> f64 {
    let ax = x.abs();
    let magnitude = if ax < ASYMPTOTIC_CUTOVER {
        // I₁(x) = (x/2) Σ (x²/4)ᵏ / (k! (k+1)!)
        let q = 0.25 * ax * ax;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term > 1e-18 * sum {
            term *= q / (k * (k + 1.0));
            sum += term;
            k += 1.0;
        }
        0.5 * ax * sum * (-ax).exp()
    } else {
        bessel_asymptotic_scaled(1, ax)
    };
    if x < 0.0 {
        -magnitude
    } else {
        magnitude
    }
}

const ASYMPTOTIC_CUTOVER: f64 = 20.0;

/// Large-argument expansion `I_ν(x) ≈ e^x/√(2πx) · Σ tₖ` with
/// `tₖ₊₁ = tₖ ((2k+1)² − 4ν²) / (8(k+1)x)`, truncated at the smallest term.
/// At the cutover the smallest term is ~`e^{-2x}`, i.e. below `f64` precision.
fn bessel_asymptotic_scaled(nu: u32, x: f64) -> f64 {
    debug_assert!(x >= ASYMPTOTIC_CUTOVER);
    let four_nu2 = 4.0 * (nu * nu) as f64;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    for k in 0..50u32 {
        let ratio = ((2 * k + 1).pow(2) as f64 - four_nu2) / (8.0 * (k + 1) as f64 * x);
        let next = term * ratio;
        if next.abs() >= term.abs() {
            break; // divergent tail reached; stop at the optimal truncation
        }
        sum += next;
        term = next;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum / (2.0 * std::f64::consts::PI * x).sqrt()
}

/// Result of an adaptive quadrature: component-wise integral estimates and the
/// largest estimated relative error across components.
#[derive(Debug, Clone, Copy)]
pub struct Quadrature<const N: usize> {
    pub value: [f64; N],
    pub rel_err: f64,
}

/// Adaptive Simpson integration of a vector-valued integrand over the
/// partition `points` (strictly increasing, at least two entries).
///
/// All components are evaluated on the shared adaptive grid; a panel is
/// accepted only when every component passes its Richardson error test. The
/// caller supplies the initial partition, which should already resolve known
/// concentration regions — adaptivity then handles the rest. Panels that hit
/// `max_depth` contribute their error estimate to `rel_err` instead of
/// recursing further, so the caller can decide whether the result is usable.
pub fn adaptive_simpson<const N: usize>(
    f: &impl Fn(f64) -> [f64; N],
    points: &[f64],
    rel_tol: f64,
    max_depth: u32,
) -> Quadrature<N> {
    assert!(points.len() >= 2, "need at least one panel");

    // Coarse pass to establish per-component magnitude scales. Using the sum
    // of per-panel absolute estimates keeps the tolerance meaningful for
    // components whose total integral nearly cancels.
    let mut scale = [0.0_f64; N];
    let mut panels = Vec::with_capacity(points.len() - 1);
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let m = 0.5 * (a + b);
        let (fa, fm, fb) = (f(a), f(m), f(b));
        let s = simpson(a, b, &fa, &fm, &fb);
        for i in 0..N {
            scale[i] += s[i].abs();
        }
        panels.push((a, b, fa, fm, fb, s));
    }
    let floor = 1e-300;
    for s in &mut scale {
        *s = s.max(floor);
    }

    let mut value = [0.0_f64; N];
    let mut err = [0.0_f64; N];
    for (a, b, fa, fm, fb, s) in panels {
        let tol: [f64; N] = std::array::from_fn(|i| rel_tol * scale[i]);
        refine(f, a, b, &fa, &fm, &fb, &s, &tol, max_depth, &mut value, &mut err);
    }
    let rel_err = (0..N).map(|i| err[i] / scale[i]).fold(0.0, f64::max);
    Quadrature { value, rel_err }
}

fn simpson<const N: usize>(a: f64, b: f64, fa: &[f64; N], fm: &[f64; N], fb: &[f64; N]) -> [f64; N] {
    let h = (b - a) / 6.0;
    std::array::from_fn(|i| h * (fa[i] + 4.0 * fm[i] + fb[i]))
}

#[allow(clippy::too_many_arguments)]
fn refine<const N: usize>(
    f: &impl Fn(f64) -> [f64; N],
    a: f64,
    b: f64,
    fa: &[f64; N],
    fm: &[f64; N],
    fb: &[f64; N],
    whole: &[f64; N],
    tol: &[f64; N],
    depth: u32,
    value: &mut [f64; N],
    err: &mut [f64; N],
) {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, &flm, fm);
    let right = simpson(m, b, fm, &frm, fb);

    // Richardson: |S_half − S_whole| / 15 estimates the error of S_half.
    let mut ok = true;
    let mut delta = [0.0_f64; N];
    for i in 0..N {
        delta[i] = left[i] + right[i] - whole[i];
        if delta[i].abs() > 15.0 * tol[i] {
            ok = false;
        }
    }
    if ok || depth == 0 {
        for i in 0..N {
            value[i] += left[i] + right[i] + delta[i] / 15.0;
            err[i] += delta[i].abs() / 15.0;
        }
        return;
    }
    let half_tol: [f64; N] = std::array::from_fn(|i| 0.5 * tol[i]);
    refine(f, a, m, fa, &flm, fm, &left, &half_tol, depth - 1, value, err);
    refine(f, m, b, fm, &frm, fb, &right, &half_tol, depth - 1, value, err);
}
