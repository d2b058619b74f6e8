//! Central finite-difference oracle for gradient verification.
//!
//! Used by the test suite and the acceptance checks: an analytic gradient
//! from [`crate::tensor::Tape::backward`] is compared against
//! (f(x+h) - f(x-h)) / 2h, which exercises only the forward path.
//!
//! The closure must be a deterministic function of its input buffer: any
//! internal random draws have to be re-seeded identically per call, and
//! values the real pipeline treats as constants (detached confidence
//! weights) must be frozen at the base point.

/// Central finite differences of a scalar function w.r.t. every entry of
/// `x`. `x` is restored to its original contents afterwards.
pub fn central_diff<F>(f: &mut F, x: &mut [f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(x);
        x[i] = orig - h;
        let fm = f(x);
        x[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Worst relative disagreement between two gradient vectors, with an
/// absolute floor so near-zero entries are compared absolutely:
/// |a - n| / max(|a|, |n|, floor).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Default step for the central difference; error is O(h^2) + O(eps/h),
/// which bottoms out near 1e-10 for O(1) values at this h.
pub const FD_STEP: f64 = 1e-5;

/// Floor used in relative-error comparisons throughout the suite.
pub const REL_FLOOR: f64 = 1e-3;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_polynomial_derivative() {
        // f(x) = x0^2 + 3*x1, df = (2*x0, 3).
        let mut f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let mut x = vec![1.5, -2.0];
        let fd = central_diff(&mut f, &mut x, FD_STEP);
        assert!((fd[0] - 3.0).abs() < 1e-9);
        assert!((fd[1] - 3.0).abs() < 1e-9);
        assert_eq!(x, vec![1.5, -2.0]); // restored
    }

    #[test]
    fn rel_err_uses_absolute_floor_near_zero() {
        assert!(max_rel_err(&[0.0], &[1e-9], 1e-3) < 1e-4);
        assert!(max_rel_err(&[1.0], &[1.1], 1e-3) > 0.05);
    }
}
