//! Central finite-difference gradient checking (64-bit).
//!
//! The oracle is independent of the reverse-mode path: it only re-runs the
//! forward closure at perturbed inputs.

/// Central difference with step `h` on a flat parameter vector.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let up = f(&xp);
        xp[i] = orig - h;
        let down = f(&xp);
        xp[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest relative error between an analytic and a numeric gradient.
/// The denominator is floored so that near-zero pairs compare absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
