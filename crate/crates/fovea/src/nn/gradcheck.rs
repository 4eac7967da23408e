//! Central finite-difference gradient verification.
//!
//! Used by unit and acceptance tests to compare analytic gradients of the
//! layers, the losses, and whole models against a derivative-free oracle.

/// Central-difference gradient of a scalar function at `theta`.
///
/// The step is scaled per coordinate: `h = cbrt(eps) * max(1, |theta_i|)`,
/// the usual optimum for second-order differences in f64.
pub fn central_diff_grad(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64]) -> Vec<f64> {
    let base_h = f64::EPSILON.cbrt();
    let mut work = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let h = base_h * theta[i].abs().max(1.0);
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error `||a - b|| / max(||a||, ||b||, 1e-12)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
