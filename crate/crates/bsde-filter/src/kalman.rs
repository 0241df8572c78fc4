//! Exact Kalman filter for linear-Gaussian instances with diagonal structure.
//!
//! Serves as the correctness oracle for all three Monte Carlo filters on the
//! Euler-discretized linear model `x' = a x + w`, `w ~ N(0, q)`, observed
//! directly with per-component variance `r`. Every dimension is independent,
//! so the filter runs componentwise.

/// Runs the filter over all observations.
///
/// Arguments are per-dimension: initial mean `m0`, initial variance `p0`,
/// shared scalar transition `a` and process-noise variance `q`, observation
/// variances `r`. Returns per-step posterior means and variances (one entry
/// per observation).
pub fn kalman_diagonal(
    m0: &[f64],
    p0: &[f64],
    a: f64,
    q: f64,
    r: &[f64],
    observations: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = m0.len();
    let mut mean = m0.to_vec();
    let mut var = p0.to_vec();
    let mut means = Vec::with_capacity(observations.len());
    let mut vars = Vec::with_capacity(observations.len());
    for z in observations {
        for j in 0..d {
            // predict
            let mp = a * mean[j];
            let pp = a * a * var[j] + q;
            // update
            let gain = pp / (pp + r[j]);
            mean[j] = mp + gain * (z[j] - mp);
            var[j] = (1.0 - gain) * pp;
        }
        means.push(mean.clone());
        vars.push(var.clone());
    }
    (means, vars)
}
