//! Central finite differences, used as an independent check on the
//! hand-written backward passes.

/// Numerical gradient of `f` at `params` by central differences with step `eps`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, params: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Below this magnitude gradients are compared in absolute terms; central
/// differences cannot resolve relative error on near-zero components.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, RELATIVE_ERROR_FLOOR)
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}
