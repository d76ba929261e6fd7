//! Central finite-difference gradient checking.
//!
//! The checker re-evaluates a scalar function under elementwise perturbations,
//! so it is independent of the tape's backward pass by construction.

use super::graph::Arr;

/// Central-difference gradient of `f` at `x` with the given step.
pub fn central_diff<F: FnMut(&Arr) -> f64>(mut f: F, x: &Arr, step: f64) -> Arr {
    let mut grad = Arr::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + step;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - step;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Largest elementwise relative error between two gradients.
///
/// The denominator is floored at `floor` so that near-zero entries compare
/// absolutely rather than blowing up.
pub fn max_rel_error(analytic: &Arr, numeric: &Arr, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
