use super::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

/// Relative error with a floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares an analytic gradient against central differences over every
/// coordinate of `point`. `f` returns the function value and its analytic
/// gradient; only the value is used at perturbed points.
pub fn finite_difference_check(
    f: impl FnMut(&Tensor) -> (f64, Tensor),
    point: &Tensor,
    eps: f64,
) -> f64 {
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_difference_check_at(f, point, &coords, eps)
}

/// As [`finite_difference_check`], restricted to the listed coordinates.
pub fn finite_difference_check_at(
    mut f: impl FnMut(&Tensor) -> (f64, Tensor),
    point: &Tensor,
    coords: &[usize],
    eps: f64,
) -> f64 {
    let (_, analytic) = f(point);
    assert_eq!(analytic.shape(), point.shape(), "gradient shape mismatch");
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for &k in coords {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let (plus, _) = f(&probe);
        probe.data_mut()[k] = orig - eps;
        let (minus, _) = f(&probe);
        probe.data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[k], numeric));
    }
    worst
}
