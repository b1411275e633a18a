//! Small dense-vector kernels shared by the solvers and operators.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `‖a − b‖₂`
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Relative change `‖new − old‖ / ‖old‖`; a zero `old` compares against `‖new‖`.
pub fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    let delta = dist(new, old);
    let base = norm(old);
    if base > 0.0 {
        delta / base
    } else if delta == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}
