//! Central finite differences, used as the independent oracle for every
//! analytic gradient in this crate.

use crate::scalar::Scalar;

/// Numeric gradient of `f` at `x` via central differences.
pub fn central_gradient<S, F>(mut f: F, x: &[S], step: f64) -> Vec<S>
where
    S: Scalar,
    F: FnMut(&[S]) -> S,
{
    let h = S::from_f64(step);
    let two_h = h + h;
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xi = x[i];
        probe[i] = xi + h;
        let fp = f(&probe);
        probe[i] = xi - h;
        let fm = f(&probe);
        probe[i] = xi;
        grad.push((fp - fm) / two_h);
    }
    grad
}

/// Largest relative error between two gradients, with an absolute floor so
/// near-zero entries compare absolutely.
pub fn max_rel_err<S: Scalar>(analytic: &[S], numeric: &[S], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = a.as_f64();
        let n = n.as_f64();
        let denom = a.abs().max(n.abs()).max(floor);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [1.0, -2.0, 0.5];
        let g = central_gradient(f, &x, 1e-5);
        let expect = [2.0, -4.0, 1.0];
        assert!(max_rel_err(&expect, &g, 1e-8) < 1e-8);
    }
}
