//! Central finite-difference gradient verification.
//!
//! The oracle only ever calls the loss as a black-box function of a flat
//! parameter vector, so it stays independent of the tape's backward pass.

use crate::parallel;

/// Central difference df/dx_i = (f(x+h e_i) - f(x-h e_i)) / 2h for the
/// requested coordinates. Coordinates are evaluated independently (and in
/// parallel when available).
pub fn central_diff<F>(f: &F, point: &[f64], coords: &[usize], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    parallel::map_indexed(coords.len(), |ci| {
        let i = coords[ci];
        let mut x = point.to_vec();
        x[i] = point[i] + step;
        let plus = f(&x);
        x[i] = point[i] - step;
        let minus = f(&x);
        (plus - minus) / (2.0 * step)
    })
}

/// Relative error with a small floor so near-zero gradients compare on an
/// absolute scale.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between analytic and finite-difference gradients
/// over the given coordinates.
pub fn max_relative_error<F>(
    f: &F,
    point: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let numeric = central_diff(f, point, coords, step);
    coords
        .iter()
        .zip(&numeric)
        .map(|(&i, &fd)| relative_error(analytic[i], fd))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f = x0^2 + 3 x1, df = [2 x0, 3]
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[1];
        let grads = central_diff(&f, &[3.0, 4.0], &[0, 1], 1e-5);
        assert!((grads[0] - 6.0).abs() < 1e-8);
        assert!((grads[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floors_near_zero() {
        assert!(relative_error(0.0, 1e-9) < 1e-2);
        assert!(relative_error(1.0, 2.0) > 0.4);
    }
}
