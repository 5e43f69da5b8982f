//! Raw compute kernels shared by the tape's forward and backward passes.
//!
//! `matmul_threaded` splits output rows across workers; each row is computed
//! with the same sequential instruction order as `matmul_seq`, so both
//! variants produce bit-identical results.

use super::Scalar;
use crate::parallel;

/// Work threshold (multiply-adds) below which threading is not worth it.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// out[m,n] += is not supported; out is overwritten. a: [m,k], b: [k,n].
pub fn matmul_seq<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (i, row_out) in out.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, row_out, k, n);
    }
}

/// Row-parallel matmul; falls back to [`matmul_seq`] under the work threshold
/// or when the `parallel` feature is off.
pub fn matmul_threaded<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m * k * n < PAR_FLOP_THRESHOLD || parallel::current_threads() == 1 {
        matmul_seq(a, b, out, m, k, n);
        return;
    }
    parallel::fill_chunks(out, n, |i, row_out| {
        matmul_row(&a[i * k..(i + 1) * k], b, row_out, k, n);
    });
}

#[inline]
fn matmul_row<T: Scalar>(a_row: &[T], b: &[T], out_row: &mut [T], k: usize, n: usize) {
    out_row.fill(T::zero());
    for (p, &apk) in a_row.iter().enumerate().take(k) {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o = *o + apk * bv;
        }
    }
}

/// y = x^T for row-major [r,c] -> [c,r].
pub fn transpose<T: Scalar>(x: &[T], out: &mut [T], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
}

/// Row-wise softmax with max-subtraction; returns nothing, writes in place.
pub fn softmax_rows_inplace<T: Scalar>(x: &mut [T], rows: usize, cols: usize) {
    for row in x.chunks_mut(cols).take(rows) {
        let mut max = T::neg_infinity();
        for &v in row.iter() {
            max = max.max(v);
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// tanh-form gelu and its derivative.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent naive triple-loop product used as the matmul oracle.
    fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        matmul_seq(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_dot_product() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut out = [0.0f64; 1];
        matmul_seq(&a, &b, &mut out, 1, 2, 1);
        assert_eq!(out[0], 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle_exactly_in_f64() {
        // Fixed pseudo-random 3x4 by 4x2; same f64 add/mul order per output.
        let a: Vec<f64> = (0..12).map(|i| ((i * 37 + 11) % 17) as f64 / 7.0 - 1.0).collect();
        let b: Vec<f64> = (0..8).map(|i| ((i * 53 + 5) % 19) as f64 / 9.0 - 1.0).collect();
        let mut got = vec![0.0; 6];
        matmul_seq(&a, &b, &mut got, 3, 4, 2);
        let want = matmul_naive(&a, &b, 3, 4, 2);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
    }

    #[test]
    fn threaded_matmul_bit_identical_to_sequential() {
        let (m, k, n) = (64, 48, 80);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut seq = vec![0.0f32; m * n];
        let mut par = vec![0.0f32; m * n];
        matmul_seq(&a, &b, &mut seq, m, k, n);
        matmul_threaded(&a, &b, &mut par, m, k, n);
        assert_eq!(seq, par);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for i in -20..=20 {
            let x = i as f64 * 0.25;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_derivative(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
