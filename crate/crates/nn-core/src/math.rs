//! Scalar kernels shared by the layer implementations.
//!
//! All reductions accumulate in `f64` and are evaluated in a fixed order so
//! results are bit-identical across runs. The unrolled accumulators below let
//! the compiler vectorize without changing that order.

/// Dot product of two equal-length `f32` slices, accumulated in `f64`.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc0 = 0.0f64;
    let mut acc1 = 0.0f64;
    let mut acc2 = 0.0f64;
    let mut acc3 = 0.0f64;
    let mut acc4 = 0.0f64;
    let mut acc5 = 0.0f64;
    let mut acc6 = 0.0f64;
    let mut acc7 = 0.0f64;
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let i = 8 * k;
        acc0 += a[i] as f64 * b[i] as f64;
        acc1 += a[i + 1] as f64 * b[i + 1] as f64;
        acc2 += a[i + 2] as f64 * b[i + 2] as f64;
        acc3 += a[i + 3] as f64 * b[i + 3] as f64;
        acc4 += a[i + 4] as f64 * b[i + 4] as f64;
        acc5 += a[i + 5] as f64 * b[i + 5] as f64;
        acc6 += a[i + 6] as f64 * b[i + 6] as f64;
        acc7 += a[i + 7] as f64 * b[i + 7] as f64;
    }
    let mut tail = 0.0f64;
    for i in 8 * chunks..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (((acc0 + acc1) + (acc2 + acc3)) + ((acc4 + acc5) + (acc6 + acc7))) + tail
}

/// `out[i] += c * v[i]` with `f64` accumulators.
#[inline]
pub fn axpy_f64(out: &mut [f64], c: f64, v: &[f32]) {
    debug_assert_eq!(out.len(), v.len());
    for (o, &x) in out.iter_mut().zip(v) {
        *o += c * x as f64;
    }
}

/// Sum of an `f32` slice in `f64`, fixed order.
#[inline]
pub fn sum_f64(v: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for &x in v {
        s += x as f64;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f32> = (0..37).map(|i| (i as f32) * 0.25 - 3.0).collect();
        let b: Vec<f32> = (0..37).map(|i| 1.5 - (i as f32) * 0.125).collect();
        let naive: f64 = a
            .iter()
            .zip(&b)
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        assert!((dot_f64(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn dot_is_reproducible() {
        let a = vec![0.1f32; 1000];
        let b = vec![0.3f32; 1000];
        assert_eq!(dot_f64(&a, &b).to_bits(), dot_f64(&a, &b).to_bits());
    }
}
