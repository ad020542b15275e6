//! Dense f32 kernels shared by the featurizer, classifier and neighbor index.
//!
//! Every kernel accumulates into sixteen fixed lanes and reduces them in a
//! fixed order, so the AVX2 and portable paths produce bit-identical
//! results. No fused multiply-add is used for the same reason.

use std::sync::OnceLock;

const LANES: usize = 16;

#[inline(always)]
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0f32; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for j in 0..LANES {
            acc[j] += xa[j] * xb[j];
        }
    }
    for (j, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[j] += x * y;
    }
    reduce(&acc)
}

#[inline(always)]
fn reduce(acc: &[f32; LANES]) -> f32 {
    let mut half = [0f32; 8];
    for j in 0..8 {
        half[j] = acc[j] + acc[j + 8];
    }
    let q = [half[0] + half[4], half[1] + half[5], half[2] + half[6], half[3] + half[7]];
    (q[0] + q[2]) + (q[1] + q[3])
}

#[inline(always)]
fn axpy_lanes(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline(always)]
fn dot_rows_lanes(matrix: &[f32], dim: usize, query: &[f32], out: &mut [f32]) {
    for (row, o) in matrix.chunks_exact(dim).zip(out.iter_mut()) {
        *o = dot_lanes(row, query);
    }
}

#[cfg(target_arch = "x86_64")]
mod wide {
    //! Explicit AVX2 versions. Lanes 0..8 live in one register and 8..16 in
    //! another; products and sums happen in the same order as the portable
    //! code, so the results match bit for bit.
    use super::{reduce, LANES};
    use std::arch::x86_64::*;

    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn spill(lo: __m256, hi: __m256) -> [f32; LANES] {
        let mut acc = [0f32; LANES];
        _mm256_storeu_ps(acc.as_mut_ptr(), lo);
        _mm256_storeu_ps(acc.as_mut_ptr().add(8), hi);
        acc
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn dot(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len().min(b.len());
        let full = n - n % LANES;
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut lo = _mm256_setzero_ps();
        let mut hi = _mm256_setzero_ps();
        let mut c = 0;
        while c < full {
            lo = _mm256_add_ps(lo, _mm256_mul_ps(_mm256_loadu_ps(pa.add(c)), _mm256_loadu_ps(pb.add(c))));
            hi = _mm256_add_ps(hi, _mm256_mul_ps(_mm256_loadu_ps(pa.add(c + 8)), _mm256_loadu_ps(pb.add(c + 8))));
            c += LANES;
        }
        let mut acc = spill(lo, hi);
        for j in 0..n - full {
            acc[j] += a[full + j] * b[full + j];
        }
        reduce(&acc)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
        let n = x.len().min(y.len());
        let full = n - n % 8;
        let va = _mm256_set1_ps(alpha);
        let (px, py) = (x.as_ptr(), y.as_mut_ptr());
        let mut c = 0;
        while c < full {
            let r = _mm256_add_ps(_mm256_loadu_ps(py.add(c)), _mm256_mul_ps(va, _mm256_loadu_ps(px.add(c))));
            _mm256_storeu_ps(py.add(c), r);
            c += 8;
        }
        for i in full..n {
            y[i] += alpha * x[i];
        }
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn dot_rows(matrix: &[f32], dim: usize, query: &[f32], out: &mut [f32]) {
        let n = dim.min(query.len());
        let full = n - n % LANES;
        let pq = query.as_ptr();
        let rows = out.len().min(matrix.len() / dim.max(1));
        let mut r = 0;
        while r + 4 <= rows {
            let p = matrix.as_ptr().add(r * dim);
            let mut acc = [_mm256_setzero_ps(); 8];
            let mut c = 0;
            while c < full {
                let q0 = _mm256_loadu_ps(pq.add(c));
                let q1 = _mm256_loadu_ps(pq.add(c + 8));
                for k in 0..4 {
                    let pr = p.add(k * dim + c);
                    acc[2 * k] = _mm256_add_ps(acc[2 * k], _mm256_mul_ps(_mm256_loadu_ps(pr), q0));
                    acc[2 * k + 1] = _mm256_add_ps(acc[2 * k + 1], _mm256_mul_ps(_mm256_loadu_ps(pr.add(8)), q1));
                }
                c += LANES;
            }
            for k in 0..4 {
                let mut lanes = spill(acc[2 * k], acc[2 * k + 1]);
                let row = &matrix[(r + k) * dim..(r + k + 1) * dim];
                for j in 0..n - full {
                    lanes[j] += row[full + j] * query[full + j];
                }
                out[r + k] = reduce(&lanes);
            }
            r += 4;
        }
        while r < rows {
            out[r] = dot(&matrix[r * dim..(r + 1) * dim], query);
            r += 1;
        }
    }
}

pub(crate) fn has_wide() -> bool {
    static WIDE: OnceLock<bool> = OnceLock::new();
    *WIDE.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            std::is_x86_feature_detected!("avx2")
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            false
        }
    })
}

/// Inner product over the common prefix of `a` and `b`.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    #[cfg(target_arch = "x86_64")]
    if has_wide() {
        // SAFETY: avx2 support was detected at runtime.
        return unsafe { wide::dot(a, b) };
    }
    dot_lanes(a, b)
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if has_wide() {
        // SAFETY: avx2 support was detected at runtime.
        return unsafe { wide::axpy(alpha, x, y) };
    }
    axpy_lanes(alpha, x, y)
}

/// Dot product of `query` against every `dim`-wide row of a row-major matrix.
pub fn dot_rows(matrix: &[f32], dim: usize, query: &[f32], out: &mut [f32]) {
    debug_assert_eq!(matrix.len(), dim * out.len());
    #[cfg(target_arch = "x86_64")]
    if has_wide() {
        // SAFETY: avx2 support was detected at runtime.
        return unsafe { wide::dot_rows(matrix, dim, query, out) };
    }
    dot_rows_lanes(matrix, dim, query, out)
}

/// Euclidean norm accumulated in f64.
pub fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Scales `v` to unit length in place. Returns `false` (leaving `v`
/// untouched) when the norm is zero or not finite.
pub fn normalize_in_place(v: &mut [f32]) -> bool {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / n) as f32;
    }
    true
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn wide_and_portable_paths_agree(
            v in proptest::collection::vec(-1.0f32..1.0, 0..300),
            rows in 0usize..7,
            alpha in -2.0f32..2.0,
        ) {
            let w: Vec<f32> = v.iter().rev().cloned().collect();
            let a = dot(&v, &w);
            prop_assert_eq!(a.to_bits(), dot_lanes(&v, &w).to_bits());
            let naive: f64 = v.iter().zip(&w).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
            prop_assert!((f64::from(a) - naive).abs() < 1e-4);

            let mut y1 = w.clone();
            let mut y2 = w.clone();
            axpy(alpha, &v, &mut y1);
            axpy_lanes(alpha, &v, &mut y2);
            prop_assert!(y1.iter().zip(&y2).all(|(p, q)| p.to_bits() == q.to_bits()));

            if !v.is_empty() {
                let m: Vec<f32> = (0..rows).flat_map(|r| v.iter().map(move |x| x * (r as f32 - 2.5))).collect();
                let mut o1 = vec![0f32; rows];
                let mut o2 = vec![0f32; rows];
                dot_rows(&m, v.len(), &w, &mut o1);
                dot_rows_lanes(&m, v.len(), &w, &mut o2);
                prop_assert!(o1.iter().zip(&o2).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
    }

    #[test]
    fn dot_rows_matches_dot() {
        let m: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin()).collect();
        let q: Vec<f32> = (0..20).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut out = vec![0.0; 3];
        dot_rows(&m, 20, &q, &mut out);
        for (r, o) in m.chunks(20).zip(&out) {
            assert_eq!(dot(r, &q).to_bits(), o.to_bits());
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
        assert!((sigmoid(-3.0) - 0.047_425_873_177_566_78).abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_zero() {
        let mut z = vec![0.0f32; 4];
        assert!(!normalize_in_place(&mut z));
        let mut v = vec![3.0f32, 4.0];
        assert!(normalize_in_place(&mut v));
        assert!((norm(&v) - 1.0).abs() < 1e-7);
    }
}
