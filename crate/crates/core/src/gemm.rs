//! Small dense matmul kernels behind the convolution and linear layers.
//! All loops accumulate in a fixed order so results are bit-reproducible
//! regardless of thread count; rayon is only used over disjoint output
//! regions.

use crate::tensor::Scalar;

/// C[m,n] += A[m,k] * B[k,n], row-major.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            axpy(aip, brow, crow);
        }
    }
}

/// C[m,n] += A[m,l] * B[n,l]^T — rows of A dotted with rows of B.
pub fn gemm_nt<T: Scalar>(m: usize, l: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * l);
    debug_assert_eq!(b.len(), n * l);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * l..(i + 1) * l];
        for j in 0..n {
            let brow = &b[j * l..(j + 1) * l];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n].
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            axpy(aip, brow, &mut c[p * n..(p + 1) * n]);
        }
    }
}

// ---- row-parallel blocked kernels ----
//
// The convolution path stores the im2col matrix row-per-output-position
// (`[positions, C*kh*kw]`), so the small kernel/weight matrix stays resident
// in L1 while rayon splits disjoint row chunks. Each output element is still
// produced by one task in a fixed order, so results do not depend on the
// worker count.

use rayon::prelude::*;

const ROW_CHUNK: usize = 64;

/// C[m,n] += A[m,l] * B[n,l]^T, parallel over row chunks of C.
pub fn matmul_nt<T: Scalar>(m: usize, l: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * l);
    debug_assert_eq!(b.len(), n * l);
    debug_assert_eq!(c.len(), m * n);
    c.par_chunks_mut(ROW_CHUNK * n)
        .zip(a.par_chunks(ROW_CHUNK * l))
        .for_each(|(cb, ab)| {
            let rows = cb.len() / n;
            for r in 0..rows {
                let arow = &ab[r * l..(r + 1) * l];
                let crow = &mut cb[r * n..(r + 1) * n];
                let mut j = 0;
                while j + 4 <= n {
                    let (s0, s1, s2, s3) = dot4(
                        arow,
                        &b[j * l..(j + 1) * l],
                        &b[(j + 1) * l..(j + 2) * l],
                        &b[(j + 2) * l..(j + 3) * l],
                        &b[(j + 3) * l..(j + 4) * l],
                    );
                    crow[j] += s0;
                    crow[j + 1] += s1;
                    crow[j + 2] += s2;
                    crow[j + 3] += s3;
                    j += 4;
                }
                while j < n {
                    crow[j] += dot(arow, &b[j * l..(j + 1) * l]);
                    j += 1;
                }
            }
        });
}

/// C[m,n] += A[m,l] * B[l,n], parallel over row chunks of C. `B` rows should
/// be small enough to live in cache (true for every kernel/weight here).
pub fn matmul_nn<T: Scalar>(m: usize, l: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * l);
    debug_assert_eq!(b.len(), l * n);
    debug_assert_eq!(c.len(), m * n);
    c.par_chunks_mut(ROW_CHUNK * n)
        .zip(a.par_chunks(ROW_CHUNK * l))
        .for_each(|(cb, ab)| {
            let rows = cb.len() / n;
            for r in 0..rows {
                let arow = &ab[r * l..(r + 1) * l];
                let crow = &mut cb[r * n..(r + 1) * n];
                for (k, &aik) in arow.iter().enumerate() {
                    if aik != T::zero() {
                        axpy(aik, &b[k * n..(k + 1) * n], crow);
                    }
                }
            }
        });
}

/// C[l,n] += A[m,l]^T * B[m,n]. Parallel partials over fixed row chunks,
/// summed in chunk order. `l*n` must be small (it is: filter tensors).
pub fn matmul_tn_acc<T: Scalar>(m: usize, l: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * l);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), l * n);
    const ACC_CHUNK: usize = 512;
    let partials: Vec<Vec<T>> = a
        .par_chunks(ACC_CHUNK * l)
        .zip(b.par_chunks(ACC_CHUNK * n))
        .map(|(ab, bb)| {
            let rows = ab.len() / l;
            let mut part = vec![T::zero(); l * n];
            for r in 0..rows {
                let arow = &ab[r * l..(r + 1) * l];
                let brow = &bb[r * n..(r + 1) * n];
                for (k, &aik) in arow.iter().enumerate() {
                    if aik != T::zero() {
                        axpy(aik, brow, &mut part[k * n..(k + 1) * n]);
                    }
                }
            }
            part
        })
        .collect();
    for part in &partials {
        axpy(T::one(), part, c);
    }
}

/// Four simultaneous dot products sharing one pass over `a`.
#[inline]
fn dot4<T: Scalar>(a: &[T], b0: &[T], b1: &[T], b2: &[T], b3: &[T]) -> (T, T, T, T) {
    const W: usize = 8;
    let mut acc = [[T::zero(); W]; 4];
    let chunks = a.len() / W;
    for ci in 0..chunks {
        let base = ci * W;
        let av = &a[base..base + W];
        let bs = [&b0[base..base + W], &b1[base..base + W], &b2[base..base + W], &b3[base..base + W]];
        for (accj, bj) in acc.iter_mut().zip(bs) {
            for t in 0..W {
                accj[t] += av[t] * bj[t];
            }
        }
    }
    let mut out = [T::zero(); 4];
    for (o, accj) in out.iter_mut().zip(&acc) {
        for t in 0..W {
            *o += accj[t];
        }
    }
    for i in chunks * W..a.len() {
        out[0] += a[i] * b0[i];
        out[1] += a[i] * b1[i];
        out[2] += a[i] * b2[i];
        out[3] += a[i] * b3[i];
    }
    (out[0], out[1], out[2], out[3])
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

/// Dot product with fixed 8-lane partial sums; the split order is part of
/// the deterministic contract.
#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xb = &x[c * 8..c * 8 + 8];
        let yb = &y[c * 8..c * 8 + 8];
        for lane in 0..8 {
            acc[lane] += xb[lane] * yb[lane];
        }
    }
    let mut total = T::zero();
    for lane in 0..8 {
        total += acc[lane];
    }
    for i in chunks * 8..x.len() {
        total += x[i] * y[i];
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn nn_nt_tn_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.17 - 0.8).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // nt: A[m,k] * (B^T)[k,n] with B stored as [n,k].
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // tn: (A^T)^T * B via A stored as [k,m] transposed.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm_tn(k, m, n, &at, &b, &mut c3);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_kernels_agree_with_naive() {
        let (m, l, n) = (137, 23, 11);
        let a: Vec<f64> = (0..m * l).map(|i| ((i * 29) % 83) as f64 * 0.07 - 2.0).collect();
        let bt: Vec<f64> = (0..n * l).map(|i| ((i * 31) % 71) as f64 * 0.05 - 1.5).collect();
        // B in [l,n] layout for naive/nn.
        let mut b = vec![0.0; l * n];
        for j in 0..n {
            for k in 0..l {
                b[k * n + j] = bt[j * l + k];
            }
        }
        let want = naive(m, l, n, &a, &b);

        let mut c = vec![0.0; m * n];
        matmul_nt(m, l, n, &a, &bt, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }

        let mut c = vec![0.0; m * n];
        matmul_nn(m, l, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }

        // tn: C[l,n] = A^T B with A [m,l], B [m,n].
        let bm: Vec<f64> = (0..m * n).map(|i| ((i * 13) % 59) as f64 * 0.11 - 3.0).collect();
        let mut at = vec![0.0; l * m];
        for r in 0..m {
            for k in 0..l {
                at[k * m + r] = a[r * l + k];
            }
        }
        let want = naive(l, m, n, &at, &bm);
        let mut c = vec![0.0; l * n];
        matmul_tn_acc(m, l, n, &a, &bm, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn dot_matches_sequential_sum() {
        let x: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..37).map(|i| (i as f64).cos()).collect();
        let want: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((dot(&x, &y) - want).abs() < 1e-12);
    }
}
