//! Dense f32 kernels shared by the tape, the LSTM source, and evaluation.
//!
//! All kernels are bit-deterministic: accumulation order per output element is
//! fixed, and parallelism (rayon, over independent output rows) never changes
//! results regardless of thread count.

use rayon::prelude::*;

/// Below this many multiply-adds a kernel stays serial.
const PAR_THRESHOLD: usize = 1 << 16;

/// Fixed-order dot product with 16 independent accumulator lanes.
#[inline]
pub fn dot(x: &[f32], y: &[f32]) -> f32 {
    debug_assert_eq!(x.len(), y.len());
    const LANES: usize = 16;
    let chunks = x.len() / LANES;
    let mut acc = [0f32; LANES];
    for c in 0..chunks {
        let xs = &x[c * LANES..(c + 1) * LANES];
        let ys = &y[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += xs[l] * ys[l];
        }
    }
    // Pairwise tree reduction of the lanes.
    let mut width = LANES / 2;
    while width > 0 {
        for l in 0..width {
            acc[l] += acc[l + width];
        }
        width /= 2;
    }
    let mut s = acc[0];
    for i in chunks * LANES..x.len() {
        s += x[i] * y[i];
    }
    s
}

#[inline]
fn axpy(out: &mut [f32], a: f32, x: &[f32]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// One output row of C = A B: accumulate four B rows per pass over the
/// output row, so the C-row load/store traffic amortizes over 8 flops.
#[inline]
fn nn_row(orow: &mut [f32], arow: &[f32], b: &[f32], n: usize) {
    let k = arow.len();
    let mut kk = 0;
    while kk + 4 <= k {
        let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
        let (b0, rest) = b[kk * n..(kk + 4) * n].split_at(n);
        let (b1, rest) = rest.split_at(n);
        let (b2, b3) = rest.split_at(n);
        for ((((o, &x0), &x1), &x2), &x3) in
            orow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
        {
            *o += (a0 * x0 + a1 * x1) + (a2 * x2 + a3 * x3);
        }
        kk += 4;
    }
    while kk < k {
        axpy(orow, arow[kk], &b[kk * n..(kk + 1) * n]);
        kk += 1;
    }
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0f32; m * n];
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(orow, arow)| nn_row(orow, arow, b, n));
    } else {
        for (orow, arow) in out.chunks_mut(n).zip(a.chunks(k)) {
            nn_row(orow, arow, b, n);
        }
    }
    out
}

/// C[m,n] = A[m,k] * B[n,k]^T. For all but tiny problems B is transposed
/// once (O(nk) traffic) so the accumulation runs through the fast NN path.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    if m * k * n >= PAR_THRESHOLD {
        let mut bt = vec![0f32; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        return matmul(a, &bt, m, k, n);
    }
    let mut out = vec![0f32; m * n];
    for (orow, arow) in out.chunks_mut(n).zip(a.chunks(k)) {
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0f32; k * n];
    // Each worker owns a contiguous band of output rows and scans all of B,
    // four B rows per pass.
    let band = |pstart: usize, orows: &mut [f32]| {
        let pcount = orows.len() / n;
        let mut i = 0;
        while i + 4 <= m {
            let b0 = &b[i * n..(i + 1) * n];
            let b1 = &b[(i + 1) * n..(i + 2) * n];
            let b2 = &b[(i + 2) * n..(i + 3) * n];
            let b3 = &b[(i + 3) * n..(i + 4) * n];
            for p in 0..pcount {
                let col = pstart + p;
                let (a0, a1, a2, a3) = (
                    a[i * k + col],
                    a[(i + 1) * k + col],
                    a[(i + 2) * k + col],
                    a[(i + 3) * k + col],
                );
                let orow = &mut orows[p * n..(p + 1) * n];
                for ((((o, &x0), &x1), &x2), &x3) in
                    orow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
                {
                    *o += (a0 * x0 + a1 * x1) + (a2 * x2 + a3 * x3);
                }
            }
            i += 4;
        }
        while i < m {
            let brow = &b[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            for p in 0..pcount {
                axpy(&mut orows[p * n..(p + 1) * n], arow[pstart + p], brow);
            }
            i += 1;
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        let chunk_rows = (k / rayon::current_num_threads().max(1)).max(1);
        out.par_chunks_mut(chunk_rows * n)
            .enumerate()
            .for_each(|(c, orows)| band(c * chunk_rows, orows));
    } else {
        band(0, &mut out);
    }
    out
}

/// Numerically stable softmax over each row, in place. When `causal` is set
/// the matrix must be square and entries above the diagonal get probability 0.
pub fn softmax_rows(x: &mut [f32], rows: usize, cols: usize, causal: bool) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let limit = if causal { r + 1 } else { cols };
        let mut max = f32::NEG_INFINITY;
        for &v in &row[..limit] {
            max = max.max(v);
        }
        let mut sum = 0f32;
        for v in row[..limit].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row[..limit].iter_mut() {
            *v *= inv;
        }
        for v in row[limit..].iter_mut() {
            *v = 0.0;
        }
    }
}

/// -log2 softmax(logits)[target], computed in f64 so that exact uniform
/// logits score exactly 8 bits on a 256-token alphabet.
pub fn bits_for_target(logits: &[f32], target: usize) -> f64 {
    let mut max = f32::NEG_INFINITY;
    for &v in logits {
        max = max.max(v);
    }
    let max = f64::from(max);
    let mut sum = 0f64;
    for &v in logits {
        sum += (f64::from(v) - max).exp();
    }
    sum.log2() + (max - f64::from(logits[target])) * std::f64::consts::LOG2_E
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0f64; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += f64::from(a[i * k + p]) * f64::from(b[p * n + j]);
                }
            }
        }
        c.into_iter().map(|v| v as f32).collect()
    }

    fn rand_vec(r: &mut StreamRng, n: usize) -> Vec<f32> {
        (0..n).map(|_| r.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut r = StreamRng::new(1).stream("mm");
        for &(m, k, n) in &[(3usize, 4usize, 5usize), (17, 9, 13), (1, 8, 1)] {
            let a = rand_vec(&mut r, m * k);
            let b = rand_vec(&mut r, k * n);
            let c = matmul(&a, &b, m, k, n);
            let want = naive_matmul(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-4, "{x} vs {y}");
            }
            // A * B == (B^T row-major) used through the NT kernel
            let mut bt = vec![0f32; k * n];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let c2 = matmul_nt(&a, &bt, m, k, n);
            for (x, y) in c2.iter().zip(&want) {
                assert!((x - y).abs() < 1e-4);
            }
            // A^T^T * B through the TN kernel
            let mut at = vec![0f32; m * k];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let c3 = matmul_tn(&at, &b, k, m, n);
            for (x, y) in c3.iter().zip(&want) {
                assert!((x - y).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn identity_matmul_is_identity() {
        let mut r = StreamRng::new(2).stream("id");
        let a = rand_vec(&mut r, 9);
        let mut eye = vec![0f32; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        assert_eq!(matmul(&eye, &a, 3, 3, 3), a);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask() {
        let mut x = vec![0.3f32, -1.0, 2.0, 0.0, 0.5, 1.5, -2.0, 0.1, 0.9];
        softmax_rows(&mut x, 3, 3, true);
        assert_eq!(x[1], 0.0);
        assert_eq!(x[2], 0.0);
        assert_eq!(x[5], 0.0);
        assert_eq!(x[0], 1.0);
        for r in 0..3 {
            let s: f32 = x[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
