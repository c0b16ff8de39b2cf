//! Plain-slice numeric kernels. All matrix kernels accumulate into `out`.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out[m×n] += a[m×k] · b[k×n]
///
/// Every output element accumulates its products in increasing `p` order
/// starting from its previous value, whichever code path runs, so results
/// are bitwise identical with and without wide vector units.
pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: the CPU supports AVX-512F, checked just above.
        unsafe { matmul_nn_avx512(a, b, out, m, k, n) };
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { matmul_nn_avx2(a, b, out, m, k, n) };
        return;
    }
    matmul_nn_body(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_nn_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_nn_body(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn matmul_nn_avx512(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_nn_body(a, b, out, m, k, n);
}

const ROWS: usize = 4;
const COLS: usize = 8;

#[inline(always)]
fn matmul_nn_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let full_cols = n - n % COLS;
    let mut i = 0;
    while i + ROWS <= m {
        let a_rows: [&[f64]; ROWS] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        let mut j = 0;
        while j < full_cols {
            let mut acc = [[0.0f64; COLS]; ROWS];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + COLS]);
            }
            for p in 0..k {
                let b_blk: &[f64; COLS] = b[p * n + j..p * n + j + COLS].try_into().expect("block width");
                for r in 0..ROWS {
                    let av = a_rows[r][p];
                    for c in 0..COLS {
                        acc[r][c] += av * b_blk[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + COLS].copy_from_slice(row);
            }
            j += COLS;
        }
        if full_cols < n {
            for r in 0..ROWS {
                let out_row = &mut out[(i + r) * n + full_cols..(i + r + 1) * n];
                for (p, &av) in a_rows[r].iter().enumerate() {
                    axpy(av, &b[p * n + full_cols..(p + 1) * n], out_row);
                }
            }
        }
        i += ROWS;
    }
    for i in i..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], out_row);
        }
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for (i, row) in x.chunks_exact(cols).take(rows).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j * rows + i] = v;
        }
    }
    t
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_nn(a, &transpose(b, n, k), out, m, k, n);
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    matmul_nn(&transpose(a, k, m), b, out, m, k, n);
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Correctly rounded sum of `values` (Shewchuk partials, round-half-even).
///
/// The result depends only on the multiset of inputs, never on their order.
/// `scratch` is reused across calls to avoid allocation.
pub fn exact_sum(values: &[f64], scratch: &mut Vec<f64>) -> f64 {
    let partials = scratch;
    partials.clear();
    for &v in values {
        let mut x = v;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(&top) = partials.last() else {
        return 0.0;
    };
    let mut n = partials.len() - 1;
    let mut hi = top;
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // a remainder of exactly half an ulp in the same direction as the next
    // partial means the true sum lies past the midpoint
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}
