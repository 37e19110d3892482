//! Dense matrix kernels on row-major slices. All accumulate into `c`.

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn mm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut i = 0;
    while i + 4 <= m {
        row_block::<4>(i, k, n, a, b, c);
        i += 4;
    }
    while i < m {
        row_block::<1>(i, k, n, a, b, c);
        i += 1;
    }
}

fn row_block<const MR: usize>(i: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut j = 0;
    while j + 8 <= n {
        tile::<MR, 8>(i, j, k, n, a, b, c);
        j += 8;
    }
    while j + 4 <= n {
        tile::<MR, 4>(i, j, k, n, a, b, c);
        j += 4;
    }
    while j < n {
        tile::<MR, 1>(i, j, k, n, a, b, c);
        j += 1;
    }
}

#[inline(always)]
fn tile<const MR: usize, const NR: usize>(
    i: usize,
    j: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
) {
    let arows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    let mut acc = [[0.0; NR]; MR];
    for p in 0..k {
        let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
        for r in 0..MR {
            let av = arows[r][p];
            for q in 0..NR {
                acc[r][q] += av * bv[q];
            }
        }
    }
    for r in 0..MR {
        let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
        for q in 0..NR {
            crow[q] += acc[r][q];
        }
    }
}

fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for (col, &v) in x[r * cols..(r + 1) * cols].iter().enumerate() {
            out[col * rows + r] = v;
        }
    }
    out
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub fn mm_abt_acc(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 1 {
        for p in 0..k {
            c[p] += dot(&a[..n], &b[p * n..(p + 1) * n]);
        }
        return;
    }
    let bt = transpose(k, n, &b[..k * n]);
    mm_acc(m, n, k, a, &bt, c);
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn mm_atb_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let at = transpose(m, k, &a[..m * k]);
    mm_acc(k, m, n, &at, b, c);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}
