use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::Vec3;

/// Dense row-major 2-D array of `f64`. Scalars are `1 × 1`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::from_vec(1, n, data)
    }

    pub fn from_vec3s(v: &[Vec3]) -> Self {
        let mut data = Vec::with_capacity(v.len() * 3);
        for p in v {
            data.extend_from_slice(p);
        }
        Tensor::from_vec(v.len(), 3, data)
    }

    pub fn to_vec3s(&self) -> Vec<Vec3> {
        assert_eq!(self.cols, 3, "expected an N x 3 tensor");
        self.data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 × 1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `C = alpha · op(A) · op(B) + beta · C` for row-major operands, where
/// `op(A)` is `m × k` and `op(B)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the extents described by the strides,
    // checked above in debug builds and by construction in every caller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out = x · w + bias` for row-major `x` (`m × k`) and `w` (`k × n`), with
/// `bias` broadcast over rows. Forward-only; register-blocked so the inner
/// loops vectorize over output columns.
#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_rows(m: usize, k: usize, n: usize, x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
    assert!(x.len() == m * k && w.len() == k * n && bias.len() == n && out.len() == m * n);
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime.
            unsafe { wide::affine_rows_512(m, k, n, x, w, bias, out) };
            return;
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            unsafe { wide::affine_rows_256(m, k, n, x, w, bias, out) };
            return;
        }
    }
    affine_rows_blocked::<4, 8>(m, k, n, x, w, bias, out, |a, b, c| a * b + c);
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
mod wide {
    #[target_feature(enable = "avx512f,fma")]
    pub(super) unsafe fn affine_rows_512(m: usize, k: usize, n: usize, x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
        super::affine_rows_blocked::<4, 32>(m, k, n, x, w, bias, out, f64::mul_add)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn affine_rows_256(m: usize, k: usize, n: usize, x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
        super::affine_rows_blocked::<3, 16>(m, k, n, x, w, bias, out, f64::mul_add)
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn affine_rows_blocked<const R: usize, const C: usize>(
    m: usize,
    k: usize,
    n: usize,
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    out: &mut [f64],
    fma: impl Fn(f64, f64, f64) -> f64 + Copy,
) {
    // Columns past the last full 8-wide tile go through a zero-padded copy.
    let full = n - n % 8;
    let tail = n - full;
    let mut w_tail = Vec::new();
    let mut b_tail = [0.0; 8];
    if tail > 0 {
        w_tail = vec![0.0; k * 8];
        for (p, dst) in w_tail.chunks_exact_mut(8).enumerate() {
            dst[..tail].copy_from_slice(&w[p * n + full..(p + 1) * n]);
        }
        b_tail[..tail].copy_from_slice(&bias[full..]);
    }
    let mut i = 0;
    while i < m {
        if i + R <= m {
            let rows: [&[f64]; R] = core::array::from_fn(|r| &x[(i + r) * k..(i + r + 1) * k]);
            affine_row_block::<R, C>(&rows, i, n, full, w, bias, &w_tail, &b_tail, out, fma);
            i += R;
        } else {
            let rows = [&x[i * k..(i + 1) * k]];
            affine_row_block::<1, C>(&rows, i, n, full, w, bias, &w_tail, &b_tail, out, fma);
            i += 1;
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn affine_row_block<const R: usize, const C: usize>(
    rows: &[&[f64]; R],
    i0: usize,
    n: usize,
    full: usize,
    w: &[f64],
    bias: &[f64],
    w_tail: &[f64],
    b_tail: &[f64; 8],
    out: &mut [f64],
    fma: impl Fn(f64, f64, f64) -> f64 + Copy,
) {
    let mut j = 0;
    while j + C <= full {
        let acc = affine_tile::<R, C>(rows, w, n, j, bias[j..j + C].try_into().unwrap(), fma);
        store_tile(&acc, out, n, i0, j, C);
        j += C;
    }
    while j < full {
        let acc = affine_tile::<R, 8>(rows, w, n, j, bias[j..j + 8].try_into().unwrap(), fma);
        store_tile(&acc, out, n, i0, j, 8);
        j += 8;
    }
    if full < n {
        let acc = affine_tile::<R, 8>(rows, w_tail, 8, 0, b_tail, fma);
        store_tile(&acc, out, n, i0, full, n - full);
    }
}

/// `R × C` block of `rows · w[:, j0..j0 + C] + bias`, `w` having row stride `stride`.
#[inline(always)]
fn affine_tile<const R: usize, const C: usize>(
    rows: &[&[f64]; R],
    w: &[f64],
    stride: usize,
    j0: usize,
    bias: &[f64; C],
    fma: impl Fn(f64, f64, f64) -> f64 + Copy,
) -> [[f64; C]; R] {
    let mut acc = [*bias; R];
    for (p, wp) in w.chunks_exact(stride).take(rows[0].len()).enumerate() {
        let wp: &[f64; C] = wp[j0..j0 + C].try_into().unwrap();
        for r in 0..R {
            let xv = rows[r][p];
            for c in 0..C {
                acc[r][c] = fma(xv, wp[c], acc[r][c]);
            }
        }
    }
    acc
}

#[inline(always)]
fn store_tile<const R: usize, const C: usize>(acc: &[[f64; C]; R], out: &mut [f64], n: usize, i0: usize, j0: usize, width: usize) {
    for (r, row) in acc.iter().enumerate() {
        out[(i0 + r) * n + j0..(i0 + r) * n + j0 + width].copy_from_slice(&row[..width]);
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = b[j] + (0..k).map(|p| x[i * k + p] * w[p * n + j]).sum::<f64>();
            }
        }
        out
    }

    #[test]
    fn affine_rows_matches_naive_product() {
        for (m, k, n) in [(1, 1, 1), (7, 5, 3), (9, 13, 80), (5, 3, 9), (11, 17, 41), (4, 2, 64), (6, 96, 9)] {
            let x: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
            let w: Vec<f64> = (0..k * n).map(|i| ((i * 53 % 97) as f64) / 48.0 - 1.0).collect();
            let b: Vec<f64> = (0..n).map(|i| i as f64 * 0.25 - 1.0).collect();
            let want = naive(m, k, n, &x, &w, &b);
            let mut got = vec![f64::NAN; m * n];
            affine_rows(m, k, n, &x, &w, &b, &mut got);
            let mut portable = vec![f64::NAN; m * n];
            affine_rows_blocked::<4, 8>(m, k, n, &x, &w, &b, &mut portable, |a, b, c| a * b + c);
            for ((g, p), e) in got.iter().zip(&portable).zip(&want) {
                assert!((g - e).abs() <= 1e-12 * (1.0 + e.abs()), "{m}x{k}x{n}: {g} vs {e}");
                assert!((p - e).abs() <= 1e-12 * (1.0 + e.abs()), "{m}x{k}x{n}: {p} vs {e}");
            }
        }
    }
}
