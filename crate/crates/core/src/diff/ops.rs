//! Built-in tape operations.

use alloc::vec;
use alloc::vec::Vec;

use super::tape::{BackwardCtx, BackwardOp, Tape, Var};
use super::tensor::{affine_rows, gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Silu,
}

/// `ln 2` split so that `n · LN2_HI` is exact for the exponents in range.
const LN2_HI: f64 = f64::from_bits(0x3fe6_2e42_fee0_0000);
const LN2_LO: f64 = f64::from_bits(0x3dea_39ef_3579_3c76);
/// `1.5 · 2⁵²`: adding it rounds to an integer held in the low mantissa bits.
const SHIFTER: f64 = 6_755_399_441_055_744.0;
/// Taylor coefficients `1/k!` for `k = 12..=0`.
const EXP_POLY: [f64; 13] = [
    1.0 / 479_001_600.0,
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
    1.0,
    1.0,
];

/// `exp` without branches so slice loops vectorize. Relative error stays
/// near 1e-16; arguments are clamped to `[-708, 709]`, NaN propagates.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let x = x.clamp(-708.0, 709.0);
    let k = x * core::f64::consts::LOG2_E + SHIFTER;
    let n = k - SHIFTER;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = EXP_POLY[0];
    for c in &EXP_POLY[1..] {
        p = p * r + c;
    }
    let e = (k.to_bits() as i64).wrapping_sub(SHIFTER.to_bits() as i64);
    p * f64::from_bits((e + 1023).wrapping_shl(52) as u64)
}

/// The exponent cap keeps `σ` off the subnormal range for very negative `x`.
#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp((-x).min(700.0)))
}

#[inline(always)]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline(always)]
fn silu_loop(z: &mut [f64]) {
    for v in z {
        *v = silu(*v);
    }
}

#[inline(always)]
fn silu_backward_loop(g: &[f64], z: &[f64], out: &mut [f64]) {
    for ((o, gi), zi) in out.iter_mut().zip(g).zip(z) {
        *o = gi * silu_derivative(*zi);
    }
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
mod wide {
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn silu_loop(z: &mut [f64]) {
        super::silu_loop(z)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn silu_backward_loop(g: &[f64], z: &[f64], out: &mut [f64]) {
        super::silu_backward_loop(g, z, out)
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn silu_loop_512(z: &mut [f64]) {
        super::silu_loop(z)
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn silu_backward_loop_512(g: &[f64], z: &[f64], out: &mut [f64]) {
        super::silu_backward_loop(g, z, out)
    }

    pub(super) fn available_512() -> bool {
        std::is_x86_feature_detected!("avx512f")
    }

    pub(super) fn available() -> bool {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
}

/// Elementwise SiLU in place. Uses 512- or 256-bit vectors when the CPU has
/// them; results are identical either way since no operations are fused.
pub fn silu_in_place(z: &mut [f64]) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if wide::available_512() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { wide::silu_loop_512(z) };
        return;
    }
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if wide::available() {
        // SAFETY: as above.
        unsafe { wide::silu_loop(z) };
        return;
    }
    silu_loop(z);
}

/// `g ⊙ silu'(z)`.
pub fn silu_backward_slice(g: &[f64], z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if wide::available_512() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { wide::silu_backward_loop_512(g, z, &mut out) };
        return out;
    }
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if wide::available() {
        // SAFETY: as above.
        unsafe { wide::silu_backward_loop(g, z, &mut out) };
        return out;
    }
    silu_backward_loop(g, z, &mut out);
    out
}

/// `d/dx [x σ(x)] = σ(x) (1 + x (1 − σ(x)))`.
#[inline(always)]
pub fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

struct AddOp {
    a: Var,
    b: Var,
    b_scale: f64,
}

impl BackwardOp for AddOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, _out: &Tensor, g: &[f64]) {
        ctx.accumulate(self.a, g);
        if let Some(gb) = ctx.grad_mut(self.b) {
            for (d, x) in gb.iter_mut().zip(g) {
                *d += self.b_scale * x;
            }
        }
    }
}

struct ScaleOp {
    a: Var,
    s: f64,
}

impl BackwardOp for ScaleOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, _out: &Tensor, g: &[f64]) {
        if let Some(ga) = ctx.grad_mut(self.a) {
            for (d, x) in ga.iter_mut().zip(g) {
                *d += self.s * x;
            }
        }
    }
}

/// Identity-gradient op for ops whose output is `a` plus a constant.
struct PassOp {
    a: Var,
}

impl BackwardOp for PassOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, _out: &Tensor, g: &[f64]) {
        ctx.accumulate(self.a, g);
    }
}

struct ScaleRowsOp {
    a: Var,
    factors: Vec<f64>,
}

impl BackwardOp for ScaleRowsOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, g: &[f64]) {
        let cols = out.cols;
        if let Some(ga) = ctx.grad_mut(self.a) {
            for (r, f) in self.factors.iter().enumerate() {
                for c in 0..cols {
                    ga[r * cols + c] += f * g[r * cols + c];
                }
            }
        }
    }
}

struct ScaleColsOp {
    a: Var,
    factors: Vec<f64>,
}

impl BackwardOp for ScaleColsOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, g: &[f64]) {
        let cols = out.cols;
        if let Some(ga) = ctx.grad_mut(self.a) {
            for (i, (d, x)) in ga.iter_mut().zip(g).enumerate() {
                *d += self.factors[i % cols] * x;
            }
        }
    }
}

struct DenseOp {
    x: Var,
    w: Var,
    b: Var,
    activation: Activation,
    /// Pre-activations, kept only for non-linear layers.
    z: Vec<f64>,
}

impl BackwardOp for DenseOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, g: &[f64]) {
        let x = ctx.value(self.x);
        let w = ctx.value(self.w);
        let (m, k, n) = (x.rows, x.cols, out.cols);
        let dz: Vec<f64> = match self.activation {
            Activation::Identity => g.to_vec(),
            Activation::Silu => silu_backward_slice(g, &self.z),
        };
        if let Some(gw) = ctx.grad_mut(self.w) {
            // dW += Xᵀ dZ
            gemm(k, m, n, 1.0, &x.data, true, &dz, false, 1.0, gw);
        }
        if let Some(gb) = ctx.grad_mut(self.b) {
            for r in 0..m {
                for (c, d) in gb.iter_mut().enumerate() {
                    *d += dz[r * n + c];
                }
            }
        }
        if let Some(gx) = ctx.grad_mut(self.x) {
            // dX += dZ Wᵀ
            gemm(m, n, k, 1.0, &dz, false, &w.data, true, 1.0, gx);
        }
    }
}

struct MatMulOp {
    a: Var,
    b: Var,
}

impl BackwardOp for MatMulOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, g: &[f64]) {
        let a = ctx.value(self.a);
        let b = ctx.value(self.b);
        let (m, k, n) = (a.rows, a.cols, out.cols);
        if let Some(ga) = ctx.grad_mut(self.a) {
            gemm(m, n, k, 1.0, g, false, &b.data, true, 1.0, ga);
        }
        if let Some(gb) = ctx.grad_mut(self.b) {
            gemm(k, m, n, 1.0, &a.data, true, g, false, 1.0, gb);
        }
    }
}

struct TransposeOp {
    a: Var,
}

impl BackwardOp for TransposeOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, g: &[f64]) {
        // out is (c × r) for input (r × c)
        let (rows_out, cols_out) = (out.rows, out.cols);
        if let Some(ga) = ctx.grad_mut(self.a) {
            for i in 0..rows_out {
                for j in 0..cols_out {
                    ga[j * rows_out + i] += g[i * cols_out + j];
                }
            }
        }
    }
}

struct MeanRowsOp {
    a: Var,
    rows: usize,
}

impl BackwardOp for MeanRowsOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, g: &[f64]) {
        let cols = out.cols;
        let inv = 1.0 / self.rows as f64;
        if let Some(ga) = ctx.grad_mut(self.a) {
            for r in 0..self.rows {
                for c in 0..cols {
                    ga[r * cols + c] += g[c] * inv;
                }
            }
        }
    }
}

struct MaxRowsOp {
    a: Var,
    argmax: Vec<usize>,
}

impl BackwardOp for MaxRowsOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, g: &[f64]) {
        let cols = out.cols;
        if let Some(ga) = ctx.grad_mut(self.a) {
            for (c, &r) in self.argmax.iter().enumerate() {
                ga[r * cols + c] += g[c];
            }
        }
    }
}

struct SubRowOp {
    a: Var,
    row: Var,
}

impl BackwardOp for SubRowOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, g: &[f64]) {
        ctx.accumulate(self.a, g);
        let cols = out.cols;
        if let Some(gr) = ctx.grad_mut(self.row) {
            for r in 0..out.rows {
                for c in 0..cols {
                    gr[c] -= g[r * cols + c];
                }
            }
        }
    }
}

struct ConcatColsOp {
    parts: Vec<(Var, usize)>,
}

impl BackwardOp for ConcatColsOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, g: &[f64]) {
        let total = out.cols;
        let mut offset = 0;
        for &(v, w) in &self.parts {
            if let Some(gv) = ctx.grad_mut(v) {
                for r in 0..out.rows {
                    for c in 0..w {
                        gv[r * w + c] += g[r * total + offset + c];
                    }
                }
            }
            offset += w;
        }
    }
}

struct SliceColsOp {
    a: Var,
    start: usize,
    in_cols: usize,
}

impl BackwardOp for SliceColsOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, g: &[f64]) {
        let w = out.cols;
        if let Some(ga) = ctx.grad_mut(self.a) {
            for r in 0..out.rows {
                for c in 0..w {
                    ga[r * self.in_cols + self.start + c] += g[r * w + c];
                }
            }
        }
    }
}

struct Mat3RowsMulOp {
    a: Var,
    b: Var,
}

impl BackwardOp for Mat3RowsMulOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, g: &[f64]) {
        let a = ctx.value(self.a);
        let b = ctx.value(self.b);
        let rows = out.rows;
        if let Some(ga) = ctx.grad_mut(self.a) {
            // dA = G Bᵀ per row
            for e in 0..rows {
                let (gr, br) = (&g[9 * e..9 * e + 9], &b.data[9 * e..9 * e + 9]);
                for i in 0..3 {
                    for j in 0..3 {
                        let mut s = 0.0;
                        for k in 0..3 {
                            s += gr[3 * i + k] * br[3 * j + k];
                        }
                        ga[9 * e + 3 * i + j] += s;
                    }
                }
            }
        }
        if let Some(gb) = ctx.grad_mut(self.b) {
            // dB = Aᵀ G per row
            for e in 0..rows {
                let (gr, ar) = (&g[9 * e..9 * e + 9], &a.data[9 * e..9 * e + 9]);
                for i in 0..3 {
                    for j in 0..3 {
                        let mut s = 0.0;
                        for k in 0..3 {
                            s += ar[3 * k + i] * gr[3 * k + j];
                        }
                        gb[9 * e + 3 * i + j] += s;
                    }
                }
            }
        }
    }
}

struct SqErrMeanOp {
    a: Var,
    residual: Vec<f64>,
    rows: usize,
}

impl BackwardOp for SqErrMeanOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, _out: &Tensor, g: &[f64]) {
        let s = 2.0 * g[0] / self.rows as f64;
        if let Some(ga) = ctx.grad_mut(self.a) {
            for (d, r) in ga.iter_mut().zip(&self.residual) {
                *d += s * r;
            }
        }
    }
}

struct SumOp {
    a: Var,
}

impl BackwardOp for SumOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, _out: &Tensor, g: &[f64]) {
        if let Some(ga) = ctx.grad_mut(self.a) {
            for d in ga.iter_mut() {
                *d += g[0];
            }
        }
    }
}

struct MaskOp {
    a: Var,
    mask: Vec<bool>,
}

impl BackwardOp for MaskOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, _out: &Tensor, g: &[f64]) {
        if let Some(ga) = ctx.grad_mut(self.a) {
            for ((d, x), &m) in ga.iter_mut().zip(g).zip(&self.mask) {
                if !m {
                    *d += x;
                }
            }
        }
    }
}

struct ClampRowNormOp {
    a: Var,
    max_norm: f64,
    /// Norms of clamped rows; zero for rows passed through unchanged.
    clamped_norms: Vec<f64>,
}

impl BackwardOp for ClampRowNormOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, g: &[f64]) {
        let cols = out.cols;
        let a = ctx.value(self.a);
        if let Some(ga) = ctx.grad_mut(self.a) {
            for (r, &n) in self.clamped_norms.iter().enumerate() {
                let gr = &g[r * cols..(r + 1) * cols];
                let dst = &mut ga[r * cols..(r + 1) * cols];
                if n == 0.0 {
                    for (d, x) in dst.iter_mut().zip(gr) {
                        *d += x;
                    }
                } else {
                    // y = m a/|a|  →  dy = (m/|a|)(I − â âᵀ) da
                    let ar = a.row_slice(r);
                    let proj: f64 = ar.iter().zip(gr).map(|(x, y)| x * y).sum::<f64>() / (n * n);
                    let s = self.max_norm / n;
                    for c in 0..cols {
                        dst[c] += s * (gr[c] - ar[c] * proj);
                    }
                }
            }
        }
    }
}

fn assert_same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert!(
        a.shape() == b.shape(),
        "{what}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.add_scaled(a, b, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.add_scaled(a, b, -1.0)
    }

    /// `a + s · b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, s: f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same_shape(va, vb, "add");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + s * y).collect();
        let value = Tensor::from_vec(va.rows, va.cols, data);
        self.push_op(value, &[a, b], || AddOp { a, b, b_scale: s })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let value = Tensor::from_vec(va.rows, va.cols, va.data.iter().map(|x| x * s).collect());
        self.push_op(value, &[a], || ScaleOp { a, s })
    }

    /// `a + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let va = self.value(a);
        assert_same_shape(va, c, "add_const");
        let data = va.data.iter().zip(&c.data).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(va.rows, va.cols, data);
        self.push_op(value, &[a], || PassOp { a })
    }

    /// Adds the constant row `row` to every row of `a`.
    pub fn add_row_const(&mut self, a: Var, row: &[f64]) -> Var {
        let va = self.value(a);
        assert_eq!(va.cols, row.len(), "add_row_const width");
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + row[i % va.cols])
            .collect();
        let value = Tensor::from_vec(va.rows, va.cols, data);
        self.push_op(value, &[a], || PassOp { a })
    }

    /// Multiplies row `r` of `a` by `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows, factors.len(), "scale_rows length");
        let cols = va.cols;
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * factors[i / cols])
            .collect();
        let value = Tensor::from_vec(va.rows, cols, data);
        self.push_op(value, &[a], || ScaleRowsOp {
            a,
            factors: factors.to_vec(),
        })
    }

    /// Column-wise `(a − shift) · scale`, used for input standardization.
    pub fn affine_cols(&mut self, a: Var, shift: &[f64], scale: &[f64]) -> Var {
        let va = self.value(a);
        let cols = va.cols;
        assert!(shift.len() == cols && scale.len() == cols, "affine_cols width");
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| (x - shift[i % cols]) * scale[i % cols])
            .collect();
        let value = Tensor::from_vec(va.rows, cols, data);
        self.push_op(value, &[a], || ScaleColsOp {
            a,
            factors: scale.to_vec(),
        })
    }

    /// Fused dense layer `act(x W + b)` with `W: in × out`, `b: 1 × out`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, activation: Activation) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(vx.cols, vw.rows, "dense: input width vs weight rows");
        assert_eq!(vb.len(), vw.cols, "dense: bias width");
        let (m, k, n) = (vx.rows, vx.cols, vw.cols);
        let mut z = vec![0.0; m * n];
        affine_rows(m, k, n, &vx.data, &vw.data, &vb.data, &mut z);
        let (y, keep_z) = match activation {
            Activation::Identity => (z, Vec::new()),
            Activation::Silu if !self.any_requires_grad(&[x, w, b]) => {
                silu_in_place(&mut z);
                (z, Vec::new())
            }
            Activation::Silu => {
                let mut y = z.clone();
                silu_in_place(&mut y);
                (y, z)
            }
        };
        let value = Tensor::from_vec(m, n, y);
        self.push_op(value, &[x, w, b], || DenseOp {
            x,
            w,
            b,
            activation,
            z: keep_z,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols, vb.rows, "matmul inner dimension");
        let (m, k, n) = (va.rows, va.cols, vb.cols);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &va.data, false, &vb.data, false, 0.0, &mut out);
        self.push_op(Tensor::from_vec(m, n, out), &[a, b], || MatMulOp { a, b })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = va.shape();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data[i * c + j];
            }
        }
        self.push_op(Tensor::from_vec(c, r, out), &[a], || TransposeOp { a })
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape size");
        let value = Tensor::from_vec(rows, cols, va.data.clone());
        self.push_op(value, &[a], || PassOp { a })
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += va.data[r * cols + c];
            }
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push_op(Tensor::row(out), &[a], || MeanRowsOp { a, rows })
    }

    /// Column-wise maximum over rows; ties resolve to the lowest row index.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        assert!(rows > 0, "max_rows of an empty tensor");
        let mut out = va.row_slice(0).to_vec();
        let mut argmax = vec![0usize; cols];
        for r in 1..rows {
            for c in 0..cols {
                let v = va.data[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        self.push_op(Tensor::row(out), &[a], || MaxRowsOp { a, argmax })
    }

    /// Subtracts the `1 × cols` variable `row` from every row of `a`.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.len(), va.cols, "sub_row width");
        let cols = va.cols;
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x - vr.data[i % cols])
            .collect();
        let value = Tensor::from_vec(va.rows, cols, data);
        self.push_op(value, &[a, row], || SubRowOp { a, row })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let vp = self.value(*p);
            assert_eq!(vp.rows, rows, "concat_cols row count");
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(vp.row_slice(r));
            }
            offset += w;
        }
        let value = Tensor::from_vec(rows, total, out);
        self.push_op(value, parts, || ConcatColsOp {
            parts: parts.iter().copied().zip(widths).collect(),
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(start <= end && end <= va.cols, "slice_cols range");
        let w = end - start;
        let mut out = Vec::with_capacity(va.rows * w);
        for r in 0..va.rows {
            out.extend_from_slice(&va.row_slice(r)[start..end]);
        }
        let in_cols = va.cols;
        let value = Tensor::from_vec(va.rows, w, out);
        self.push_op(value, &[a], || SliceColsOp { a, start, in_cols })
    }

    /// Row-wise 3×3 products: each row of `a` and `b` is a row-major 3×3.
    pub fn mat3_rows_mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.cols == 9 && vb.cols == 9 && va.rows == vb.rows, "mat3_rows_mul shape");
        let rows = va.rows;
        let mut out = vec![0.0; rows * 9];
        for e in 0..rows {
            let (ar, br) = (&va.data[9 * e..9 * e + 9], &vb.data[9 * e..9 * e + 9]);
            for i in 0..3 {
                for j in 0..3 {
                    out[9 * e + 3 * i + j] =
                        ar[3 * i] * br[j] + ar[3 * i + 1] * br[3 + j] + ar[3 * i + 2] * br[6 + j];
                }
            }
        }
        self.push_op(Tensor::from_vec(rows, 9, out), &[a, b], || Mat3RowsMulOp { a, b })
    }

    /// `(1/rows) Σ ‖aᵢ − tᵢ‖²` against a constant target.
    pub fn sq_err_mean(&mut self, a: Var, target: &[f64]) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), target.len(), "sq_err_mean length");
        let rows = va.rows.max(1);
        let residual: Vec<f64> = va.data.iter().zip(target).map(|(x, t)| x - t).collect();
        let value = residual.iter().map(|r| r * r).sum::<f64>() / rows as f64;
        self.push_op(Tensor::scalar(value), &[a], || SqErrMeanOp { a, residual, rows })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push_op(Tensor::scalar(s), &[a], || SumOp { a })
    }

    /// Replaces entries where `mask` is set with constants from `values`;
    /// those entries receive no gradient.
    pub fn masked_assign(&mut self, a: Var, mask: Vec<bool>, values: &[f64]) -> Var {
        let va = self.value(a);
        assert!(mask.len() == va.len() && values.len() == va.len(), "masked_assign length");
        let data = va
            .data
            .iter()
            .zip(&mask)
            .zip(values)
            .map(|((x, &m), v)| if m { *v } else { *x })
            .collect();
        let value = Tensor::from_vec(va.rows, va.cols, data);
        self.push_op(value, &[a], || MaskOp { a, mask })
    }

    /// Rescales rows whose Euclidean norm exceeds `max_norm` to that norm.
    pub fn clamp_row_norm(&mut self, a: Var, max_norm: f64) -> Var {
        let va = self.value(a);
        let cols = va.cols;
        let mut out = va.data.clone();
        let mut clamped_norms = vec![0.0; va.rows];
        for r in 0..va.rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let n = libm::sqrt(row.iter().map(|x| x * x).sum());
            if n > max_norm {
                let s = max_norm / n;
                row.iter_mut().for_each(|x| *x *= s);
                clamped_norms[r] = n;
            }
        }
        let value = Tensor::from_vec(va.rows, cols, out);
        self.push_op(value, &[a], || ClampRowNormOp {
            a,
            max_norm,
            clamped_norms,
        })
    }
}
