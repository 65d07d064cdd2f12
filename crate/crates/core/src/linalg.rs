//! Fixed-size 3-vector and 3×3 matrix helpers used by the FEM kernels.
//!
//! Matrices are row-major `[[f64; 3]; 3]` wrapped in [`Mat3`]. When a batch of
//! matrices is stored flat (one row of a tape tensor per element) the layout is
//! the same row-major order, see [`Mat3::from_row_slice`].

use core::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    libm::sqrt(dot(a, a))
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_diagonal(d: Vec3) -> Self {
        Mat3([[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]])
    }

    pub fn from_scaled_identity(s: f64) -> Self {
        Self::from_diagonal([s, s, s])
    }

    /// Builds a matrix whose columns are `c0, c1, c2`.
    pub fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Self {
        Mat3([
            [c0[0], c1[0], c2[0]],
            [c0[1], c1[1], c2[1]],
            [c0[2], c1[2], c2[2]],
        ])
    }

    pub fn from_row_slice(s: &[f64]) -> Self {
        debug_assert!(s.len() >= 9);
        Mat3([[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], s[8]]])
    }

    pub fn write_row_slice(&self, out: &mut [f64]) {
        for r in 0..3 {
            out[3 * r..3 * r + 3].copy_from_slice(&self.0[r]);
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        self.write_row_slice(&mut out);
        out
    }

    #[inline]
    pub fn column(&self, c: usize) -> Vec3 {
        [self.0[0][c], self.0[1][c], self.0[2][c]]
    }

    #[inline]
    pub fn set_column(&mut self, c: usize, v: Vec3) {
        for r in 0..3 {
            self.0[r][c] = v[r];
        }
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    #[inline]
    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Cofactor matrix, `cof(A) = det(A) A⁻ᵀ`; equals ∂det/∂A.
    #[inline]
    pub fn cofactor(&self) -> Self {
        let m = &self.0;
        Mat3([
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
            ],
            [
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
            ],
            [
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ])
    }

    /// `A⁻ᵀ` via the cofactor matrix. Returns `None` for a zero determinant.
    #[inline]
    pub fn inverse_transpose(&self) -> Option<Self> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        Some(self.cofactor() * (1.0 / det))
    }

    #[inline]
    pub fn inverse(&self) -> Option<Self> {
        self.inverse_transpose().map(|m| m.transpose())
    }

    #[inline]
    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    /// Frobenius inner product `A : B`.
    #[inline]
    pub fn ddot(&self, other: &Mat3) -> f64 {
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                s += self.0[r][c] * other.0[r][c];
            }
        }
        s
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.ddot(self))
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|r| r.iter().all(|v| v.is_finite()))
    }

    pub fn symmetric_part(&self) -> Self {
        (*self + self.transpose()) * 0.5
    }
}

impl Index<(usize, usize)> for Mat3 {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.0[r][c]
    }
}

impl IndexMut<(usize, usize)> for Mat3 {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.0[r][c]
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    #[inline]
    fn mul(self, rhs: Mat3) -> Mat3 {
        let a = &self.0;
        let b = &rhs.0;
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
            }
        }
        Mat3(out)
    }
}

impl Mul<f64> for Mat3 {
    type Output = Mat3;
    #[inline]
    fn mul(self, s: f64) -> Mat3 {
        let mut out = self.0;
        for row in out.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        Mat3(out)
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    #[inline]
    fn add(self, rhs: Mat3) -> Mat3 {
        let mut out = self.0;
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] += rhs.0[r][c];
            }
        }
        Mat3(out)
    }
}

impl AddAssign for Mat3 {
    #[inline]
    fn add_assign(&mut self, rhs: Mat3) {
        *self = *self + rhs;
    }
}

impl Sub for Mat3 {
    type Output = Mat3;
    #[inline]
    fn sub(self, rhs: Mat3) -> Mat3 {
        self + (-rhs)
    }
}

impl Neg for Mat3 {
    type Output = Mat3;
    #[inline]
    fn neg(self) -> Mat3 {
        self * -1.0
    }
}

/// Rotation matrix from a unit quaternion `(w, x, y, z)`.
pub fn rotation_from_quaternion(q: [f64; 4]) -> Mat3 {
    let n = libm::sqrt(q.iter().map(|v| v * v).sum::<f64>());
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    Mat3([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

/// Uniformly distributed random rotation (Shoemake's method) from three
/// uniform samples in `[0, 1)`.
pub fn uniform_rotation(u: [f64; 3]) -> Mat3 {
    use core::f64::consts::PI;
    let a = libm::sqrt(1.0 - u[0]);
    let b = libm::sqrt(u[0]);
    let t1 = 2.0 * PI * u[1];
    let t2 = 2.0 * PI * u[2];
    rotation_from_quaternion([
        b * libm::cos(t2),
        a * libm::sin(t1),
        a * libm::cos(t1),
        b * libm::sin(t2),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cofactor_is_det_times_inverse_transpose() {
        let a = Mat3([[2.0, 0.3, -0.1], [0.2, 1.5, 0.4], [-0.3, 0.1, 0.9]]);
        let inv = a.inverse().unwrap();
        let id = a * inv;
        for r in 0..3 {
            for c in 0..3 {
                let e = if r == c { 1.0 } else { 0.0 };
                assert!((id[(r, c)] - e).abs() < 1e-14);
            }
        }
        let cof = a.cofactor();
        let expect = inv.transpose() * a.determinant();
        assert!((cof - expect).max_abs() < 1e-14);
    }

    #[test]
    fn quaternion_rotation_is_orthonormal() {
        let r = uniform_rotation([0.3, 0.7, 0.1]);
        let rtr = r.transpose() * r;
        assert!((rtr - Mat3::IDENTITY).max_abs() < 1e-14);
        assert!((r.determinant() - 1.0).abs() < 1e-14);
    }
}
