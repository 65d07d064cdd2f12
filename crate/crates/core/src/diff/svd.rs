//! 3×3 singular value decomposition and its reverse-mode adjoint.
//!
//! The factorization is computed with one-sided Jacobi rotations on the
//! columns of `F`, which keeps `U` orthonormal to machine precision even when
//! singular values coincide. Both `U` and `V` are returned as proper
//! rotations; when `det F < 0` the smallest singular value carries the sign.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3};

/// Clamp for the pairwise denominators of the adjoint.
pub const SVD_EPSILON: f64 = 1e-8;

const MAX_SWEEPS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    /// Descending; only the last entry can be negative (when `det F < 0`).
    pub sigma: Vec3,
    pub v: Mat3,
}

/// Whether gradients flow through the factorization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SvdGradient {
    #[default]
    Full,
    Detached,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Mat3 {
        self.u * Mat3::from_diagonal(self.sigma) * self.v.transpose()
    }

    /// Polar rotation `U Vᵀ`.
    pub fn rotation(&self) -> Mat3 {
        self.u * self.v.transpose()
    }
}

fn any_perpendicular(a: Vec3) -> Vec3 {
    // pick the axis least aligned with `a`
    let ax = [a[0].abs(), a[1].abs(), a[2].abs()];
    let e = if ax[0] <= ax[1] && ax[0] <= ax[2] {
        [1.0, 0.0, 0.0]
    } else if ax[1] <= ax[2] {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let p = linalg::cross(a, e);
    linalg::scale(p, 1.0 / linalg::norm(p))
}

pub fn svd3(f: &Mat3) -> Result<Svd3> {
    if !f.is_finite() {
        return Err(Error::NonFinite("svd3 input"));
    }
    let mut a = [f.column(0), f.column(1), f.column(2)];
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let alpha = linalg::dot(a[p], a[p]);
            let beta = linalg::dot(a[q], a[q]);
            let gamma = linalg::dot(a[p], a[q]);
            if gamma == 0.0 || gamma.abs() <= 1e-15 * libm::sqrt(alpha * beta) {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
            let c = 1.0 / libm::sqrt(1.0 + t * t);
            let s = c * t;
            let (ap, aq) = (a[p], a[q]);
            a[p] = linalg::sub(linalg::scale(ap, c), linalg::scale(aq, s));
            a[q] = linalg::add(linalg::scale(ap, s), linalg::scale(aq, c));
            let (vp, vq) = (v[p], v[q]);
            v[p] = linalg::sub(linalg::scale(vp, c), linalg::scale(vq, s));
            v[q] = linalg::add(linalg::scale(vp, s), linalg::scale(vq, c));
        }
        if !rotated {
            break;
        }
    }

    let mut order = [0usize, 1, 2];
    let norms = [linalg::norm(a[0]), linalg::norm(a[1]), linalg::norm(a[2])];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut a = [a[order[0]], a[order[1]], a[order[2]]];
    let mut v = [v[order[0]], v[order[1]], v[order[2]]];

    if linalg::dot(linalg::cross(v[0], v[1]), v[2]) < 0.0 {
        v[2] = linalg::scale(v[2], -1.0);
        a[2] = linalg::scale(a[2], -1.0);
    }

    let s1 = linalg::norm(a[0]);
    let scale_ref = s1.max(f64::MIN_POSITIVE);
    let u1 = if s1 > 0.0 {
        linalg::scale(a[0], 1.0 / s1)
    } else {
        [1.0, 0.0, 0.0]
    };
    let r2 = linalg::sub(a[1], linalg::scale(u1, linalg::dot(u1, a[1])));
    let n2 = linalg::norm(r2);
    let u2 = if n2 > 1e-300 && n2 > 1e-14 * scale_ref {
        linalg::scale(r2, 1.0 / n2)
    } else {
        any_perpendicular(u1)
    };
    let u3 = linalg::cross(u1, u2);
    let sigma = [s1, linalg::dot(u2, a[1]), linalg::dot(u3, a[2])];

    Ok(Svd3 {
        u: Mat3::from_columns(u1, u2, u3),
        sigma,
        v: Mat3::from_columns(v[0], v[1], v[2]),
    })
}

/// `1 / d` with `|d|` clamped below at [`SVD_EPSILON`], keeping `sign_hint`
/// when `d` is too small to carry a reliable sign.
#[inline]
fn clamped_reciprocal(d: f64, sign_hint: f64) -> f64 {
    if d.abs() < SVD_EPSILON {
        sign_hint / SVD_EPSILON
    } else {
        1.0 / d
    }
}

/// Adjoint of `F ↦ (U, Σ, V)` for cotangents `(gU, gΣ, gV)`:
///
/// `gF = U [ (E ∘ (UᵀgU − gUᵀU)) Σ + Σ (E ∘ (VᵀgV − gVᵀV)) + diag(gΣ) ] Vᵀ`
///
/// with `E_ij = 1 / (σ_j² − σ_i²)` clamped in magnitude at `1/ε`.
pub fn svd3_vjp(svd: &Svd3, g_u: &Mat3, g_sigma: Vec3, g_v: &Mat3, mode: SvdGradient) -> Mat3 {
    if mode == SvdGradient::Detached {
        return Mat3::ZERO;
    }
    let (u, v, s) = (svd.u, svd.v, svd.sigma);
    let j = u.transpose() * *g_u;
    let k = v.transpose() * *g_v;
    let mut inner = Mat3::from_diagonal(g_sigma);
    for a in 0..3 {
        for b in 0..3 {
            if a == b {
                continue;
            }
            // sorted descending, so σ_b² − σ_a² ≤ 0 when a < b
            let hint = if a < b { -1.0 } else { 1.0 };
            let e = clamped_reciprocal(s[b] * s[b] - s[a] * s[a], hint);
            inner[(a, b)] += e * (j[(a, b)] - j[(b, a)]) * s[b] + s[a] * e * (k[(a, b)] - k[(b, a)]);
        }
    }
    u * inner * v.transpose()
}

/// Adjoint of `F ↦ (Σ, R = U Vᵀ)` for cotangents `(gΣ, gR)`.
///
/// Substituting `gU = gR V` and `gV = gRᵀ U` into [`svd3_vjp`] collapses the
/// off-diagonal factor to `(X − Xᵀ)_ij / (σ_i + σ_j)` with `X = Uᵀ gR V`,
/// which stays bounded when singular values coincide.
pub fn svd3_rotation_vjp(svd: &Svd3, g_sigma: Vec3, g_rot: &Mat3, mode: SvdGradient) -> Mat3 {
    if mode == SvdGradient::Detached {
        return Mat3::ZERO;
    }
    let (u, v, s) = (svd.u, svd.v, svd.sigma);
    let x = u.transpose() * *g_rot * v;
    let mut inner = Mat3::from_diagonal(g_sigma);
    for a in 0..3 {
        for b in 0..3 {
            if a != b {
                inner[(a, b)] += (x[(a, b)] - x[(b, a)]) * clamped_reciprocal(s[a] + s[b], 1.0);
            }
        }
    }
    u * inner * v.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_orthonormal(m: &Mat3) {
        let e = m.transpose() * *m - Mat3::IDENTITY;
        assert!(e.max_abs() < 1e-12, "not orthonormal: {e:?}");
        assert!((m.determinant() - 1.0).abs() < 1e-12);
    }

    fn pseudo_random(seed: u64) -> Mat3 {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut m = Mat3::ZERO;
        for r in 0..3 {
            for c in 0..3 {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                m[(r, c)] = ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0;
            }
        }
        m
    }

    #[test]
    fn identity_and_diagonal() {
        let d = svd3(&Mat3::IDENTITY).unwrap();
        assert_eq!(d.sigma, [1.0, 1.0, 1.0]);
        assert!((d.u - Mat3::IDENTITY).max_abs() < 1e-15);
        assert!((d.v - Mat3::IDENTITY).max_abs() < 1e-15);

        let d = svd3(&Mat3::from_diagonal([3.0, 2.0, 1.0])).unwrap();
        assert_eq!(d.sigma, [3.0, 2.0, 1.0]);
        assert!((d.u - Mat3::IDENTITY).max_abs() < 1e-15);
        assert!((d.v - Mat3::IDENTITY).max_abs() < 1e-15);
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let d = svd3(&Mat3::from_diagonal([0.5, 2.0, 1.0])).unwrap();
        assert_eq!(d.sigma, [2.0, 1.0, 0.5]);
        assert!((d.reconstruct() - Mat3::from_diagonal([0.5, 2.0, 1.0])).max_abs() < 1e-14);
    }

    #[test]
    fn random_reconstruction() {
        for seed in 0..200 {
            let f = pseudo_random(seed);
            let d = svd3(&f).unwrap();
            check_orthonormal(&d.u);
            check_orthonormal(&d.v);
            assert!((d.reconstruct() - f).max_abs() < 1e-10);
            assert!(d.sigma[0] >= d.sigma[1] && d.sigma[1] >= d.sigma[2].abs());
            assert_eq!(d.sigma[2] < 0.0, f.determinant() < 0.0);
        }
    }

    #[test]
    fn rank_deficient_inputs() {
        for f in [
            Mat3::ZERO,
            Mat3::from_diagonal([1.0, 0.0, 0.0]),
            Mat3([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 0.0]]),
        ] {
            let d = svd3(&f).unwrap();
            check_orthonormal(&d.u);
            check_orthonormal(&d.v);
            assert!((d.reconstruct() - f).max_abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut f = Mat3::IDENTITY;
        f[(1, 2)] = f64::NAN;
        assert!(svd3(&f).is_err());
    }

    #[test]
    fn sum_of_singular_values_gradient() {
        // d(Σσ)/dF = U Vᵀ for distinct positive σ
        for seed in 0..20 {
            let f = pseudo_random(seed + 1000) + Mat3::from_diagonal([2.0, 1.0, 0.5]);
            let d = svd3(&f).unwrap();
            if d.sigma[2] <= 0.0 {
                continue;
            }
            let g = svd3_vjp(&d, &Mat3::ZERO, [1.0; 3], &Mat3::ZERO, SvdGradient::Full);
            let h = 1e-6;
            for r in 0..3 {
                for c in 0..3 {
                    let mut fp = f;
                    fp[(r, c)] += h;
                    let mut fm = f;
                    fm[(r, c)] -= h;
                    let sp: f64 = svd3(&fp).unwrap().sigma.iter().sum();
                    let sm: f64 = svd3(&fm).unwrap().sigma.iter().sum();
                    let fd = (sp - sm) / (2.0 * h);
                    assert!((fd - g[(r, c)]).abs() < 1e-4 * fd.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn rotation_adjoint_matches_general_adjoint() {
        let f = pseudo_random(7) + Mat3::from_diagonal([2.0, 1.0, 0.3]);
        let d = svd3(&f).unwrap();
        let g_rot = pseudo_random(8);
        let gs = [0.3, -0.2, 0.7];
        let general = svd3_vjp(&d, &(g_rot * d.v), gs, &(g_rot.transpose() * d.u), SvdGradient::Full);
        let fused = svd3_rotation_vjp(&d, gs, &g_rot, SvdGradient::Full);
        assert!((general - fused).max_abs() < 1e-9);
    }

    #[test]
    fn rotation_adjoint_finite_at_repeated_singular_values() {
        let d = svd3(&Mat3::IDENTITY).unwrap();
        let g = svd3_rotation_vjp(&d, [0.0; 3], &Mat3([[0.0, 1.0, 0.0], [0.0; 3], [0.0; 3]]), SvdGradient::Full);
        assert!(g.is_finite());
        // R(I + εA) ≈ I + ε skew(A): gradient of R_01 is skew projection
        assert!((g[(0, 1)] - 0.5).abs() < 1e-12 && (g[(1, 0)] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn detached_mode_blocks_gradient() {
        let d = svd3(&pseudo_random(3)).unwrap();
        let g = svd3_vjp(&d, &Mat3::IDENTITY, [1.0; 3], &Mat3::IDENTITY, SvdGradient::Detached);
        assert_eq!(g, Mat3::ZERO);
    }
}
