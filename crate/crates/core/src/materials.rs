//! Analytic hyperelastic laws: strain-energy densities and first
//! Piola–Kirchhoff stresses for compressible neo-Hookean and
//! St. Venant–Kirchhoff materials.

use alloc::format;

use crate::error::{Error, Result};
use crate::linalg::Mat3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaterialModel {
    NeoHookean,
    StVK,
}

impl MaterialModel {
    pub fn name(&self) -> &'static str {
        match self {
            MaterialModel::NeoHookean => "neo_hookean",
            MaterialModel::StVK => "stvk",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "neo_hookean" | "neohookean" | "NeoHookean" => Some(MaterialModel::NeoHookean),
            "stvk" | "StVK" | "st_venant_kirchhoff" => Some(MaterialModel::StVK),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaterialParams {
    pub model: MaterialModel,
    pub mu: f64,
    pub lambda: f64,
}

/// Converts Young's modulus and Poisson's ratio to Lamé `(μ, λ)`.
pub fn lame_from_young_poisson(young: f64, poisson: f64) -> Result<(f64, f64)> {
    if !(young > 0.0 && young.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "Young's modulus must be positive, got {young}"
        )));
    }
    if !(0.0..0.5).contains(&poisson) {
        return Err(Error::InvalidParameter(format!(
            "Poisson's ratio must lie in [0, 0.5), got {poisson}"
        )));
    }
    let mu = young / (2.0 * (1.0 + poisson));
    let lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
    Ok((mu, lambda))
}

impl MaterialParams {
    pub fn new(model: MaterialModel, mu: f64, lambda: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) || !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Lamé parameters need mu > 0 and lambda >= 0, got ({mu}, {lambda})"
            )));
        }
        Ok(MaterialParams { model, mu, lambda })
    }

    pub fn from_young_poisson(model: MaterialModel, young: f64, poisson: f64) -> Result<Self> {
        let (mu, lambda) = lame_from_young_poisson(young, poisson)?;
        MaterialParams::new(model, mu, lambda)
    }

    /// Inverse conversion, `(E, ν)`.
    pub fn young_poisson(&self) -> (f64, f64) {
        let (mu, l) = (self.mu, self.lambda);
        (mu * (3.0 * l + 2.0 * mu) / (l + mu), l / (2.0 * (l + mu)))
    }
}

fn checked_det(f: &Mat3) -> Result<f64> {
    let j = f.determinant();
    if !(j > 0.0) {
        return Err(Error::InvertedElement { element: None, det: j });
    }
    Ok(j)
}

fn green_strain(f: &Mat3) -> Mat3 {
    (f.transpose() * *f - Mat3::IDENTITY) * 0.5
}

/// Strain-energy density `W(F)` in J/m³.
pub fn energy_density(params: &MaterialParams, f: &Mat3) -> Result<f64> {
    if !f.is_finite() {
        return Err(Error::NonFinite("energy_density"));
    }
    let (mu, lambda) = (params.mu, params.lambda);
    match params.model {
        MaterialModel::NeoHookean => {
            let j = checked_det(f)?;
            let ic = f.ddot(f);
            let ln_j = libm::log(j);
            Ok(0.5 * mu * (ic - 3.0) - mu * ln_j + 0.5 * lambda * ln_j * ln_j)
        }
        MaterialModel::StVK => {
            let e = green_strain(f);
            let tr = e.trace();
            Ok(0.5 * lambda * tr * tr + mu * e.ddot(&e))
        }
    }
}

/// First Piola–Kirchhoff stress `P = ∂W/∂F` in Pa.
pub fn pk1_stress(params: &MaterialParams, f: &Mat3) -> Result<Mat3> {
    let (mu, lambda) = (params.mu, params.lambda);
    match params.model {
        MaterialModel::NeoHookean => {
            let j = checked_det(f)?;
            let f_inv_t = f.cofactor() * (1.0 / j);
            Ok((*f - f_inv_t) * mu + f_inv_t * (lambda * libm::log(j)))
        }
        MaterialModel::StVK => {
            let e = green_strain(f);
            let s = e * (2.0 * mu) + Mat3::from_scaled_identity(lambda * e.trace());
            Ok(*f * s)
        }
    }
}

/// Vector-Jacobian product of [`pk1_stress`]: returns `(∂P/∂F)ᵀ : G`.
///
/// Used when training rollouts backpropagate through the analytic material.
pub fn pk1_stress_vjp(params: &MaterialParams, f: &Mat3, g: &Mat3) -> Result<Mat3> {
    let (mu, lambda) = (params.mu, params.lambda);
    match params.model {
        MaterialModel::NeoHookean => {
            // dP = μ dF + (μ − λ ln J) F⁻ᵀ dFᵀ F⁻ᵀ + λ (F⁻ᵀ : dF) F⁻ᵀ
            let j = checked_det(f)?;
            let fit = f.cofactor() * (1.0 / j);
            let c = mu - lambda * libm::log(j);
            Ok(*g * mu + (fit * g.transpose() * fit) * c + fit * (lambda * fit.ddot(g)))
        }
        MaterialModel::StVK => {
            // P = F S(E);  grad = G S + F K,  K = 2μ sym(FᵀG) + λ tr(FᵀG) I
            let e = green_strain(f);
            let s = e * (2.0 * mu) + Mat3::from_scaled_identity(lambda * e.trace());
            let h = f.transpose() * *g;
            let k = h.symmetric_part() * (2.0 * mu) + Mat3::from_scaled_identity(lambda * h.trace());
            Ok(*g * s + *f * k)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(model: MaterialModel) -> MaterialParams {
        MaterialParams::new(model, 1.0, 1.0).unwrap()
    }

    #[test]
    fn lame_conversion_round_trips() {
        let (mu, lambda) = lame_from_young_poisson(5e5, 0.45).unwrap();
        assert!((mu - 172_413.793_103_448_27).abs() < 1e-6);
        assert!((lambda - 1_551_724.137_931_034_5).abs() < 1e-5);
        let p = MaterialParams::new(MaterialModel::NeoHookean, mu, lambda).unwrap();
        let (e, nu) = p.young_poisson();
        assert!((e - 5e5).abs() < 1e-6 && (nu - 0.45).abs() < 1e-14);

        let (mu, lambda) = lame_from_young_poisson(1e5, 0.45).unwrap();
        assert!((mu - 34_482.758_620_689_66).abs() < 1e-6);
        assert!((lambda - 310_344.827_586_206_9).abs() < 1e-6);

        let (mu, lambda) = lame_from_young_poisson(3.0, 0.0).unwrap();
        assert_eq!(lambda, 0.0);
        assert_eq!(mu, 1.5);
    }

    #[test]
    fn incompressible_limit_rejected() {
        assert!(lame_from_young_poisson(1.0, 0.5).is_err());
        assert!(lame_from_young_poisson(-1.0, 0.3).is_err());
    }

    #[test]
    fn rest_state_is_energy_and_stress_free() {
        for model in [MaterialModel::NeoHookean, MaterialModel::StVK] {
            let p = unit(model);
            assert_eq!(energy_density(&p, &Mat3::IDENTITY).unwrap(), 0.0);
            assert!(pk1_stress(&p, &Mat3::IDENTITY).unwrap().max_abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_stretch_values() {
        let f = Mat3::from_scaled_identity(1.1);
        let nh = unit(MaterialModel::NeoHookean);
        let svk = unit(MaterialModel::StVK);
        // direct evaluation: 0.5(3.63 − 3) − ln 1.331 + 0.5 ln² 1.331
        let ln_j = 1.331f64.ln();
        let w = 0.5 * (3.63 - 3.0) - ln_j + 0.5 * ln_j * ln_j;
        assert!((energy_density(&nh, &f).unwrap() - w).abs() < 1e-14);
        assert!((w - 0.069_947_6).abs() < 1e-7);
        assert!((energy_density(&svk, &f).unwrap() - 0.082_687_5).abs() < 1e-12);

        // 1.1 − 1/1.1 + ln(1.331)/1.1, cross-checked against a central
        // difference of the energy along one diagonal entry.
        let p = pk1_stress(&nh, &f).unwrap();
        assert!((p[(0, 0)] - 0.450_846_4).abs() < 1e-6);
        let h = 1e-6;
        let mut fp = f;
        fp[(0, 0)] += h;
        let mut fm = f;
        fm[(0, 0)] -= h;
        let fd = (energy_density(&nh, &fp).unwrap() - energy_density(&nh, &fm).unwrap()) / (2.0 * h);
        assert!((fd - p[(0, 0)]).abs() < 1e-6 * p[(0, 0)]);
        assert!(p[(0, 1)].abs() < 1e-15);
        let p = pk1_stress(&svk, &f).unwrap();
        assert!((p[(1, 1)] - 0.5775).abs() < 1e-12);
    }

    #[test]
    fn inverted_element_reported_for_neo_hookean() {
        let f = Mat3::from_diagonal([1.0, 1.0, -0.5]);
        let nh = unit(MaterialModel::NeoHookean);
        assert!(matches!(
            pk1_stress(&nh, &f),
            Err(Error::InvertedElement { .. })
        ));
        assert!(energy_density(&nh, &f).is_err());
        // StVK is defined for inverted elements.
        assert!(pk1_stress(&unit(MaterialModel::StVK), &f).is_ok());
    }
}
