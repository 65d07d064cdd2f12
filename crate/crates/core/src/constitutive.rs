//! Learned material law: a rotation-equivariant map from deformation
//! gradient to first Piola–Kirchhoff stress.
//!
//! Each `F = U Σ Vᵀ` is summarized by rotation-invariant features
//! `(Σ, FᵀF, det F)`; an MLP maps them to a 3×3 corotated stress which is
//! scaled by a fixed stress unit and rotated back by `R = U Vᵀ`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::diff::{
    svd3, svd3_rotation_vjp, Activation, BackwardCtx, BackwardOp, Binding, LayerInit, LayerSpec, Mlp, ParamStore,
    Svd3, SvdGradient, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::fem::FemOps;
use crate::linalg::{Mat3, Vec3};
use crate::mesh::TetMesh;

pub const PREFIX: &str = "constitutive";
pub const N_FEATURES: usize = 13;
pub const DEFAULT_HIDDEN: [usize; 2] = [80, 96];
pub const DEFAULT_STRESS_SCALE: f64 = 1e5;

const STAT_STRESS_SCALE: &str = "constitutive/stress_scale";
const STAT_FEATURE_MEAN: &str = "constitutive/feature_mean";
const STAT_FEATURE_STD: &str = "constitutive/feature_std";
/// Floor for feature standard deviations.
const MIN_STD: f64 = 1e-6;

/// `(σ₁, σ₂, σ₃, FᵀF row-major, det F)` and the polar rotation `U Vᵀ`.
pub fn invariant_features(f: &Mat3) -> Result<([f64; N_FEATURES], Mat3)> {
    let svd = svd3(f)?;
    Ok((features_from_svd(f, &svd), svd.rotation()))
}

fn features_from_svd(f: &Mat3, svd: &Svd3) -> [f64; N_FEATURES] {
    let mut out = [0.0; N_FEATURES];
    out[..3].copy_from_slice(&svd.sigma);
    out[3..12].copy_from_slice(&(f.transpose() * *f).to_array());
    out[12] = f.determinant();
    out
}

struct FeaturesOp {
    fs: Var,
    svds: Vec<Svd3>,
    mode: SvdGradient,
}

impl BackwardOp for FeaturesOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, _out: &Tensor, g: &[f64]) {
        let fs = ctx.value(self.fs);
        let Some(gf) = ctx.grad_mut(self.fs) else {
            return;
        };
        for (e, svd) in self.svds.iter().enumerate() {
            let ge = &g[22 * e..22 * e + 22];
            let f = Mat3::from_row_slice(&fs.data[9 * e..9 * e + 9]);
            let g_c = Mat3::from_row_slice(&ge[3..12]);
            let g_sigma: Vec3 = [ge[0], ge[1], ge[2]];
            let g_rot = Mat3::from_row_slice(&ge[13..22]);
            let total = f * (g_c + g_c.transpose())
                + f.cofactor() * ge[12]
                + svd3_rotation_vjp(svd, g_sigma, &g_rot, self.mode);
            for (d, v) in gf[9 * e..9 * e + 9].iter_mut().zip(total.to_array()) {
                *d += v;
            }
        }
    }
}

/// Records per-element features and rotations as one `M × 22` tensor:
/// columns `0..13` hold the features, `13..22` the rotation.
pub fn features_op(tape: &mut Tape, fs: Var, mode: SvdGradient) -> Result<Var> {
    let fv = tape.value(fs);
    let mut svds = Vec::with_capacity(fv.rows);
    let mut out = Vec::with_capacity(fv.rows * 22);
    for e in 0..fv.rows {
        let f = Mat3::from_row_slice(&fv.data[9 * e..9 * e + 9]);
        let svd = svd3(&f)?;
        out.extend_from_slice(&features_from_svd(&f, &svd));
        out.extend_from_slice(&svd.rotation().to_array());
        svds.push(svd);
    }
    let value = Tensor::from_vec(fv.rows, 22, out);
    Ok(tape.push_op(value, &[fs], || FeaturesOp { fs, svds, mode }))
}

/// Architecture and conditioning of the learned material.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstitutiveNet {
    pub mlp: Mlp,
    pub stress_scale: f64,
    pub svd_gradient: SvdGradient,
}

impl ConstitutiveNet {
    pub fn new(hidden: &[usize], stress_scale: f64) -> Result<Self> {
        if !(stress_scale > 0.0 && stress_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "stress scale must be positive, got {stress_scale}"
            )));
        }
        let mut dims = vec![N_FEATURES];
        dims.extend_from_slice(hidden);
        dims.push(9);
        Ok(ConstitutiveNet {
            mlp: Mlp::new(PREFIX, &dims, Activation::Silu, Activation::Identity),
            stress_scale,
            svd_gradient: SvdGradient::Full,
        })
    }

    /// Fresh parameters: fan-in uniform hidden layers and a zero output
    /// layer, so the untrained material is stress-free.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.mlp.init(store, rng, LayerInit::Zero)?;
        store.set_stat(STAT_STRESS_SCALE, vec![self.stress_scale]);
        store.set_stat(STAT_FEATURE_MEAN, vec![0.0; N_FEATURES]);
        store.set_stat(STAT_FEATURE_STD, vec![1.0; N_FEATURES]);
        Ok(())
    }

    /// Rebuilds the architecture from the layer shapes found in `store`.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0.. {
            let w = format!("{PREFIX}/l{i}/w");
            let Some(t) = store.get(&w) else { break };
            layers.push(LayerSpec {
                weight: w,
                bias: format!("{PREFIX}/l{i}/b"),
                fan_in: t.rows,
                fan_out: t.cols,
                activation: Activation::Silu,
            });
        }
        let Some(last) = layers.last_mut() else {
            return Err(Error::MissingParameter(format!("{PREFIX}/l0/w")));
        };
        last.activation = Activation::Identity;
        if layers[0].fan_in != N_FEATURES || layers[layers.len() - 1].fan_out != 9 {
            return Err(Error::ShapeMismatch(format!(
                "constitutive net must map {N_FEATURES} features to 9 outputs"
            )));
        }
        let scale = store.require_stat(STAT_STRESS_SCALE)?;
        Ok(ConstitutiveNet {
            mlp: Mlp { layers },
            stress_scale: scale[0],
            svd_gradient: SvdGradient::Full,
        })
    }

    /// Sets the feature standardization from a sample of deformation
    /// gradients.
    pub fn fit_normalization(&self, store: &mut ParamStore, fs: &[Mat3]) -> Result<()> {
        let mut sum = [0.0; N_FEATURES];
        let mut sq = [0.0; N_FEATURES];
        for f in fs {
            let (feat, _) = invariant_features(f)?;
            for k in 0..N_FEATURES {
                sum[k] += feat[k];
                sq[k] += feat[k] * feat[k];
            }
        }
        let n = fs.len().max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = (0..N_FEATURES)
            .map(|k| libm::sqrt((sq[k] / n - mean[k] * mean[k]).max(0.0)).max(MIN_STD))
            .collect();
        store.set_stat(STAT_FEATURE_MEAN, mean);
        store.set_stat(STAT_FEATURE_STD, std);
        Ok(())
    }

    /// `M × 9` stresses for `M × 9` deformation gradients.
    pub fn stresses(&self, tape: &mut Tape, params: &Binding, store: &ParamStore, fs: Var) -> Result<Var> {
        let mean = store.require_stat(STAT_FEATURE_MEAN)?;
        let inv_std: Vec<f64> = store.require_stat(STAT_FEATURE_STD)?.iter().map(|s| 1.0 / s).collect();
        let fr = features_op(tape, fs, self.svd_gradient)?;
        let feat = tape.slice_cols(fr, 0, N_FEATURES);
        let rot = tape.slice_cols(fr, N_FEATURES, N_FEATURES + 9);
        let z = tape.affine_cols(feat, mean, &inv_std);
        let out = self.mlp.forward(tape, params, z)?;
        let corotated = tape.scale(out, self.stress_scale);
        Ok(tape.mat3_rows_mul(rot, corotated))
    }

    pub fn forces(&self, tape: &mut Tape, params: &Binding, store: &ParamStore, ops: &FemOps, x: Var) -> Result<Var> {
        let fs = ops.deformation_gradients(tape, x);
        let ps = self.stresses(tape, params, store, fs)?;
        Ok(ops.assemble_forces(tape, ps))
    }
}

/// Stateless inference helper around a bound store.
pub struct ConstitutiveModel<'a> {
    pub net: ConstitutiveNet,
    pub store: &'a ParamStore,
    tape: Tape,
    params: Binding,
    mark: usize,
}

impl<'a> ConstitutiveModel<'a> {
    pub fn new(store: &'a ParamStore) -> Result<Self> {
        let net = ConstitutiveNet::from_store(store)?;
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, |_| false);
        let mark = tape.len();
        Ok(ConstitutiveModel {
            net,
            store,
            tape,
            params,
            mark,
        })
    }

    pub fn predict_stress(&mut self, f: &Mat3) -> Result<Mat3> {
        let fv = self.tape.constant(Tensor::row(f.to_array().to_vec()));
        let p = self.net.stresses(&mut self.tape, &self.params, self.store, fv)?;
        let out = Mat3::from_row_slice(&self.tape.value(p).data);
        self.tape.truncate(self.mark);
        Ok(out)
    }

    pub fn internal_forces(&mut self, ops: &FemOps, positions: &[Vec3]) -> Result<Vec<Vec3>> {
        let x = self.tape.constant(Tensor::from_vec3s(positions));
        let f = self.net.forces(&mut self.tape, &self.params, self.store, ops, x)?;
        let out = self.tape.value(f).to_vec3s();
        self.tape.truncate(self.mark);
        Ok(out)
    }
}

/// Convenience wrapper for one-off evaluations.
pub fn neural_internal_forces(store: &ParamStore, positions: &[Vec3], mesh: &TetMesh) -> Result<Vec<Vec3>> {
    let ops = FemOps::new(mesh);
    ConstitutiveModel::new(store)?.internal_forces(&ops, positions)
}

pub fn predict_stress(store: &ParamStore, f: &Mat3) -> Result<Mat3> {
    ConstitutiveModel::new(store)?.predict_stress(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{self, uniform_rotation};
    use crate::mesh::{make_cube_mesh, Tessellation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ConstitutiveNet::new(&[8, 6], 10.0).unwrap();
        let mut store = ParamStore::new(seed);
        net.init(&mut store, &mut rng).unwrap();
        // replace the zero output layer so the net is non-trivial
        let w = store.get_mut("constitutive/l2/w").unwrap();
        for v in w.data.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        store
    }

    fn random_f(rng: &mut ChaCha8Rng) -> Mat3 {
        let mut f = Mat3::IDENTITY;
        for r in 0..3 {
            for c in 0..3 {
                f[(r, c)] += rng.random_range(-0.3..0.3);
            }
        }
        f
    }

    #[test]
    fn features_at_identity() {
        let (feat, r) = invariant_features(&Mat3::IDENTITY).unwrap();
        assert_eq!(feat, [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert!((r - Mat3::IDENTITY).max_abs() < 1e-15);
    }

    #[test]
    fn features_of_rotation_and_diagonal() {
        let q = uniform_rotation([0.3, 0.6, 0.9]);
        let (feat, r) = invariant_features(&q).unwrap();
        let (id, _) = invariant_features(&Mat3::IDENTITY).unwrap();
        for k in 0..N_FEATURES {
            assert!((feat[k] - id[k]).abs() < 1e-12);
        }
        assert!((r - q).max_abs() < 1e-12);

        let (feat, _) = invariant_features(&Mat3::from_diagonal([2.0, 1.0, 0.5])).unwrap();
        assert_eq!(&feat[..3], &[2.0, 1.0, 0.5]);
        assert_eq!(feat[12], 1.0);
        assert_eq!(&feat[3..12], &[4.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn zero_output_layer_is_stress_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ConstitutiveNet::new(&DEFAULT_HIDDEN, DEFAULT_STRESS_SCALE).unwrap();
        let mut store = ParamStore::new(0);
        net.init(&mut store, &mut rng).unwrap();
        assert_eq!(predict_stress(&store, &random_f(&mut rng)).unwrap(), Mat3::ZERO);
        let mesh = make_cube_mesh(3, 1.0, 1000.0, Tessellation::SixTet).unwrap();
        let f = neural_internal_forces(&store, &mesh.vertices_rest, &mesh).unwrap();
        assert!(f.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn stress_is_rotation_equivariant() {
        let store = random_store(1);
        let mut model = ConstitutiveModel::new(&store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let f = random_f(&mut rng);
            let q = uniform_rotation([rng.random(), rng.random(), rng.random()]);
            let p = model.predict_stress(&f).unwrap();
            let pq = model.predict_stress(&(q * f)).unwrap();
            assert!((pq - q * p).max_abs() < 1e-8 * p.max_abs().max(1.0));
        }
    }

    #[test]
    fn neural_forces_balance() {
        let store = random_store(3);
        let mesh = make_cube_mesh(3, 1.0, 1000.0, Tessellation::SixTet).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Vec3> = mesh
            .vertices_rest
            .iter()
            .map(|p| [0, 1, 2].map(|c| p[c] + rng.random_range(-0.05..0.05)))
            .collect();
        let f = neural_internal_forces(&store, &x, &mesh).unwrap();
        let total = f.iter().fold([0.0; 3], |a, b| linalg::add(a, *b));
        let scale: f64 = f.iter().map(|v| linalg::norm(*v)).sum();
        assert!(linalg::norm(total) <= 1e-9 * scale.max(1.0));
    }

    #[test]
    fn force_loss_gradient_on_single_tet() {
        let mesh = TetMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
            1000.0,
            vec![],
            None,
        )
        .unwrap();
        let ops = FemOps::new(&mesh);
        let store = random_store(5);
        let net = ConstitutiveNet::from_store(&store).unwrap();
        let x = vec![[0.05, -0.02, 0.01], [1.1, 0.03, -0.05], [0.02, 0.9, 0.1], [-0.04, 0.05, 1.2]];
        let target = [0.3, -0.1, 0.2, 0.5, 0.1, -0.4, -0.2, 0.3, 0.0, 0.1, -0.1, 0.2];
        let loss_of = |s: &ParamStore, grads: bool| {
            let mut tape = Tape::new();
            let b = s.bind(&mut tape, |_| grads);
            let xv = tape.constant(Tensor::from_vec3s(&x));
            let f = net.forces(&mut tape, &b, s, &ops, xv).unwrap();
            let l = tape.sq_err_mean(f, &target);
            let val = tape.value(l).item();
            let g = if grads { Some(b.collect(&tape, &tape.backward(l).unwrap())) } else { None };
            (val, g)
        };
        let (_, g) = loss_of(&store, true);
        let g = g.unwrap();
        let h = 1e-6;
        for (name, grad) in &g {
            for (i, gi) in grad.iter().enumerate() {
                let mut sp = store.clone();
                sp.get_mut(name).unwrap().data[i] += h;
                let mut sm = store.clone();
                sm.get_mut(name).unwrap().data[i] -= h;
                let fd = (loss_of(&sp, false).0 - loss_of(&sm, false).0) / (2.0 * h);
                assert!(
                    (fd - gi).abs() <= 1e-4 * fd.abs().max(gi.abs()).max(1e-3),
                    "{name}[{i}]: {} vs {fd}",
                    gi
                );
            }
        }
    }

    #[test]
    fn features_op_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fs: Vec<f64> = (0..3).flat_map(|_| random_f(&mut rng).to_array()).collect();
        let w: Vec<f64> = (0..66).map(|i| ((i * 5 % 9) as f64 - 4.0) * 0.1).collect();
        let eval = |data: &[f64], leaf: bool| {
            let mut tape = Tape::new();
            let t = Tensor::from_vec(3, 9, data.to_vec());
            let v = if leaf { tape.leaf(t) } else { tape.constant(t) };
            let out = features_op(&mut tape, v, SvdGradient::Full).unwrap();
            let l = tape.sq_err_mean(out, &w);
            let val = tape.value(l).item();
            let g = if leaf { tape.backward(l).unwrap().get_or_zeros(v, 27) } else { Vec::new() };
            (val, g)
        };
        let (_, g) = eval(&fs, true);
        for i in 0..27 {
            let mut p = fs.clone();
            p[i] += 1e-6;
            let mut m = fs.clone();
            m[i] -= 1e-6;
            let fd = (eval(&p, false).0 - eval(&m, false).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0), "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn store_round_trip_architecture() {
        let store = random_store(7);
        let net = ConstitutiveNet::from_store(&store).unwrap();
        assert_eq!(net.mlp.layers.len(), 3);
        assert_eq!(net.stress_scale, 10.0);
        assert!(ConstitutiveNet::from_store(&ParamStore::new(0)).is_err());
    }
}
