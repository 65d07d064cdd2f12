//! Learned time integrator: predicts a per-vertex velocity increment from
//! positions, velocities and internal forces after a learned global
//! canonicalization of the mesh.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::diff::{Activation, Binding, LayerInit, Mlp, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fem::{FemOps, SimState};
use crate::linalg::Vec3;

pub const ALIGN_PREFIX: &str = "alignment";
pub const PREFIX: &str = "integration";
pub const EMBED_DIM: usize = 32;
pub const HEAD_HIDDEN: usize = 64;
pub const MAX_SPEED: f64 = 30.0;

const IDENTITY9: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

/// Per-channel input standardization and output scale.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegrationStats {
    pub x_mean: Vec3,
    pub x_std: Vec3,
    pub v_mean: Vec3,
    pub v_std: Vec3,
    pub f_mean: Vec3,
    pub f_std: Vec3,
    /// Output of the head is multiplied by this per channel.
    pub dv_scale: Vec3,
}

impl Default for IntegrationStats {
    fn default() -> Self {
        IntegrationStats {
            x_mean: [0.0; 3],
            x_std: [1.0; 3],
            v_mean: [0.0; 3],
            v_std: [1.0; 3],
            f_mean: [0.0; 3],
            f_std: [1.0; 3],
            dv_scale: [1.0; 3],
        }
    }
}

const STAT_NAMES: [&str; 7] = ["x_mean", "x_std", "v_mean", "v_std", "f_mean", "f_std", "dv_scale"];

impl IntegrationStats {
    fn fields(&self) -> [&Vec3; 7] {
        [
            &self.x_mean,
            &self.x_std,
            &self.v_mean,
            &self.v_std,
            &self.f_mean,
            &self.f_std,
            &self.dv_scale,
        ]
    }

    pub fn store(&self, store: &mut ParamStore) {
        for (name, v) in STAT_NAMES.iter().zip(self.fields()) {
            store.set_stat(&format!("{PREFIX}/{name}"), v.to_vec());
        }
    }

    pub fn load(store: &ParamStore) -> Result<Self> {
        let mut out = [[0.0; 3]; 7];
        for (slot, name) in out.iter_mut().zip(STAT_NAMES) {
            let key = format!("{PREFIX}/{name}");
            let v = store.require_stat(&key)?;
            if v.len() != 3 {
                return Err(Error::ShapeMismatch(format!("statistic {key} must have 3 entries")));
            }
            slot.copy_from_slice(v);
        }
        let stats = IntegrationStats {
            x_mean: out[0],
            x_std: out[1],
            v_mean: out[2],
            v_std: out[3],
            f_mean: out[4],
            f_std: out[5],
            dv_scale: out[6],
        };
        let positive = [stats.x_std, stats.v_std, stats.f_std, stats.dv_scale]
            .iter()
            .flatten()
            .all(|s| *s > 0.0 && s.is_finite());
        if !positive {
            return Err(Error::InvalidParameter(String::from(
                "integration standard deviations must be positive",
            )));
        }
        Ok(stats)
    }
}

/// Running per-channel moments used to fit [`IntegrationStats`].
#[derive(Clone, Debug, Default)]
pub struct ChannelMoments {
    n: f64,
    sum: [f64; 3],
    sq: [f64; 3],
}

impl ChannelMoments {
    pub fn push(&mut self, v: &Vec3) {
        self.n += 1.0;
        for c in 0..3 {
            self.sum[c] += v[c];
            self.sq[c] += v[c] * v[c];
        }
    }

    pub fn mean(&self) -> Vec3 {
        let n = self.n.max(1.0);
        self.sum.map(|s| s / n)
    }

    /// Standard deviation, floored at `floor`.
    pub fn std(&self, floor: f64) -> Vec3 {
        let n = self.n.max(1.0);
        let m = self.mean();
        [0, 1, 2].map(|c| libm::sqrt((self.sq[c] / n - m[c] * m[c]).max(0.0)).max(floor))
    }

    /// Root mean square, floored at `floor`.
    pub fn rms(&self, floor: f64) -> Vec3 {
        let n = self.n.max(1.0);
        self.sq.map(|s| libm::sqrt(s / n).max(floor))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegrationNet {
    pub align_encoder: Mlp,
    pub align_head: Mlp,
    pub embed_aligned: Mlp,
    pub embed_position: Mlp,
    pub embed_velocity: Mlp,
    pub embed_force: Mlp,
    pub head: Mlp,
    pub max_speed: f64,
}

impl Default for IntegrationNet {
    fn default() -> Self {
        IntegrationNet::new()
    }
}

impl IntegrationNet {
    pub fn new() -> Self {
        let embed = |name: &str| {
            Mlp::new(&format!("{PREFIX}/{name}"), &[3, EMBED_DIM], Activation::Silu, Activation::Silu)
        };
        IntegrationNet {
            align_encoder: Mlp::new(&format!("{ALIGN_PREFIX}/encoder"), &[3, 32, 64], Activation::Silu, Activation::Silu),
            align_head: Mlp::new(&format!("{ALIGN_PREFIX}/head"), &[64, 32, 9], Activation::Silu, Activation::Identity),
            embed_aligned: embed("embed_aligned"),
            embed_position: embed("embed_position"),
            embed_velocity: embed("embed_velocity"),
            embed_force: embed("embed_force"),
            head: Mlp::new(
                &format!("{PREFIX}/head"),
                &[4 * EMBED_DIM + 12, HEAD_HIDDEN, HEAD_HIDDEN, 3],
                Activation::Silu,
                Activation::Identity,
            ),
            max_speed: MAX_SPEED,
        }
    }

    /// Fresh parameters: the alignment starts at the identity map and the
    /// head's output layer at zero, so the untrained step is plain advection.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, stats: &IntegrationStats) -> Result<()> {
        self.align_encoder.init(store, rng, LayerInit::FanInUniform)?;
        self.align_head.init(store, rng, LayerInit::ZeroWithBias(IDENTITY9.to_vec()))?;
        for m in [&self.embed_aligned, &self.embed_position, &self.embed_velocity, &self.embed_force] {
            m.init(store, rng, LayerInit::FanInUniform)?;
        }
        self.head.init(store, rng, LayerInit::Zero)?;
        stats.store(store);
        Ok(())
    }

    /// Canonicalizes `x` (`N × 3`): `x̃_i = T (x_i − x̄)` with `T` regressed
    /// from max-pooled per-vertex features of the centered mesh.
    pub fn canonicalize(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let mean = tape.mean_rows(x);
        let centered = tape.sub_row(x, mean);
        let per_vertex = self.align_encoder.forward(tape, params, centered)?;
        let pooled = tape.max_rows(per_vertex);
        let t9 = self.align_head.forward(tape, params, pooled)?;
        let t = tape.reshape(t9, 3, 3);
        let t_transposed = tape.transpose(t);
        Ok(tape.matmul(centered, t_transposed))
    }

    /// Per-vertex velocity increments.
    pub fn delta_v(&self, tape: &mut Tape, params: &Binding, stats: &IntegrationStats, x: Var, v: Var, f: Var) -> Result<Var> {
        let (n, _) = tape.value(x).shape();
        if tape.value(v).shape() != (n, 3) || tape.value(f).shape() != (n, 3) {
            return Err(Error::ShapeMismatch(String::from("x, v and f must all be N x 3")));
        }
        let inv = |s: &Vec3| s.map(|x| 1.0 / x);
        let aligned = self.canonicalize(tape, params, x)?;
        let xn = tape.affine_cols(x, &stats.x_mean, &inv(&stats.x_std));
        let vn = tape.affine_cols(v, &stats.v_mean, &inv(&stats.v_std));
        let fnorm = tape.affine_cols(f, &stats.f_mean, &inv(&stats.f_std));
        let ea = self.embed_aligned.forward(tape, params, aligned)?;
        let ex = self.embed_position.forward(tape, params, xn)?;
        let ev = self.embed_velocity.forward(tape, params, vn)?;
        let ef = self.embed_force.forward(tape, params, fnorm)?;
        let h = tape.concat_cols(&[ea, ex, ev, ef, aligned, xn, vn, fnorm]);
        let out = self.head.forward(tape, params, h)?;
        Ok(tape.affine_cols(out, &[0.0; 3], &stats.dv_scale))
    }

    /// `v' = clamp(v + Δv)`, `x' = x + dt v'`, then constraints.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &Binding,
        stats: &IntegrationStats,
        ops: &FemOps,
        x: Var,
        v: Var,
        f: Var,
        dt: f64,
    ) -> Result<(Var, Var)> {
        let dv = self.delta_v(tape, params, stats, x, v, f)?;
        if !tape.value(dv).is_finite() {
            return Err(Error::NonFinite("velocity increment"));
        }
        let v1 = tape.add(v, dv);
        let v1 = tape.clamp_row_norm(v1, self.max_speed);
        Ok(ops.advance_and_constrain(tape, x, v1, dt))
    }
}

/// Rescales `v` to magnitude `max` when it is longer, keeping its direction.
pub fn clamp_speed(v: Vec3, max: f64) -> Vec3 {
    let n = crate::linalg::norm(v);
    if n > max {
        crate::linalg::scale(v, max / n)
    } else {
        v
    }
}

/// Inference wrapper reusing one tape across steps.
pub struct IntegrationModel<'a> {
    pub net: IntegrationNet,
    pub stats: IntegrationStats,
    store: &'a ParamStore,
    tape: Tape,
    params: Binding,
    mark: usize,
}

impl<'a> IntegrationModel<'a> {
    pub fn new(store: &'a ParamStore) -> Result<Self> {
        let net = IntegrationNet::new();
        let stats = IntegrationStats::load(store)?;
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, |_| false);
        let mark = tape.len();
        Ok(IntegrationModel {
            net,
            stats,
            store,
            tape,
            params,
            mark,
        })
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn canonicalize(&mut self, positions: &[Vec3]) -> Result<Vec<Vec3>> {
        let x = self.tape.constant(Tensor::from_vec3s(positions));
        let out = self.net.canonicalize(&mut self.tape, &self.params, x)?;
        let r = self.tape.value(out).to_vec3s();
        self.tape.truncate(self.mark);
        Ok(r)
    }

    pub fn predict_delta_v(&mut self, positions: &[Vec3], velocities: &[Vec3], forces: &[Vec3]) -> Result<Vec<Vec3>> {
        let x = self.tape.constant(Tensor::from_vec3s(positions));
        let v = self.tape.constant(Tensor::from_vec3s(velocities));
        let f = self.tape.constant(Tensor::from_vec3s(forces));
        let dv = self.net.delta_v(&mut self.tape, &self.params, &self.stats, x, v, f)?;
        let r = self.tape.value(dv).to_vec3s();
        self.tape.truncate(self.mark);
        Ok(r)
    }

    pub fn step(&mut self, ops: &FemOps, state: &SimState, forces: &[Vec3], dt: f64) -> Result<SimState> {
        let x = self.tape.constant(Tensor::from_vec3s(&state.positions));
        let v = self.tape.constant(Tensor::from_vec3s(&state.velocities));
        let f = self.tape.constant(Tensor::from_vec3s(forces));
        let result = self.net.step(&mut self.tape, &self.params, &self.stats, ops, x, v, f, dt);
        let out = result.map(|(x1, v1)| SimState {
            positions: self.tape.value(x1).to_vec3s(),
            velocities: self.tape.value(v1).to_vec3s(),
        });
        self.tape.truncate(self.mark);
        out
    }
}
