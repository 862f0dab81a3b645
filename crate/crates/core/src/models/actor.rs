use rand::Rng;

use super::mlp::{mlp_forward, push_mlp};
use super::ModelDims;
use crate::error::{Error, Result};
use crate::tensor::{GroupId, ParamGroup, Tape, Tensor, Var};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
const SQUASH_EPS: f64 = 1e-6;
const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Gaussian policy head over `levels * dim(z)` inputs; outputs mean and
/// log-std per action dimension.
pub fn build_actor<R: Rng + ?Sized>(id: GroupId, dims: &ModelDims, levels: usize, rng: &mut R) -> ParamGroup {
    let mut g = ParamGroup::new(id);
    push_mlp(
        &mut g,
        "actor",
        &[levels * dims.z_dim, dims.hidden, dims.hidden, 2 * dims.action_dim],
        rng,
    );
    g
}

#[derive(Clone, Copy, Debug)]
pub enum ActorMode<'a> {
    /// Reparameterized sample `tanh(mean + std * noise)`; `noise` is `[B, dim(A)]`
    /// standard normal.
    Stochastic(&'a Tensor),
    /// `tanh(mean)`.
    Mean,
}

pub struct ActorOutput {
    /// Squashed action `[B, dim(A)]`.
    pub action: Var,
    /// Log-density of `action` under the squashed Gaussian, `[B, 1]`.
    pub log_prob: Var,
    /// Pre-squash mean `[B, dim(A)]`.
    pub mean: Var,
    /// Bounded log-std `[B, dim(A)]`.
    pub log_std: Var,
}

pub fn actor_sample(tape: &mut Tape, params: &[Var], z: Var, mode: ActorMode<'_>) -> Result<ActorOutput> {
    let in_dim = tape.value(params[0]).rows();
    if tape.value(z).cols() != in_dim || tape.value(z).shape().len() != 2 {
        return Err(Error::shape(format!(
            "actor expects [B, {in_dim}] inputs, got {:?}",
            tape.value(z).shape()
        )));
    }
    let out = mlp_forward(tape, params, z);
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("actor output".into()));
    }
    let a_dim = tape.value(out).cols() / 2;
    let mean = tape.slice_cols(out, 0, a_dim);
    let raw = tape.slice_cols(out, a_dim, a_dim);
    // Smoothly rescale into [LOG_STD_MIN, LOG_STD_MAX].
    let squashed = tape.tanh(raw);
    let unit = tape.add_scalar(squashed, 1.0);
    let spread = tape.scale(unit, 0.5 * (LOG_STD_MAX - LOG_STD_MIN));
    let log_std = tape.add_scalar(spread, LOG_STD_MIN);

    let (pre, gauss) = match mode {
        ActorMode::Stochastic(noise) => {
            let b = tape.value(z).rows();
            if noise.shape() != [b, a_dim] {
                return Err(Error::shape(format!(
                    "actor noise must be [{b}, {a_dim}], got {:?}",
                    noise.shape()
                )));
            }
            let eps = tape.constant(noise.clone());
            let std = tape.exp(log_std);
            let shift = tape.mul(std, eps);
            let pre = tape.add(mean, shift);
            let sq = tape.square(eps);
            (pre, Some(sq))
        }
        ActorMode::Mean => (mean, None),
    };
    let action = tape.tanh(pre);

    // log N(u; mean, std) = -0.5 eps^2 - log_std - log sqrt(2 pi)
    let mut per_dim = tape.neg(log_std);
    if let Some(sq) = gauss {
        let half = tape.scale(sq, -0.5);
        per_dim = tape.add(per_dim, half);
    }
    per_dim = tape.add_scalar(per_dim, -LOG_SQRT_2PI);
    let a2 = tape.square(action);
    let na2 = tape.neg(a2);
    let jac = tape.add_scalar(na2, 1.0 + SQUASH_EPS);
    let log_jac = tape.log(jac);
    let per_dim = tape.sub(per_dim, log_jac);
    let log_prob = tape.sum_cols(per_dim);
    Ok(ActorOutput {
        action,
        log_prob,
        mean,
        log_std,
    })
}
