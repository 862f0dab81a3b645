//! Learnable components: pixel encoder, multi-input GRU forward cell,
//! communication manager, projection head, actor, twin critic, and the EMA
//! used for momentum copies.
//!
//! Each network is a [`ParamGroup`] with a fixed tensor layout plus free
//! functions that build its forward pass on a [`Tape`].

mod actor;
mod critic;
mod encoder;
mod forward_cell;
mod mlp;

pub use actor::{actor_sample, build_actor, ActorMode, ActorOutput, LOG_STD_MAX, LOG_STD_MIN};
pub use critic::{build_critic, critic_eval, CriticOutput, Reduce};
pub use encoder::{build_encoder, encode, encode_tensor};
pub use forward_cell::{build_forward_cell, forward_cell, CellInputs};
pub use mlp::{build_mlp, mlp_forward};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, Tape, Var};

/// Sizes of every network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Frame side length.
    pub grid: usize,
    /// Stacked input channels (3 frames x RGB).
    pub channels: usize,
    /// Filters per convolution layer.
    pub conv_filters: usize,
    /// Stride of each convolution layer.
    pub conv_strides: Vec<usize>,
    /// Latent size, dim(z).
    pub z_dim: usize,
    pub action_dim: usize,
    pub comm_hidden: usize,
    pub projection_hidden: usize,
    /// Hidden width of the actor and critic MLPs.
    pub hidden: usize,
    /// Two Q heads per critic (clipped double-Q) instead of one.
    pub twin_q: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            grid: 24,
            channels: 9,
            conv_filters: 16,
            conv_strides: vec![2, 1],
            z_dim: 50,
            action_dim: 2,
            comm_hidden: 128,
            projection_hidden: 128,
            hidden: 256,
            twin_q: true,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.conv_strides.is_empty() || self.conv_strides.iter().any(|s| *s != 1 && *s != 2) {
            return Err(Error::Config("conv strides must be 1 or 2 and non-empty".into()));
        }
        for (name, v) in [
            ("grid", self.grid),
            ("channels", self.channels),
            ("conv_filters", self.conv_filters),
            ("z_dim", self.z_dim),
            ("action_dim", self.action_dim),
            ("comm_hidden", self.comm_hidden),
            ("projection_hidden", self.projection_hidden),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Spatial size after the convolution stack (3x3, padding 1).
    pub fn conv_out_side(&self) -> usize {
        self.conv_strides
            .iter()
            .fold(self.grid, |side, s| (side - 1) / s + 1)
    }
}

/// Communication manager: ReLU MLP from all representations of the coarser
/// level plus a one-hot step of the finer level to a message of size dim(z).
pub fn build_comm_manager<R: rand::Rng + ?Sized>(
    id: crate::tensor::GroupId,
    dims: &ModelDims,
    upper_steps: usize,
    lower_steps: usize,
    rng: &mut R,
) -> ParamGroup {
    let input = (upper_steps + 1) * dims.z_dim + lower_steps;
    build_mlp(id, "comm", &[input, dims.comm_hidden, dims.z_dim], rng)
}

/// Message for the finer level. `level_reps` is `[B, (N+1) * z]` in
/// chronological order, `t_onehot` is `[B, N_lower]`.
pub fn communicate(tape: &mut Tape, params: &[Var], level_reps: Var, t_onehot: Var) -> Result<Var> {
    let in_dim = tape.value(params[0]).rows();
    let got = tape.value(level_reps).cols() + tape.value(t_onehot).cols();
    if got != in_dim || tape.value(level_reps).rows() != tape.value(t_onehot).rows() {
        return Err(Error::shape(format!(
            "communication manager expects {in_dim} inputs, got {got}"
        )));
    }
    let x = tape.concat(&[level_reps, t_onehot]);
    Ok(mlp_forward(tape, params, x))
}

/// Row vector one-hot of the 1-based step `t` out of `n`.
pub fn one_hot(t: usize, n: usize) -> Result<Vec<f64>> {
    if t == 0 || t > n {
        return Err(Error::invalid(format!("step {t} outside 1..={n}")));
    }
    let mut v = vec![0.0; n];
    v[t - 1] = 1.0;
    Ok(v)
}

/// Projection head `w`: z -> hidden -> z with a ReLU in between.
pub fn build_projection<R: rand::Rng + ?Sized>(
    id: crate::tensor::GroupId,
    dims: &ModelDims,
    rng: &mut R,
) -> ParamGroup {
    build_mlp(id, "proj", &[dims.z_dim, dims.projection_hidden, dims.z_dim], rng)
}

pub fn project(tape: &mut Tape, params: &[Var], z: Var) -> Result<Var> {
    let in_dim = tape.value(params[0]).rows();
    if tape.value(z).cols() != in_dim {
        return Err(Error::shape(format!(
            "projection expects {in_dim} inputs, got {}",
            tape.value(z).cols()
        )));
    }
    Ok(mlp_forward(tape, params, z))
}

/// `momentum <- (1 - tau) * momentum + tau * online`, element-wise.
pub fn ema_update(online: &ParamGroup, momentum: &mut ParamGroup, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("EMA rate {tau} outside (0, 1]")));
    }
    momentum.check_aligned(online)?;
    for (m, o) in momentum.tensors_mut().iter_mut().zip(online.tensors()) {
        for (mv, ov) in m.data_mut().iter_mut().zip(o.data()) {
            *mv = if tau == 1.0 { *ov } else { (1.0 - tau) * *mv + tau * ov };
        }
    }
    Ok(())
}
