use rand::Rng;

use super::mlp::{mlp_forward, push_mlp};
use super::ModelDims;
use crate::error::{Error, Result};
use crate::tensor::{GroupId, ParamGroup, Tape, Var};

const TENSORS_PER_HEAD: usize = 6;

/// One or two Q heads on `[z | a]`, each `z + dim(A) -> hidden -> hidden -> 1`.
pub fn build_critic<R: Rng + ?Sized>(id: GroupId, dims: &ModelDims, rng: &mut R) -> ParamGroup {
    let mut g = ParamGroup::new(id);
    let sizes = [dims.z_dim + dims.action_dim, dims.hidden, dims.hidden, 1];
    push_mlp(&mut g, "q1", &sizes, rng);
    if dims.twin_q {
        push_mlp(&mut g, "q2", &sizes, rng);
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Both,
    Min,
}

pub struct CriticOutput {
    /// Per-head values, each `[B, 1]`.
    pub heads: Vec<Var>,
    /// Element-wise minimum over heads; present for [`Reduce::Min`].
    pub min: Option<Var>,
}

pub fn critic_eval(tape: &mut Tape, params: &[Var], z: Var, action: Var, reduce: Reduce) -> Result<CriticOutput> {
    let in_dim = tape.value(params[0]).rows();
    let (zs, as_) = (tape.value(z).shape().to_vec(), tape.value(action).shape().to_vec());
    if zs.len() != 2 || as_.len() != 2 || zs[0] != as_[0] || zs[1] + as_[1] != in_dim {
        return Err(Error::shape(format!(
            "critic expects [B, z] and [B, a] with z + a = {in_dim}, got {zs:?} and {as_:?}"
        )));
    }
    let x = tape.concat(&[z, action]);
    let heads: Vec<Var> = params
        .chunks(TENSORS_PER_HEAD)
        .map(|p| mlp_forward(tape, p, x))
        .collect();
    let min = match reduce {
        Reduce::Both => None,
        Reduce::Min => Some(
            heads[1..]
                .iter()
                .fold(heads[0], |m, h| tape.minimum(m, *h)),
        ),
    };
    Ok(CriticOutput { heads, min })
}
