//! Multi-input GRU forward model.
//!
//! The GRU pathway follows the usual update/reset gates with inputs
//! `[a | z]`. Cells below the top level carry a second, identically shaped
//! pathway driven by the communication message `C` in place of the action;
//! the cell output is the mean of the two pathways.

use rand::Rng;

use super::ModelDims;
use crate::error::{Error, Result};
use crate::tensor::{init_uniform, GroupId, ParamGroup, Tape, Var};

const GRU_TENSORS: usize = 6;

/// `action_inputs` is the width of the concatenated action block (n * dim(A)).
pub fn build_forward_cell<R: Rng + ?Sized>(
    id: GroupId,
    dims: &ModelDims,
    action_inputs: usize,
    with_comm: bool,
    rng: &mut R,
) -> ParamGroup {
    let z = dims.z_dim;
    let mut g = ParamGroup::new(id);
    let fan = action_inputs + z;
    for gate in ["u", "r", "h"] {
        g.push(format!("gru.{gate}.w"), init_uniform(rng, &[fan, z], fan));
        g.push(format!("gru.{gate}.b"), init_uniform(rng, &[z], fan));
    }
    if with_comm {
        let fan = 2 * z;
        for gate in ["u", "r", "h"] {
            g.push(format!("comm.{gate}.w"), init_uniform(rng, &[fan, z], fan));
            g.push(format!("comm.{gate}.b"), init_uniform(rng, &[z], fan));
        }
    }
    g
}

/// Whether a bound forward cell carries the communication pathway.
pub fn has_comm_pathway(params: &[Var]) -> bool {
    params.len() == 2 * GRU_TENSORS
}

pub struct CellInputs {
    /// Previous latent `[B, z]`.
    pub z_prev: Var,
    /// Concatenated action block `[B, n * dim(A)]`.
    pub actions: Var,
    /// Message from the coarser level, `[B, z]`; required exactly when the
    /// cell has a communication pathway.
    pub message: Option<Var>,
}

fn one_minus(tape: &mut Tape, x: Var) -> Var {
    let n = tape.neg(x);
    tape.add_scalar(n, 1.0)
}

/// `(1 - u) * z + u * h` with `u = σ(f_u([x | z]))`,
/// `r = σ(f_r([x | z]))`, `h = tanh(f_h(gated))`.
fn gru_pathway(tape: &mut Tape, p: &[Var], x: Var, z: Var, x_gated_first: bool) -> Var {
    let xz = tape.concat(&[x, z]);
    let u_pre = tape.linear(xz, p[0], p[1]);
    let u = tape.sigmoid(u_pre);
    let r_pre = tape.linear(xz, p[2], p[3]);
    let r = tape.sigmoid(r_pre);
    let h_in = if x_gated_first {
        // Communication pathway: [r ⊙ C | z].
        let rx = tape.mul(r, x);
        tape.concat(&[rx, z])
    } else {
        // GRU pathway: [r ⊙ z | a].
        let rz = tape.mul(r, z);
        tape.concat(&[rz, x])
    };
    let h_pre = tape.linear(h_in, p[4], p[5]);
    let h = tape.tanh(h_pre);
    let keep = one_minus(tape, u);
    let a = tape.mul(keep, z);
    let b = tape.mul(u, h);
    tape.add(a, b)
}

pub fn forward_cell(tape: &mut Tape, params: &[Var], inputs: CellInputs) -> Result<Var> {
    let z_dim = tape.value(params[0]).cols();
    let a_dim = tape.value(params[0]).rows() - z_dim;
    let zt = tape.value(inputs.z_prev);
    if zt.cols() != z_dim || tape.value(inputs.actions).cols() != a_dim {
        return Err(Error::shape(format!(
            "forward cell expects z of width {z_dim} and actions of width {a_dim}, got {} and {}",
            zt.cols(),
            tape.value(inputs.actions).cols()
        )));
    }
    let g_gru = gru_pathway(tape, &params[..GRU_TENSORS], inputs.actions, inputs.z_prev, false);
    match (has_comm_pathway(params), inputs.message) {
        (false, None) => Ok(g_gru),
        (true, Some(c)) => {
            if tape.value(c).cols() != z_dim {
                return Err(Error::shape("message width must equal dim(z)"));
            }
            let g_c = gru_pathway(tape, &params[GRU_TENSORS..], c, inputs.z_prev, true);
            let s = tape.add(g_c, g_gru);
            Ok(tape.scale(s, 0.5))
        }
        (true, None) => Err(Error::invalid(
            "forward cell below the top level needs a communication message",
        )),
        (false, Some(_)) => Err(Error::invalid(
            "top-level forward cell does not take a communication message",
        )),
    }
}
