use rand::Rng;

use crate::tensor::{init_uniform, GroupId, ParamGroup, Tape, Var};

/// Fully connected stack `sizes[0] -> ... -> sizes[last]`; tensors are
/// `{prefix}.l{i}.w` (`[in, out]`) and `{prefix}.l{i}.b`.
pub fn build_mlp<R: Rng + ?Sized>(id: GroupId, prefix: &str, sizes: &[usize], rng: &mut R) -> ParamGroup {
    let mut g = ParamGroup::new(id);
    push_mlp(&mut g, prefix, sizes, rng);
    g
}

pub(crate) fn push_mlp<R: Rng + ?Sized>(g: &mut ParamGroup, prefix: &str, sizes: &[usize], rng: &mut R) {
    for (i, w) in sizes.windows(2).enumerate() {
        g.push(format!("{prefix}.l{i}.w"), init_uniform(rng, &[w[0], w[1]], w[0]));
        g.push(format!("{prefix}.l{i}.b"), init_uniform(rng, &[w[1]], w[0]));
    }
}

/// ReLU between layers, linear output. `params` alternates weight and bias.
pub fn mlp_forward(tape: &mut Tape, params: &[Var], x: Var) -> Var {
    let layers = params.len() / 2;
    let mut h = x;
    for i in 0..layers {
        h = tape.linear(h, params[2 * i], params[2 * i + 1]);
        if i + 1 < layers {
            h = tape.relu(h);
        }
    }
    h
}

