use rand::Rng;

use super::ModelDims;
use crate::error::{Error, Result};
use crate::tensor::{init_uniform, GroupId, Mode, ParamGroup, Tape, Tensor, Var};

/// Conv stack (3x3, ReLU after each layer) -> linear to dim(z) -> layer norm.
pub fn build_encoder<R: Rng + ?Sized>(id: GroupId, dims: &ModelDims, rng: &mut R) -> ParamGroup {
    let mut g = ParamGroup::new(id);
    let mut in_ch = dims.channels;
    for i in 0..dims.conv_strides.len() {
        let fan_in = 9 * in_ch;
        g.push(format!("conv{i}.w"), init_uniform(rng, &[fan_in, dims.conv_filters], fan_in));
        g.push(format!("conv{i}.b"), init_uniform(rng, &[dims.conv_filters], fan_in));
        in_ch = dims.conv_filters;
    }
    let side = dims.conv_out_side();
    let flat = side * side * dims.conv_filters;
    g.push("fc.w", init_uniform(rng, &[flat, dims.z_dim], flat));
    g.push("fc.b", init_uniform(rng, &[dims.z_dim], flat));
    g.push("ln.gain", Tensor::filled(&[dims.z_dim], 1.0));
    g.push("ln.bias", Tensor::zeros(&[dims.z_dim]));
    g
}

/// Encodes a `[B, G, G, C]` observation batch into `[B, z]`.
pub fn encode(tape: &mut Tape, params: &[Var], dims: &ModelDims, obs: Var) -> Result<Var> {
    let shape = tape.value(obs).shape().to_vec();
    if shape.len() != 4 || shape[1] != dims.grid || shape[2] != dims.grid || shape[3] != dims.channels {
        return Err(Error::shape(format!(
            "encoder expects [B, {g}, {g}, {c}] observations, got {shape:?}",
            g = dims.grid,
            c = dims.channels
        )));
    }
    let layers = dims.conv_strides.len();
    let mut h = obs;
    for (i, s) in dims.conv_strides.iter().enumerate() {
        h = tape.conv2d(h, params[2 * i], params[2 * i + 1], *s, 1);
        h = tape.relu(h);
    }
    let b = shape[0];
    let flat = tape.value(h).len() / b.max(1);
    h = tape.reshape(h, &[b, flat]);
    let base = 2 * layers;
    h = tape.linear(h, params[base], params[base + 1]);
    Ok(tape.layer_norm(h, params[base + 2], params[base + 3]))
}

/// Gradient-free encoding of a tensor batch, evaluated in row chunks.
pub fn encode_tensor(group: &ParamGroup, dims: &ModelDims, obs: &Tensor) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let n = obs.rows();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let mut tape = Tape::new();
        let p = tape.bind(group, Mode::Frozen);
        let x = tape.constant(if len == n { obs.clone() } else { obs.slice_rows(start, len)? });
        let z = encode(&mut tape, &p, dims, x)?;
        parts.push(tape.value(z).clone());
        start += len;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}
