//! Replicate-pad then random-crop augmentation, one offset per trajectory.

use rand::Rng;

use crate::error::{Error, Result};
use crate::replay::TrajectoryBatch;
use crate::tensor::Tensor;

/// Crops `[B, G, G, C]` observation tensors after replicate padding by `pad`.
/// `offsets[b] = (dy, dx)` in `0..=2 * pad` applies to row `b` of every
/// tensor, so all observations of one trajectory share a crop.
pub fn crop_with_offsets(obs: &[Tensor], pad: usize, offsets: &[(usize, usize)]) -> Result<Vec<Tensor>> {
    let Some(first) = obs.first() else {
        return Ok(Vec::new());
    };
    let shape = first.shape().to_vec();
    if shape.len() != 4 || shape[1] != shape[2] {
        return Err(Error::shape(format!("augment expects [B, G, G, C] frames, got {shape:?}")));
    }
    let (b, g, c) = (shape[0], shape[1], shape[3]);
    if pad >= g {
        return Err(Error::invalid(format!("pad {pad} must be smaller than the frame side {g}")));
    }
    if offsets.len() != b || offsets.iter().any(|(y, x)| *y > 2 * pad || *x > 2 * pad) {
        return Err(Error::invalid("one crop offset in 0..=2*pad per trajectory required"));
    }
    if pad == 0 {
        return Ok(obs.to_vec());
    }
    let frame = g * g * c;
    obs.iter()
        .map(|t| {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("observation tensors differ in shape"));
            }
            let src = t.data();
            let mut out = vec![0.0; src.len()];
            for (bi, (dy, dx)) in offsets.iter().enumerate() {
                let base = bi * frame;
                for y in 0..g {
                    // Row of the padded image, mapped back by clamping.
                    let sy = (y + dy).saturating_sub(pad).min(g - 1);
                    for x in 0..g {
                        let sx = (x + dx).saturating_sub(pad).min(g - 1);
                        let s = base + (sy * g + sx) * c;
                        let d = base + (y * g + x) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
            Tensor::new(shape.clone(), out)
        })
        .collect()
}

/// Random crop offsets for `batch` trajectories.
pub fn crop_offsets<R: Rng + ?Sized>(batch: usize, pad: usize, rng: &mut R) -> Vec<(usize, usize)> {
    (0..batch)
        .map(|_| (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad)))
        .collect()
}

pub fn augment<R: Rng + ?Sized>(obs: &[Tensor], pad: usize, rng: &mut R) -> Result<Vec<Tensor>> {
    let b = obs.first().map_or(0, Tensor::rows);
    let offsets = crop_offsets(b, pad, rng);
    crop_with_offsets(obs, pad, &offsets)
}

/// Augmented copy of a trajectory batch.
pub fn augment_batch<R: Rng + ?Sized>(batch: &TrajectoryBatch, pad: usize, rng: &mut R) -> Result<TrajectoryBatch> {
    Ok(TrajectoryBatch {
        obs: augment(&batch.obs, pad, rng)?,
        ..batch.clone()
    })
}
