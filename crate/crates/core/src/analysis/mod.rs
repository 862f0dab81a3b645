//! Post-training analyses: linear probes of what each level's latents
//! encode, and the geometry of communication-manager outputs.

mod comm;
mod pca;
mod probe;

pub use comm::{c_distance_matrix, comm_messages, pairwise_distances};
pub use pca::{pca_project, Pca};
pub use probe::{
    collect_random_episodes, fit_linear_probe, probe_rollout_error, Factor, LinearProbe, OracleSubject,
    ProbeErrorRow, ProbeSubject,
};

use crate::envs::EpisodeLog;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Observations `times` of `episode` stacked into `[n, G, G, C]`.
fn observations(episode: &EpisodeLog, times: &[usize]) -> Result<Tensor> {
    let mut shape = None;
    let mut data = Vec::new();
    for &t in times {
        if t > episode.len() {
            return Err(Error::invalid(format!(
                "observation {t} is past the end of episode {} ({} steps)",
                episode.id,
                episode.len()
            )));
        }
        let o = episode.observation(t);
        shape.get_or_insert([o.grid(), o.grid(), o.channels()]);
        data.extend(o.to_floats());
    }
    let [g, _, c] = shape.ok_or_else(|| Error::invalid("no observations requested"))?;
    Tensor::new(vec![times.len(), g, g, c], data)
}
