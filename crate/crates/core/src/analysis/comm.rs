use rand::Rng;

use crate::envs::EpisodeLog;
use crate::error::{Error, Result};
use crate::sac::Agent;
use crate::tensor::{Mode, Tape, Tensor};

use super::observations;

/// Communication-manager outputs received by the finest level over
/// `num_trajectories` windows sampled uniformly from `episodes`.
/// `out[i][t]` is the message for lower-level step `t + 1` of trajectory `i`.
pub fn comm_messages<R: Rng + ?Sized>(
    agent: &Agent,
    episodes: &[EpisodeLog],
    num_trajectories: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let h = &agent.hierarchy;
    if h.levels() < 2 {
        return Err(Error::invalid("communication analysis needs at least two levels"));
    }
    if h.comm[0].is_none() {
        return Err(Error::invalid("agent has no communication manager"));
    }
    let k = h.config().k;
    let usable: Vec<&EpisodeLog> = episodes.iter().filter(|e| e.len() >= k).collect();
    if usable.is_empty() || num_trajectories == 0 {
        return Err(Error::invalid(format!("need at least one episode of {k} steps and one trajectory")));
    }
    let picks: Vec<(&EpisodeLog, usize)> = (0..num_trajectories)
        .map(|_| {
            let ep = usable[rng.gen_range(0..usable.len())];
            (ep, rng.gen_range(0..=ep.len() - k))
        })
        .collect();
    let parts = picks
        .iter()
        .map(|(ep, s)| observations(ep, &[*s]))
        .collect::<Result<Vec<_>>>()?;
    let obs = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
    let actions = (0..k)
        .map(|i| {
            let rows: Vec<Vec<f64>> = picks.iter().map(|(ep, s)| ep.actions[s + i].clone()).collect();
            Tensor::from_rows(&rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let bound = h.bind(&mut tape, Mode::Frozen);
    let rollouts = h.rollout(&mut tape, &bound, &obs, &actions)?;
    let finest = rollouts
        .iter()
        .find(|r| r.level == 0)
        .ok_or_else(|| Error::invalid("rollout is missing the finest level"))?;
    Ok((0..num_trajectories)
        .map(|i| finest.messages.iter().map(|&m| tape.value(m).row(i).to_vec()).collect())
        .collect())
}

/// Pairwise distances between message vectors of one trajectory.
pub fn pairwise_distances(messages: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = messages.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = messages[i]
                .iter()
                .zip(&messages[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Element-wise mean over trajectories of the per-step distance matrices
/// of the finest level's messages.
pub fn c_distance_matrix<R: Rng + ?Sized>(
    agent: &Agent,
    episodes: &[EpisodeLog],
    num_trajectories: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let messages = comm_messages(agent, episodes, num_trajectories, rng)?;
    let n = messages[0].len();
    let mut sum = vec![vec![0.0; n]; n];
    for traj in &messages {
        for (row, d) in sum.iter_mut().zip(pairwise_distances(traj)) {
            for (s, x) in row.iter_mut().zip(d) {
                *s += x;
            }
        }
    }
    let m = messages.len() as f64;
    Ok(sum.into_iter().map(|r| r.into_iter().map(|x| x / m).collect()).collect())
}
