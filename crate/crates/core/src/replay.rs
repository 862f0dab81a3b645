//! Episode-structured replay memory serving fixed-length trajectory batches.

use std::collections::VecDeque;

use rand::Rng;

use crate::envs::{Frame, Observation, FRAME_STACK};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One environment transition as produced by the trainer.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Observation,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
}

#[derive(Clone, Debug)]
struct Episode {
    id: u64,
    /// Observation `t` is `frames[t..t + FRAME_STACK]`.
    frames: Vec<Frame>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    complete: bool,
}

impl Episode {
    fn len(&self) -> usize {
        self.actions.len()
    }

    fn observation(&self, t: usize) -> Observation {
        Observation::from_frames([
            self.frames[t].clone(),
            self.frames[t + 1].clone(),
            self.frames[t + 2].clone(),
        ])
    }
}

/// Ring buffer of whole episodes. Capacity is counted in transitions and
/// eviction drops the oldest complete episode.
#[derive(Clone, Debug)]
pub struct ReplayMemory {
    capacity: usize,
    episodes: VecDeque<Episode>,
    transitions: usize,
    next_id: u64,
}

/// `B` trajectories of `k` steps: `k + 1` observations, `k` actions and
/// `k` rewards each, all inside a single episode.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    pub k: usize,
    /// `k + 1` tensors of shape `[B, G, G, 9]`.
    pub obs: Vec<Tensor>,
    /// `k` tensors of shape `[B, action_dim]`.
    pub actions: Vec<Tensor>,
    /// `[B, k]`.
    pub rewards: Tensor,
    pub episode_ids: Vec<u64>,
    /// 0-based index of each trajectory's first observation in its episode.
    pub starts: Vec<usize>,
}

impl TrajectoryBatch {
    pub fn batch_size(&self) -> usize {
        self.episode_ids.len()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Tensor::cols)
    }

    /// Rewards of trajectory `i`.
    pub fn rewards_of(&self, i: usize) -> &[f64] {
        self.rewards.row(i)
    }

    /// Actions `a_{from} .. a_{from + count - 1}` concatenated per row:
    /// `[B, count * action_dim]`.
    pub fn action_block(&self, from: usize, count: usize) -> Tensor {
        let b = self.batch_size();
        let da = self.action_dim();
        let mut data = Vec::with_capacity(b * count * da);
        for i in 0..b {
            for t in from..from + count {
                data.extend_from_slice(self.actions[t].row(i));
            }
        }
        Tensor::from_parts(vec![b, count * da], data)
    }

    /// Observations at the given time indices stacked along the batch axis,
    /// time-major: `[times.len() * B, G, G, 9]`.
    pub fn obs_at(&self, times: &[usize]) -> Tensor {
        let parts: Vec<&Tensor> = times.iter().map(|t| &self.obs[*t]).collect();
        Tensor::concat_rows(&parts).expect("observation tensors share a shape")
    }
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            episodes: VecDeque::new(),
            transitions: 0,
            next_id: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored transitions.
    pub fn len(&self) -> usize {
        self.transitions
    }

    pub fn is_empty(&self) -> bool {
        self.transitions == 0
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn num_complete_episodes(&self) -> usize {
        self.episodes.iter().filter(|e| e.complete).count()
    }

    /// Ids of stored episodes, oldest first.
    pub fn episode_ids(&self) -> Vec<u64> {
        self.episodes.iter().map(|e| e.id).collect()
    }

    /// Length in transitions of a stored episode.
    pub fn episode_len(&self, id: u64) -> Option<usize> {
        self.episodes.iter().find(|e| e.id == id).map(Episode::len)
    }

    /// Stores one transition. The first transition after a `done` (or the
    /// very first one) opens a new episode.
    pub fn append(&mut self, t: Transition) {
        let open = self.episodes.back().is_some_and(|e| !e.complete);
        if !open {
            let id = self.next_id;
            self.next_id += 1;
            self.episodes.push_back(Episode {
                id,
                frames: t.obs.frames().to_vec(),
                actions: Vec::new(),
                rewards: Vec::new(),
                complete: false,
            });
        }
        let ep = self.episodes.back_mut().expect("an open episode exists");
        ep.frames.push(t.next_obs.frames()[FRAME_STACK - 1].clone());
        ep.actions.push(t.action);
        ep.rewards.push(t.reward);
        ep.complete = t.done;
        self.transitions += 1;

        while self.transitions > self.capacity {
            let Some(front) = self.episodes.front() else { break };
            if !front.complete {
                break;
            }
            self.transitions -= front.len();
            self.episodes.pop_front();
        }
    }

    /// Samples `batch` trajectories of length `k`: an eligible episode
    /// uniformly, then a start uniformly over its valid range.
    pub fn sample_trajectories<R: Rng + ?Sized>(
        &self,
        batch: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<TrajectoryBatch> {
        if k == 0 || batch == 0 {
            return Err(Error::invalid("batch size and k must be positive"));
        }
        let eligible: Vec<&Episode> = self.episodes.iter().filter(|e| e.len() > k).collect();
        if eligible.is_empty() {
            return Err(Error::Replay(format!(
                "no stored episode has at least {} transitions; collect more data before sampling",
                k + 1
            )));
        }
        let first = eligible[0].observation(0);
        let (g, ch) = (first.grid(), first.channels());
        let obs_len = first.float_len();
        let action_dim = eligible[0].actions[0].len();

        let mut obs: Vec<Vec<f64>> = (0..=k).map(|_| vec![0.0; batch * obs_len]).collect();
        let mut actions: Vec<Vec<f64>> = (0..k).map(|_| Vec::with_capacity(batch * action_dim)).collect();
        let mut rewards = Vec::with_capacity(batch * k);
        let mut episode_ids = Vec::with_capacity(batch);
        let mut starts = Vec::with_capacity(batch);

        for b in 0..batch {
            let ep = eligible[rng.gen_range(0..eligible.len())];
            // Valid 0-based starts are 0..T-k, i.e. 1..=T-k counted from one.
            let start = rng.gen_range(0..ep.len() - k);
            for t in 0..=k {
                ep.observation(start + t)
                    .write_floats(&mut obs[t][b * obs_len..(b + 1) * obs_len]);
            }
            for t in 0..k {
                actions[t].extend_from_slice(&ep.actions[start + t]);
                rewards.push(ep.rewards[start + t]);
            }
            episode_ids.push(ep.id);
            starts.push(start);
        }
        Ok(TrajectoryBatch {
            k,
            obs: obs
                .into_iter()
                .map(|d| Tensor::from_parts(vec![batch, g, g, ch], d))
                .collect(),
            actions: actions
                .into_iter()
                .map(|d| Tensor::from_parts(vec![batch, action_dim], d))
                .collect(),
            rewards: Tensor::from_parts(vec![batch, k], rewards),
            episode_ids,
            starts,
        })
    }
}

/// `sum_{i<n} gamma^i r[start + i] + gamma^n * bootstrap`.
pub fn n_step_return(rewards: &[f64], start: usize, n: usize, gamma: f64, bootstrap: f64) -> Result<f64> {
    if start + n > rewards.len() {
        return Err(Error::invalid(format!(
            "{n}-step return from {start} exceeds a trajectory of {} rewards",
            rewards.len()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid("gamma must lie in [0, 1)"));
    }
    let mut acc = 0.0;
    let mut disc = 1.0;
    for r in &rewards[start..start + n] {
        acc += disc * r;
        disc *= gamma;
    }
    Ok(acc + disc * bootstrap)
}
