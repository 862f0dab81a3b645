//! Training loop, evaluation and run records.
//!
//! All randomness of a run derives from `TrainConfig::seed`: each consumer
//! draws from its own ChaCha8 stream of that seed (see [`Stream`]), so adding
//! draws in one consumer never shifts another.

mod augment;
mod config;
mod record;

pub use augment::{augment, augment_batch, crop_offsets, crop_with_offsets};
pub use config::{Ablation, TrainConfig};
pub use record::{EvalPoint, RunHeader, RunRecord};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::{random_action, Env, EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::replay::{ReplayMemory, Transition};
use crate::sac::Agent;
use crate::tensor::Tensor;

/// Independent random streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization.
    Init = 1,
    /// Per-episode environment reset seeds.
    EnvReset = 2,
    /// Replay sampling.
    Sampling = 3,
    /// Crop offsets.
    Augment = 4,
    /// Warmup actions and exploration noise.
    Acting = 5,
    /// Evaluation episode seeds.
    Eval = 6,
    /// Policy noise inside updates.
    Update = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Fresh agent for a config, initialized from the run's init stream.
pub fn build_agent(config: &TrainConfig, exec: Exec) -> Result<Agent> {
    let mut rng = stream_rng(config.seed, Stream::Init);
    Ok(Agent::new(
        config.effective_hierarchy(),
        config.model.clone(),
        config.sac.clone(),
        &mut rng,
    )?
    .with_exec(exec))
}

pub fn observation_tensor(obs: &Observation) -> Tensor {
    let g = obs.grid();
    Tensor::new(vec![1, g, g, obs.channels()], obs.to_floats()).expect("observation shape")
}

/// Runs one episode per seed with `policy` and returns the mean return.
pub fn evaluate_with<P>(env: &EnvConfig, seeds: &[u64], exec: Exec, policy: P) -> Result<f64>
where
    P: Fn(&Observation, &mut ChaCha8Rng) -> Result<Vec<f64>> + Sync + Send,
{
    if seeds.is_empty() {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let returns = par::map(exec, seeds.to_vec(), |seed| -> Result<f64> {
        let mut e = Env::new(env.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut obs = e.reset(seed);
        let mut total = 0.0;
        loop {
            let action = policy(&obs, &mut rng)?;
            let res = e.step(&action)?;
            total += res.reward;
            if res.done {
                return Ok(total);
            }
            obs = res.observation;
        }
    });
    let returns = returns.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(returns.iter().sum::<f64>() / returns.len() as f64)
}

/// Mean return of the deterministic (mean-action) policy.
pub fn evaluate(agent: &Agent, env: &EnvConfig, seeds: &[u64], exec: Exec) -> Result<f64> {
    evaluate_with(env, seeds, exec, |obs, rng| {
        let a = agent.act(&observation_tensor(obs), false, rng)?;
        Ok(a.data().to_vec())
    })
}

/// Mean return of the uniform random policy under the same harness.
pub fn evaluate_random(env: &EnvConfig, seeds: &[u64], exec: Exec) -> Result<f64> {
    let dim = env.action_dim();
    evaluate_with(env, seeds, exec, |_, rng| Ok(random_action(rng, dim)))
}

/// Evaluation seeds of checkpoint `index` (0-based).
pub fn eval_seeds(seed: u64, index: u64, episodes: usize) -> Vec<u64> {
    let mut rng = stream_rng(seed, Stream::Eval);
    rng.set_word_pos(u128::from(index) * 1024);
    (0..episodes).map(|_| rng.gen()).collect()
}

/// Result of [`train_run`].
pub struct TrainOutput {
    pub record: RunRecord,
    pub agent: Agent,
    /// Replay size at the end of the run.
    pub replay_len: usize,
}

/// Runs a full training job. `on_eval` sees every checkpoint as it is
/// produced. The record's checkpoint path is left unset.
pub fn train_run(config: &TrainConfig, exec: Exec, mut on_eval: impl FnMut(&EvalPoint)) -> Result<TrainOutput> {
    config.validate()?;
    let mut agent = build_agent(config, exec)?;
    let mut env = Env::new(config.env.clone())?;
    let mut replay = ReplayMemory::new(config.replay_capacity);
    let mut reset_rng = stream_rng(config.seed, Stream::EnvReset);
    let mut sample_rng = stream_rng(config.seed, Stream::Sampling);
    let mut aug_rng = stream_rng(config.seed, Stream::Augment);
    let mut act_rng = stream_rng(config.seed, Stream::Acting);
    let mut update_rng = stream_rng(config.seed, Stream::Update);
    let k = agent.hierarchy.config().k;
    let representation = config.representation_loss();
    let dim = config.env.action_dim();

    let mut record = RunRecord {
        header: RunHeader {
            task: config.env.variant_name(),
            ablation: config.ablation.name().to_string(),
            seed: config.seed,
            config_hash: config.hash(),
            max_return: config.env.max_return(),
            checkpoint: None,
        },
        points: Vec::new(),
    };

    let mut obs = env.reset(reset_rng.gen());
    for step in 0..config.total_steps {
        let action = if step < config.initial_steps {
            random_action(&mut act_rng, dim)
        } else {
            agent.act(&observation_tensor(&obs), true, &mut act_rng)?.data().to_vec()
        };
        let res = env.step(&action)?;
        replay.append(Transition {
            obs: obs.clone(),
            action,
            reward: res.reward,
            next_obs: res.observation.clone(),
            done: res.done,
        });
        obs = if res.done {
            env.reset(reset_rng.gen())
        } else {
            res.observation
        };

        if step >= config.initial_steps {
            let batch = replay.sample_trajectories(config.batch_size, k, &mut sample_rng)?;
            let batch = augment_batch(&batch, config.image_pad, &mut aug_rng)?;
            agent.update(&batch, representation, &mut update_rng)?;
        }

        if (step + 1) % config.eval_every == 0 {
            let index = (step + 1) / config.eval_every - 1;
            let seeds = eval_seeds(config.seed, index, config.eval_episodes);
            let mean_return = evaluate(&agent, &config.env, &seeds, exec)?;
            if !mean_return.is_finite() {
                return Err(Error::NonFinite(format!("evaluation return at step {}", step + 1)));
            }
            let point = EvalPoint {
                step: step + 1,
                mean_return,
            };
            on_eval(&point);
            record.points.push(point);
        }
    }
    Ok(TrainOutput {
        record,
        replay_len: replay.len(),
        agent,
    })
}
