//! Toy partially observable control tasks rendered to small RGB frames.
//!
//! Both tasks share one state layout: a directly actuated body (the "cup",
//! or the end-effector for the reacher) and a second body (the tethered
//! "ball", or the static target). The cup responds to force within a single
//! sub-step while the ball only moves once the tether is taut, which gives
//! the catch task a fast and a slow state factor.

pub mod constants;
mod distractor;
mod render;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use distractor::{apply_distractor, Difficulty, DistractorKind};
pub use render::{render_clean, Frame, FloatFrame};

use crate::error::{Error, Result};
use constants::*;

/// Number of frames in an observation.
pub const FRAME_STACK: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    TwoTimescaleCatch,
    PointReacher,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::TwoTimescaleCatch => "two-timescale-catch",
            Task::PointReacher => "point-reacher",
        }
    }
}

/// Physical constants. The defaults are the frozen values in [`constants`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Physics {
    pub dt: f64,
    pub tether_stiffness: f64,
    pub tether_length: f64,
    pub ball_damping: f64,
    pub cup_damping: f64,
    pub cup_mass: f64,
    pub ball_mass: f64,
    pub force_scale: f64,
    pub catch_radius: f64,
    pub reach_radius: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Self {
            dt: DT,
            tether_stiffness: TETHER_STIFFNESS,
            tether_length: TETHER_LENGTH,
            ball_damping: BALL_DAMPING,
            cup_damping: CUP_DAMPING,
            cup_mass: CUP_MASS,
            ball_mass: BALL_MASS,
            force_scale: FORCE_SCALE,
            catch_radius: CATCH_RADIUS,
            reach_radius: REACH_RADIUS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub task: Task,
    pub distractor: DistractorKind,
    pub difficulty: Difficulty,
    pub action_repeat: usize,
    /// Episode length in agent steps.
    pub episode_length: usize,
    /// Side length of the square frames.
    pub grid: usize,
    pub physics: Physics,
    /// Mixed into the per-episode seed to drive distractor draws.
    pub distractor_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: Task::TwoTimescaleCatch,
            distractor: DistractorKind::None,
            difficulty: Difficulty::Easy,
            action_repeat: 4,
            episode_length: 125,
            grid: 24,
            physics: Physics::default(),
            distractor_seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.action_repeat == 0 {
            return Err(Error::Config("action_repeat must be at least 1".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Config("episode_length must be at least 1".into()));
        }
        if self.grid < 8 {
            return Err(Error::Config("grid must be at least 8 pixels".into()));
        }
        let p = &self.physics;
        if !(p.dt > 0.0 && p.cup_mass > 0.0 && p.ball_mass > 0.0) {
            return Err(Error::Config("dt and masses must be positive".into()));
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    /// Largest achievable raw episode return (one reward per sub-step).
    pub fn max_return(&self) -> f64 {
        (self.episode_length * self.action_repeat) as f64
    }

    /// Task label including the distractor variant, used to stratify scores.
    pub fn variant_name(&self) -> String {
        match self.distractor {
            DistractorKind::None => self.task.name().to_string(),
            kind => format!("{}/{}-{}", self.task.name(), kind.name(), self.difficulty.name()),
        }
    }
}

/// Ground-truth simulator state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub cup_pos: [f64; 2],
    pub cup_vel: [f64; 2],
    pub ball_pos: [f64; 2],
    pub ball_vel: [f64; 2],
    pub step: usize,
}

/// Positions the analyses regress onto.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub ball: [f64; 2],
    pub cup: [f64; 2],
}

/// Exact simulator positions.
pub fn ground_truth(state: &EnvState) -> GroundTruth {
    GroundTruth {
        ball: state.ball_pos,
        cup: state.cup_pos,
    }
}

/// Stack of the most recent frames, oldest first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    frames: [Frame; FRAME_STACK],
}

impl Observation {
    pub fn from_frames(frames: [Frame; FRAME_STACK]) -> Self {
        Self { frames }
    }

    pub fn frames(&self) -> &[Frame; FRAME_STACK] {
        &self.frames
    }

    pub fn grid(&self) -> usize {
        self.frames[0].grid()
    }

    /// Number of channels in the stacked representation.
    pub fn channels(&self) -> usize {
        3 * FRAME_STACK
    }

    /// Length of the flattened `[G, G, 9]` float representation.
    pub fn float_len(&self) -> usize {
        let g = self.grid();
        g * g * self.channels()
    }

    /// Writes the `[G, G, 9]` HWC float representation (values in [0, 1],
    /// channels ordered frame-major) into `out`.
    pub fn write_floats(&self, out: &mut [f64]) {
        let g = self.grid();
        let ch = self.channels();
        debug_assert_eq!(out.len(), g * g * ch);
        for (f, frame) in self.frames.iter().enumerate() {
            for (p, px) in frame.pixels().chunks(3).enumerate() {
                for c in 0..3 {
                    out[p * ch + f * 3 + c] = px[c] as f64 / 255.0;
                }
            }
        }
    }

    pub fn to_floats(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.float_len()];
        self.write_floats(&mut out);
        out
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// One environment instance.
pub struct Env {
    config: EnvConfig,
    state: EnvState,
    frames: VecDeque<Frame>,
    distractor_rng: ChaCha8Rng,
    done: bool,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let frame = Frame::blank(config.grid);
        Ok(Self {
            state: EnvState {
                cup_pos: [0.0; 2],
                cup_vel: [0.0; 2],
                ball_pos: [0.0; 2],
                ball_vel: [0.0; 2],
                step: 0,
            },
            frames: std::iter::repeat_n(frame, FRAME_STACK).collect(),
            distractor_rng: ChaCha8Rng::seed_from_u64(0),
            done: true,
            config,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn ground_truth(&self) -> GroundTruth {
        ground_truth(&self.state)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Starts an episode. The cup starts at rest at the origin; the ball (or
    /// reacher target) is placed at a random angle.
    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let radius = match self.config.task {
            Task::TwoTimescaleCatch => self.config.physics.tether_length,
            Task::PointReacher => rng.gen_range(REACH_TARGET_MIN..REACH_TARGET_MAX),
        };
        self.state = EnvState {
            cup_pos: [0.0, 0.0],
            cup_vel: [0.0, 0.0],
            ball_pos: [radius * angle.cos(), radius * angle.sin()],
            ball_vel: [0.0, 0.0],
            step: 0,
        };
        let mut drng = ChaCha8Rng::seed_from_u64(seed ^ self.config.distractor_seed.rotate_left(17));
        drng.set_stream(1);
        self.distractor_rng = drng;
        self.done = false;
        let frame = self.render();
        self.frames.clear();
        for _ in 0..FRAME_STACK {
            self.frames.push_back(frame.clone());
        }
        self.observation()
    }

    fn observation(&self) -> Observation {
        Observation::from_frames([
            self.frames[0].clone(),
            self.frames[1].clone(),
            self.frames[2].clone(),
        ])
    }

    fn render(&mut self) -> Frame {
        let clean = render_clean(&self.config, &self.state);
        let frame = apply_distractor(
            &clean,
            self.config.distractor,
            self.config.difficulty,
            &mut self.distractor_rng,
        );
        frame.quantize()
    }

    /// Test hook: moves the ball to `pos` at rest.
    #[doc(hidden)]
    pub fn set_ball(&mut self, pos: [f64; 2]) {
        self.state.ball_pos = pos;
        self.state.ball_vel = [0.0; 2];
    }

    /// Applies `action` for `action_repeat` physics sub-steps.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Env("step called on a finished episode".into()));
        }
        if action.len() != self.config.action_dim() {
            return Err(Error::Env(format!(
                "expected {} action components, got {}",
                self.config.action_dim(),
                action.len()
            )));
        }
        if action.iter().any(|a| !a.is_finite() || a.abs() > 1.0) {
            return Err(Error::Env(format!("action {action:?} outside [-1, 1]")));
        }
        let mut reward = 0.0;
        for _ in 0..self.config.action_repeat {
            substep(&self.config, &mut self.state, [action[0], action[1]]);
            reward += sub_reward(&self.config, &self.state);
        }
        self.state.step += 1;
        self.done = self.state.step >= self.config.episode_length;
        let frame = self.render();
        self.frames.pop_front();
        self.frames.push_back(frame);
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.done,
        })
    }

    /// Newest rendered frame.
    pub fn last_frame(&self) -> &Frame {
        &self.frames[FRAME_STACK - 1]
    }
}

/// One semi-implicit Euler step.
pub fn substep(config: &EnvConfig, s: &mut EnvState, action: [f64; 2]) {
    let p = &config.physics;
    match config.task {
        Task::TwoTimescaleCatch => {
            let d = [s.ball_pos[0] - s.cup_pos[0], s.ball_pos[1] - s.cup_pos[1]];
            let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
            let stretch = (dist - p.tether_length).max(0.0);
            let mut tension = [0.0; 2];
            if stretch > 0.0 {
                for i in 0..2 {
                    tension[i] = p.tether_stiffness * stretch * d[i] / dist;
                }
            }
            for i in 0..2 {
                let cup_acc =
                    (p.force_scale * action[i] + tension[i] - p.cup_damping * s.cup_vel[i]) / p.cup_mass;
                let ball_acc = (-tension[i] - p.ball_damping * s.ball_vel[i]) / p.ball_mass;
                s.cup_vel[i] += cup_acc * p.dt;
                s.ball_vel[i] += ball_acc * p.dt;
                s.cup_pos[i] += s.cup_vel[i] * p.dt;
                s.ball_pos[i] += s.ball_vel[i] * p.dt;
            }
        }
        Task::PointReacher => {
            for i in 0..2 {
                let acc = (p.force_scale * action[i] - p.cup_damping * s.cup_vel[i]) / p.cup_mass;
                s.cup_vel[i] += acc * p.dt;
                s.cup_pos[i] += s.cup_vel[i] * p.dt;
            }
        }
    }
    clamp_body(&mut s.cup_pos, &mut s.cup_vel);
    clamp_body(&mut s.ball_pos, &mut s.ball_vel);
}

fn clamp_body(pos: &mut [f64; 2], vel: &mut [f64; 2]) {
    for i in 0..2 {
        if pos[i] > ARENA_HALF_WIDTH {
            pos[i] = ARENA_HALF_WIDTH;
            vel[i] = vel[i].min(0.0);
        } else if pos[i] < -ARENA_HALF_WIDTH {
            pos[i] = -ARENA_HALF_WIDTH;
            vel[i] = vel[i].max(0.0);
        }
    }
}

fn sub_reward(config: &EnvConfig, s: &EnvState) -> f64 {
    let d = ((s.ball_pos[0] - s.cup_pos[0]).powi(2) + (s.ball_pos[1] - s.cup_pos[1]).powi(2)).sqrt();
    let radius = match config.task {
        Task::TwoTimescaleCatch => config.physics.catch_radius,
        Task::PointReacher => config.physics.reach_radius,
    };
    if d < radius {
        1.0
    } else {
        0.0
    }
}

/// A recorded episode: every frame, action, reward and ground-truth state.
///
/// Frame `t` is the newest frame of observation `t`; observation `t` stacks
/// frames `t-2..=t`, repeating frame 0 before the start. There are `T + 1`
/// frames and ground-truth entries for `T` actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub id: u64,
    pub task: Task,
    pub frames: Vec<Frame>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub ground_truth: Vec<GroundTruth>,
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn observation(&self, t: usize) -> Observation {
        let f = |i: isize| self.frames[i.max(0) as usize].clone();
        let t = t as isize;
        Observation::from_frames([f(t - 2), f(t - 1), f(t)])
    }

    /// Runs one episode under `policy`, recording everything.
    pub fn record(
        config: &EnvConfig,
        id: u64,
        seed: u64,
        mut policy: impl FnMut(&Observation) -> Vec<f64>,
    ) -> Result<Self> {
        let mut env = Env::new(config.clone())?;
        let mut obs = env.reset(seed);
        let mut log = EpisodeLog {
            id,
            task: config.task,
            frames: vec![env.last_frame().clone()],
            actions: Vec::new(),
            rewards: Vec::new(),
            ground_truth: vec![env.ground_truth()],
        };
        loop {
            let action = policy(&obs);
            let res = env.step(&action)?;
            log.actions.push(action);
            log.rewards.push(res.reward);
            log.frames.push(env.last_frame().clone());
            log.ground_truth.push(env.ground_truth());
            obs = res.observation;
            if res.done {
                return Ok(log);
            }
        }
    }

    /// Writes episodes as JSON lines, one episode per line.
    pub fn write_jsonl(path: &std::path::Path, episodes: &[EpisodeLog]) -> Result<()> {
        let mut buf = Vec::new();
        for e in episodes {
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
        }
        crate::tensor::checkpoint::write_atomic(path, &buf)
    }

    pub fn read_jsonl(path: &std::path::Path) -> Result<Vec<EpisodeLog>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Uniform random action in `[-1, 1]^dim`.
pub fn random_action<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catch() -> Env {
        Env::new(EnvConfig::default()).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = catch();
        let mut b = catch();
        assert_eq!(a.reset(7), b.reset(7));
        assert_ne!(a.reset(7), a.reset(8));
        assert_eq!(a.ground_truth().cup, [0.0, 0.0]);
    }

    #[test]
    fn distractor_seed_irrelevant_without_distractor() {
        let mut cfg = EnvConfig::default();
        let mut a = Env::new(cfg.clone()).unwrap();
        cfg.distractor_seed = 99;
        let mut b = Env::new(cfg).unwrap();
        assert_eq!(a.reset(3), b.reset(3));
        let act = [0.3, -0.2];
        assert_eq!(a.step(&act).unwrap().observation, b.step(&act).unwrap().observation);
    }

    #[test]
    fn frame_stack_depth_and_shift() {
        let mut env = catch();
        let o = env.reset(1);
        assert_eq!(o.frames().len(), 3);
        assert_eq!(o.frames()[0], o.frames()[2]);
        let o2 = env.step(&[1.0, 1.0]).unwrap().observation;
        assert_eq!(o2.frames()[0], o.frames()[1]);
        assert_eq!(o2.frames()[1], o.frames()[2]);
    }

    #[test]
    fn teleported_ball_scores_every_substep() {
        let mut env = catch();
        env.reset(0);
        env.set_ball([0.02, 0.0]);
        let r = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(r.reward, 4.0);
    }

    #[test]
    fn zero_action_from_reset_scores_nothing() {
        let mut env = catch();
        env.reset(5);
        for _ in 0..10 {
            assert_eq!(env.step(&[0.0, 0.0]).unwrap().reward, 0.0);
        }
    }

    #[test]
    fn invalid_actions_and_finished_episodes_error() {
        let cfg = EnvConfig { episode_length: 2, ..EnvConfig::default() };
        let mut env = Env::new(cfg).unwrap();
        env.reset(0);
        assert!(env.step(&[1.5, 0.0]).is_err());
        assert!(env.step(&[0.0]).is_err());
        env.step(&[0.0, 0.0]).unwrap();
        assert!(env.step(&[0.0, 0.0]).unwrap().done);
        assert!(env.step(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn cup_moves_faster_than_ball_over_one_substep() {
        let cfg = EnvConfig::default();
        let mut env = Env::new(cfg.clone()).unwrap();
        env.reset(11);
        let mut s = *env.state();
        let before = s;
        substep(&cfg, &mut s, [1.0, -1.0]);
        let dcup = ((s.cup_pos[0] - before.cup_pos[0]).powi(2) + (s.cup_pos[1] - before.cup_pos[1]).powi(2)).sqrt();
        let dball =
            ((s.ball_pos[0] - before.ball_pos[0]).powi(2) + (s.ball_pos[1] - before.ball_pos[1]).powi(2)).sqrt();
        assert!(dcup > 0.0);
        assert!(dcup > 100.0 * dball, "cup {dcup} ball {dball}");
    }

    #[test]
    fn fast_slow_separation_over_one_agent_step() {
        let cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut cup, mut ball) = (0.0, 0.0);
        for seed in 0..200 {
            let mut env = Env::new(cfg.clone()).unwrap();
            env.reset(seed);
            let before = *env.state();
            env.step(&random_action(&mut rng, 2)).unwrap();
            let after = env.state();
            cup += ((after.cup_pos[0] - before.cup_pos[0]).powi(2) + (after.cup_pos[1] - before.cup_pos[1]).powi(2)).sqrt();
            ball += ((after.ball_pos[0] - before.ball_pos[0]).powi(2)
                + (after.ball_pos[1] - before.ball_pos[1]).powi(2))
            .sqrt();
        }
        assert!(cup > 5.0 * ball, "cup {cup} ball {ball}");
    }

    #[test]
    fn positions_stay_in_arena_and_distractors_leave_dynamics_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let actions: Vec<Vec<f64>> = (0..125).map(|_| random_action(&mut rng, 2)).collect();
        let run = |kind: DistractorKind, difficulty: Difficulty| {
            let cfg = EnvConfig {
                distractor: kind,
                difficulty,
                ..EnvConfig::default()
            };
            let mut env = Env::new(cfg).unwrap();
            env.reset(21);
            let mut trace = Vec::new();
            for a in &actions {
                let r = env.step(a).unwrap();
                let gt = env.ground_truth();
                for v in gt.ball.iter().chain(&gt.cup) {
                    assert!(v.abs() <= 1.0);
                }
                trace.push((r.reward, r.done, gt));
            }
            trace
        };
        let clean = run(DistractorKind::None, Difficulty::Easy);
        assert_eq!(clean, run(DistractorKind::Color, Difficulty::Medium));
        assert_eq!(clean, run(DistractorKind::Camera, Difficulty::Medium));
        for (r, _, _) in &clean {
            assert!((0.0..=4.0).contains(r));
        }
    }

    #[test]
    fn episode_log_reconstructs_observations() {
        let cfg = EnvConfig {
            episode_length: 6,
            ..EnvConfig::default()
        };
        let mut seen = Vec::new();
        let log = EpisodeLog::record(&cfg, 0, 9, |o| {
            seen.push(o.clone());
            vec![0.5, -0.5]
        })
        .unwrap();
        assert_eq!(log.len(), 6);
        assert_eq!(log.frames.len(), 7);
        for (t, o) in seen.iter().enumerate() {
            assert_eq!(&log.observation(t), o);
        }
    }
}
