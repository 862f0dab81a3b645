//! Hierarchical k-step latent prediction.
//!
//! Level 0 is the finest (smallest skip). Every level owns an encoder, a
//! momentum encoder, a forward cell and a projection head; the communication
//! manager stored at index `l` maps level `l + 1`'s full rollout to messages
//! for level `l`'s forward cell. Rollouts run top-down so messages exist
//! before the finer level steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    build_comm_manager, build_encoder, build_forward_cell, build_projection, communicate, encode,
    encode_tensor, forward_cell, one_hot, project, CellInputs, ModelDims,
};
use crate::tensor::{GroupId, Mode, ParamGroup, Tape, Tensor, Var};

const ENCODER_BASE: u32 = 100;
const MOMENTUM_BASE: u32 = 200;
const FORWARD_BASE: u32 = 300;
const PROJECTION_BASE: u32 = 400;
const COMM_BASE: u32 = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    /// Skip of each level, finest first.
    pub n: Vec<usize>,
    /// Trajectory length.
    pub k: usize,
    /// Disable communication managers.
    pub no_c: bool,
    /// All levels read one encoder (and one momentum encoder).
    pub shared_encoder: bool,
    /// Override every skip to 1.
    pub all_n1: bool,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            n: vec![1, 3],
            k: 6,
            no_c: false,
            shared_encoder: false,
            all_n1: false,
        }
    }
}

impl HierarchyConfig {
    pub fn levels(&self) -> usize {
        self.n.len()
    }

    /// Skips in effect after the `all_n1` override.
    pub fn skips(&self) -> Vec<usize> {
        if self.all_n1 {
            vec![1; self.n.len()]
        } else {
            self.n.clone()
        }
    }

    /// Predictions made by level `l` over one trajectory, `floor(k / n)`.
    pub fn steps(&self, level: usize) -> usize {
        self.k / self.skips()[level]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n.is_empty() {
            return Err(Error::Config("hierarchy needs at least one level".into()));
        }
        if self.n.contains(&0) {
            return Err(Error::Config("level skips must be positive".into()));
        }
        if self.n.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "level skips must be sorted ascending, got {:?}",
                self.n
            )));
        }
        let max_n = *self.n.iter().max().unwrap_or(&1);
        if self.k < max_n {
            return Err(Error::Config(format!(
                "trajectory length k={} is shorter than the largest skip {max_n}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Parameters of every level.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    config: HierarchyConfig,
    dims: ModelDims,
    /// One entry per level, or a single entry when encoders are shared.
    pub encoders: Vec<ParamGroup>,
    pub momentum: Vec<ParamGroup>,
    pub forward: Vec<ParamGroup>,
    pub projection: Vec<ParamGroup>,
    /// `comm[l]` feeds level `l`; `None` at the top level or with `no_c`.
    pub comm: Vec<Option<ParamGroup>>,
}

/// Tape handles for one bound hierarchy.
pub struct BoundHierarchy {
    pub encoders: Vec<Vec<Var>>,
    pub forward: Vec<Vec<Var>>,
    pub projection: Vec<Vec<Var>>,
    pub comm: Vec<Option<Vec<Var>>>,
}

/// Latents of one level over a trajectory.
pub struct LevelRollout {
    pub level: usize,
    pub skip: usize,
    /// `N + 1` latents `[B, z]`: the encoding of `o_1` then every prediction.
    pub latents: Vec<Var>,
    /// Messages received at steps `1..=N` (empty without communication).
    pub messages: Vec<Var>,
}

/// Momentum-encoder outputs keyed by level and observation index.
#[derive(Clone, Debug)]
pub struct MomentumTargets {
    /// `by_level[l][t]` is `Some([B, z])` for every time the level needs.
    by_level: Vec<Vec<Option<Tensor>>>,
}

impl MomentumTargets {
    pub fn get(&self, level: usize, time: usize) -> Result<&Tensor> {
        self.by_level
            .get(level)
            .and_then(|v| v.get(time))
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::invalid(format!("no momentum target for level {level} at time {time}")))
    }
}

pub struct HkslLoss {
    /// Sum of the per-level losses.
    pub total: Var,
    /// Per-level loss, finest first.
    pub per_level: Vec<Var>,
    /// Rollouts, top level first.
    pub rollouts: Vec<LevelRollout>,
}

impl Hierarchy {
    pub fn new<R: Rng + ?Sized>(config: HierarchyConfig, dims: ModelDims, rng: &mut R) -> Result<Self> {
        config.validate()?;
        dims.validate()?;
        let h = config.levels();
        let skips = config.skips();
        let n_enc = if config.shared_encoder { 1 } else { h };
        let mut encoders = Vec::with_capacity(n_enc);
        let mut momentum = Vec::with_capacity(n_enc);
        for l in 0..n_enc {
            let e = build_encoder(GroupId(ENCODER_BASE + l as u32), &dims, rng);
            momentum.push(e.with_id(GroupId(MOMENTUM_BASE + l as u32)));
            encoders.push(e);
        }
        let mut forward = Vec::with_capacity(h);
        let mut projection = Vec::with_capacity(h);
        let mut comm = Vec::with_capacity(h);
        for l in 0..h {
            let has_comm = !config.no_c && l + 1 < h;
            forward.push(build_forward_cell(
                GroupId(FORWARD_BASE + l as u32),
                &dims,
                skips[l] * dims.action_dim,
                has_comm,
                rng,
            ));
            projection.push(build_projection(GroupId(PROJECTION_BASE + l as u32), &dims, rng));
            comm.push(has_comm.then(|| {
                build_comm_manager(
                    GroupId(COMM_BASE + l as u32),
                    &dims,
                    config.steps(l + 1),
                    config.steps(l),
                    rng,
                )
            }));
        }
        Ok(Self {
            config,
            dims,
            encoders,
            momentum,
            forward,
            projection,
            comm,
        })
    }

    pub fn config(&self) -> &HierarchyConfig {
        &self.config
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn levels(&self) -> usize {
        self.config.levels()
    }

    pub fn skip(&self, level: usize) -> usize {
        self.config.skips()[level]
    }

    /// Index into `encoders` / `momentum` used by `level`.
    pub fn encoder_index(&self, level: usize) -> usize {
        if self.config.shared_encoder {
            0
        } else {
            level
        }
    }

    pub fn encoder(&self, level: usize) -> &ParamGroup {
        &self.encoders[self.encoder_index(level)]
    }

    pub fn momentum_encoder(&self, level: usize) -> &ParamGroup {
        &self.momentum[self.encoder_index(level)]
    }

    /// Every learnable group updated by the representation loss.
    pub fn trainable_groups(&self) -> Vec<&ParamGroup> {
        let mut out: Vec<&ParamGroup> = self.encoders.iter().collect();
        out.extend(self.forward.iter());
        out.extend(self.projection.iter());
        out.extend(self.comm.iter().flatten());
        out
    }

    pub fn trainable_groups_mut(&mut self) -> Vec<&mut ParamGroup> {
        let mut out: Vec<&mut ParamGroup> = self.encoders.iter_mut().collect();
        out.extend(self.forward.iter_mut());
        out.extend(self.projection.iter_mut());
        out.extend(self.comm.iter_mut().flatten());
        out
    }

    /// All groups including momentum encoders, in a fixed order.
    pub fn all_groups(&self) -> Vec<&ParamGroup> {
        let mut out = self.trainable_groups();
        out.extend(self.momentum.iter());
        out
    }

    pub fn all_groups_mut(&mut self) -> Vec<&mut ParamGroup> {
        let mut out: Vec<&mut ParamGroup> = self.encoders.iter_mut().collect();
        out.extend(self.forward.iter_mut());
        out.extend(self.projection.iter_mut());
        out.extend(self.comm.iter_mut().flatten());
        out.extend(self.momentum.iter_mut());
        out
    }

    pub fn bind(&self, tape: &mut Tape, mode: Mode) -> BoundHierarchy {
        BoundHierarchy {
            encoders: self.encoders.iter().map(|g| tape.bind(g, mode)).collect(),
            forward: self.forward.iter().map(|g| tape.bind(g, mode)).collect(),
            projection: self.projection.iter().map(|g| tape.bind(g, mode)).collect(),
            comm: self
                .comm
                .iter()
                .map(|g| g.as_ref().map(|g| tape.bind(g, mode)))
                .collect(),
        }
    }

    /// Online encoding of `obs` by `level`'s encoder on the tape.
    pub fn encode_level(&self, tape: &mut Tape, bound: &BoundHierarchy, level: usize, obs: Var) -> Result<Var> {
        encode(tape, &bound.encoders[self.encoder_index(level)], &self.dims, obs)
    }

    /// Rolls every level through one batch of trajectories starting at
    /// `obs0` (`[B, G, G, C]`) with per-step actions `[B, dim(A)]`.
    /// Returns rollouts top level first.
    pub fn rollout(
        &self,
        tape: &mut Tape,
        bound: &BoundHierarchy,
        obs0: &Tensor,
        actions: &[Tensor],
    ) -> Result<Vec<LevelRollout>> {
        let k = self.config.k;
        if actions.len() < k {
            return Err(Error::invalid(format!(
                "trajectory has {} actions, hierarchy needs k={k}",
                actions.len()
            )));
        }
        let b = obs0.rows();
        let obs = tape.constant(obs0.clone());
        let mut out: Vec<LevelRollout> = Vec::with_capacity(self.levels());
        for level in (0..self.levels()).rev() {
            let skip = self.skip(level);
            let steps = self.config.steps(level);
            let z0 = self.encode_level(tape, bound, level, obs)?;
            // Concatenated rollout of the level above, shared by every step.
            let upper = match (&bound.comm[level], out.last()) {
                (Some(_), Some(above)) => Some(tape.concat(&above.latents)),
                _ => None,
            };
            let mut latents = Vec::with_capacity(steps + 1);
            let mut messages = Vec::new();
            latents.push(z0);
            for t in 1..=steps {
                let block = action_block(actions, (t - 1) * skip, skip)?;
                let block = tape.constant(block);
                let message = match (&bound.comm[level], upper) {
                    (Some(c), Some(reps)) => {
                        let row = one_hot(t, steps)?;
                        let onehot = tape.constant(repeat_row(&row, b));
                        let m = communicate(tape, c, reps, onehot)?;
                        messages.push(m);
                        Some(m)
                    }
                    _ => None,
                };
                let z = forward_cell(
                    tape,
                    &bound.forward[level],
                    CellInputs {
                        z_prev: latents[t - 1],
                        actions: block,
                        message,
                    },
                )?;
                latents.push(z);
            }
            out.push(LevelRollout {
                level,
                skip,
                latents,
                messages,
            });
        }
        Ok(out)
    }

    /// Gradient-free momentum encodings at every observation index the
    /// representation loss and the critic targets read: `t * n` for
    /// `t = 1..=N` per level.
    pub fn momentum_targets(&self, obs: &[Tensor]) -> Result<MomentumTargets> {
        let k = self.config.k;
        if obs.len() < k + 1 {
            return Err(Error::invalid(format!(
                "trajectory has {} observations, hierarchy needs {}",
                obs.len(),
                k + 1
            )));
        }
        let n_enc = self.momentum.len();
        // Times needed per momentum encoder, shared between levels that alias it.
        let mut wanted = vec![vec![false; k + 1]; n_enc];
        for level in 0..self.levels() {
            let skip = self.skip(level);
            for t in 1..=self.config.steps(level) {
                wanted[self.encoder_index(level)][t * skip] = true;
            }
        }
        let mut encoded: Vec<Vec<Option<Tensor>>> = vec![vec![None; k + 1]; n_enc];
        for (e, times) in wanted.iter().enumerate() {
            let times: Vec<usize> = (0..=k).filter(|t| times[*t]).collect();
            let parts: Vec<&Tensor> = times.iter().map(|t| &obs[*t]).collect();
            let stacked = Tensor::concat_rows(&parts)?;
            let z = encode_tensor(&self.momentum[e], &self.dims, &stacked)?;
            let b = obs[0].rows();
            for (i, t) in times.iter().enumerate() {
                encoded[e][*t] = Some(z.slice_rows(i * b, b)?);
            }
        }
        let by_level = (0..self.levels())
            .map(|l| encoded[self.encoder_index(l)].clone())
            .collect();
        Ok(MomentumTargets { by_level })
    }

    /// Representation loss over a batch: for every level and step,
    /// `|| l2n(w(z_hat_t)) - l2n(e_m(o_{t n})) ||^2`, summed over steps,
    /// averaged over the batch, summed over levels.
    pub fn hksl_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundHierarchy,
        obs: &[Tensor],
        actions: &[Tensor],
        targets: &MomentumTargets,
    ) -> Result<HkslLoss> {
        let rollouts = self.rollout(tape, bound, &obs[0], actions)?;
        let mut per_level = vec![None; self.levels()];
        for r in &rollouts {
            let mut acc: Option<Var> = None;
            for t in 1..r.latents.len() {
                let target = targets.get(r.level, t * r.skip)?;
                let term = prediction_term(tape, &bound.projection[r.level], r.latents[t], target)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term),
                    None => term,
                });
            }
            let summed = acc.ok_or_else(|| Error::invalid("level makes no predictions"))?;
            per_level[r.level] = Some(tape.mean(summed));
        }
        let per_level: Vec<Var> = per_level.into_iter().map(|v| v.expect("every level rolled")).collect();
        let total = per_level[1..]
            .iter()
            .fold(per_level[0], |acc, v| tape.add(acc, *v));
        Ok(HkslLoss {
            total,
            per_level,
            rollouts,
        })
    }
}

/// Squared distance between unit-normalized projection of `latent` and
/// unit-normalized `target`, per row: `[B, 1]`, each entry in `[0, 4]`.
pub fn prediction_term(tape: &mut Tape, projection: &[Var], latent: Var, target: &Tensor) -> Result<Var> {
    let p = project(tape, projection, latent)?;
    let u = tape.l2_normalize(p);
    let t = tape.constant(target.clone());
    let v = tape.l2_normalize(t);
    Ok(tape.sq_dist(u, v))
}

/// `[a_from | ... | a_{from + count - 1}]` per row.
pub fn action_block(actions: &[Tensor], from: usize, count: usize) -> Result<Tensor> {
    let parts: Vec<&Tensor> = actions
        .get(from..from + count)
        .ok_or_else(|| Error::invalid("action block past the end of the trajectory"))?
        .iter()
        .collect();
    Tensor::concat_cols(&parts)
}

fn repeat_row(row: &[f64], times: usize) -> Tensor {
    let mut data = Vec::with_capacity(row.len() * times);
    for _ in 0..times {
        data.extend_from_slice(row);
    }
    Tensor::new(vec![times, row.len()], data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn mini_dims() -> ModelDims {
        ModelDims {
            grid: 6,
            channels: 3,
            conv_filters: 2,
            conv_strides: vec![2],
            z_dim: 4,
            action_dim: 1,
            comm_hidden: 5,
            projection_hidden: 5,
            hidden: 6,
            twin_q: true,
        }
    }

    fn trajectory(dims: &ModelDims, b: usize, k: usize, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<Tensor>) {
        let g = dims.grid;
        let obs = (0..=k)
            .map(|_| {
                Tensor::new(
                    vec![b, g, g, dims.channels],
                    (0..b * g * g * dims.channels).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let actions = (0..k)
            .map(|_| {
                Tensor::new(
                    vec![b, dims.action_dim],
                    (0..b * dims.action_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        (obs, actions)
    }

    #[test]
    fn config_validation() {
        assert!(HierarchyConfig::default().validate().is_ok());
        let bad = HierarchyConfig {
            n: vec![3, 1],
            ..HierarchyConfig::default()
        };
        assert!(bad.validate().is_err());
        let short = HierarchyConfig {
            n: vec![1, 8],
            ..HierarchyConfig::default()
        };
        assert!(short.validate().is_err());
        assert!(HierarchyConfig {
            n: vec![],
            ..HierarchyConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn step_counts_per_level() {
        let dims = mini_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = Hierarchy::new(HierarchyConfig::default(), dims.clone(), &mut rng).unwrap();
        let (obs, actions) = trajectory(&dims, 2, 6, &mut rng);
        let mut tape = Tape::new();
        let bound = h.bind(&mut tape, Mode::Train);
        let r = h.rollout(&mut tape, &bound, &obs[0], &actions).unwrap();
        assert_eq!(r[0].level, 1);
        assert_eq!(r[0].latents.len() - 1, 2);
        assert_eq!(r[1].latents.len() - 1, 6);
        assert_eq!(r[1].messages.len(), 6);
        assert!(r[0].messages.is_empty());
        assert!(h.rollout(&mut tape, &bound, &obs[0], &actions[..5]).is_err());
    }

    #[test]
    fn single_level_has_no_messages() {
        let dims = mini_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = HierarchyConfig {
            n: vec![1],
            ..HierarchyConfig::default()
        };
        let h = Hierarchy::new(cfg, dims.clone(), &mut rng).unwrap();
        assert!(h.comm.iter().all(Option::is_none));
        let (obs, actions) = trajectory(&dims, 2, 6, &mut rng);
        let mut tape = Tape::new();
        let bound = h.bind(&mut tape, Mode::Train);
        let r = h.rollout(&mut tape, &bound, &obs[0], &actions).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].latents.len(), 7);
    }

    #[test]
    fn all_n1_equalizes_step_counts() {
        let cfg = HierarchyConfig {
            all_n1: true,
            ..HierarchyConfig::default()
        };
        assert_eq!(cfg.steps(0), cfg.steps(1));
        assert_eq!(cfg.steps(1), 6);
    }

    #[test]
    fn loss_terms_are_bounded_and_counted() {
        let dims = mini_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Hierarchy::new(HierarchyConfig::default(), dims.clone(), &mut rng).unwrap();
        let (obs, actions) = trajectory(&dims, 3, 6, &mut rng);
        let targets = h.momentum_targets(&obs).unwrap();
        let mut tape = Tape::new();
        let bound = h.bind(&mut tape, Mode::Train);
        let loss = h.hksl_loss(&mut tape, &bound, &obs, &actions, &targets).unwrap();
        let total = tape.scalar(loss.total);
        // 6 + 2 terms, each in [0, 4].
        assert!((0.0..=32.0).contains(&total));
        let sum: f64 = loss.per_level.iter().map(|v| tape.scalar(*v)).sum();
        assert!((sum - total).abs() < 1e-12);
        let grads = tape.backward(loss.total).unwrap();
        for m in &h.momentum {
            assert!(!grads.touches(m));
        }
        for g in h.trainable_groups() {
            assert!(grads.touches(g));
        }
    }
}
