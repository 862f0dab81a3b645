//! Soft actor-critic host with one critic per hierarchy level.
//!
//! Level `l`'s critic reads level `l`'s online encoder and is regressed onto
//! an `n^l`-step target built from its target critic on the momentum
//! encoding of `o_{1+n^l}`. The actor reads the concatenation of every
//! level's online encoding and maximizes the sum of all critics.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hksl::{Hierarchy, HierarchyConfig, MomentumTargets};
use crate::models::{
    actor_sample, build_actor, build_critic, critic_eval, ema_update, encode_tensor, ActorMode, ModelDims, Reduce,
};
use crate::par::Exec;
use crate::replay::{n_step_return, TrajectoryBatch};
use crate::tensor::checkpoint::Record;
use crate::tensor::{Adam, AdamConfig, GroupId, Gradients, Mode, ParamGroup, Tape, Tensor, Var};

const CRITIC_BASE: u32 = 600;
const TARGET_CRITIC_BASE: u32 = 700;
const ACTOR_ID: GroupId = GroupId(800);
const LOG_ALPHA_ID: GroupId = GroupId(900);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub gamma: f64,
    pub init_alpha: f64,
    /// Learning rate of every optimizer.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub critic_tau: f64,
    pub encoder_tau: f64,
    /// Critic updates between target / momentum EMA steps.
    pub target_update_freq: u64,
    /// Update calls between actor and temperature steps.
    pub actor_update_freq: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            init_alpha: 0.1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            critic_tau: 0.01,
            encoder_tau: 0.05,
            target_update_freq: 2,
            actor_update_freq: 1,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        // Written this way so NaN is rejected too.
        if [self.init_alpha, self.lr].iter().any(|v| v.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::Config("init_alpha and lr must be positive".into()));
        }
        for (name, tau) in [("critic_tau", self.critic_tau), ("encoder_tau", self.encoder_tau)] {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::Config(format!("{name} {tau} outside (0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.target_update_freq == 0 || self.actor_update_freq == 0 {
            return Err(Error::Config("update frequencies must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Losses from one call to [`Agent::update`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub hksl: Option<f64>,
    pub critic: Vec<f64>,
    pub actor: Option<f64>,
    pub alpha: Option<f64>,
}

/// Which loss an optimizer state belongs to; encoders get one per loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Purpose {
    Representation,
    Critic,
    Actor,
}

#[derive(Clone, Debug)]
pub struct Agent {
    config: SacConfig,
    exec: Exec,
    pub hierarchy: Hierarchy,
    pub critics: Vec<ParamGroup>,
    pub target_critics: Vec<ParamGroup>,
    pub actor: ParamGroup,
    /// Single-element `[1]` tensor holding `log(alpha)`.
    pub log_alpha: ParamGroup,
    optimizers: HashMap<(Purpose, GroupId), Adam>,
    target_entropy: f64,
    critic_updates: u64,
    update_calls: u64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        hierarchy: HierarchyConfig,
        dims: ModelDims,
        config: SacConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let hierarchy = Hierarchy::new(hierarchy, dims.clone(), rng)?;
        let h = hierarchy.levels();
        let mut critics = Vec::with_capacity(h);
        let mut target_critics = Vec::with_capacity(h);
        for l in 0..h {
            let c = build_critic(GroupId(CRITIC_BASE + l as u32), &dims, rng);
            target_critics.push(c.with_id(GroupId(TARGET_CRITIC_BASE + l as u32)));
            critics.push(c);
        }
        let actor = build_actor(ACTOR_ID, &dims, h, rng);
        let mut log_alpha = ParamGroup::new(LOG_ALPHA_ID);
        log_alpha.push("log_alpha", Tensor::filled(&[1], config.init_alpha.ln()));

        let adam = config.adam();
        let mut optimizers = HashMap::new();
        for g in hierarchy.trainable_groups() {
            optimizers.insert((Purpose::Representation, g.id()), Adam::new(g, adam));
        }
        for g in hierarchy.encoders.iter().chain(&critics) {
            optimizers.insert((Purpose::Critic, g.id()), Adam::new(g, adam));
        }
        for g in [&actor, &log_alpha] {
            optimizers.insert((Purpose::Actor, g.id()), Adam::new(g, adam));
        }
        let target_entropy = -(dims.action_dim as f64);
        Ok(Self {
            config,
            exec: Exec::default(),
            hierarchy,
            critics,
            target_critics,
            actor,
            log_alpha,
            optimizers,
            target_entropy,
            critic_updates: 0,
            update_calls: 0,
        })
    }

    /// Execution mode for batched kernels inside updates.
    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn dims(&self) -> &ModelDims {
        self.hierarchy.dims()
    }

    pub fn levels(&self) -> usize {
        self.hierarchy.levels()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.get(0).data()[0].exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.target_entropy
    }

    pub fn critic_updates(&self) -> u64 {
        self.critic_updates
    }

    fn tape(&self) -> Tape {
        Tape::with_exec(self.exec)
    }

    /// Online encodings of `obs` by every level, concatenated: `[B, h * z]`.
    pub fn encode_all(&self, obs: &Tensor) -> Result<Tensor> {
        let parts = (0..self.levels())
            .map(|l| encode_tensor(self.hierarchy.encoder(l), self.dims(), obs))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat_cols(&refs)
    }

    /// Policy action for a `[B, G, G, C]` observation batch. `rng` is used
    /// only when `stochastic`.
    pub fn act<R: Rng + ?Sized>(&self, obs: &Tensor, stochastic: bool, rng: &mut R) -> Result<Tensor> {
        let z = self.encode_all(obs)?;
        let mut tape = self.tape();
        let p = tape.bind(&self.actor, Mode::Frozen);
        let zv = tape.constant(z);
        let noise;
        let mode = if stochastic {
            noise = standard_normal(rng, obs.rows(), self.dims().action_dim);
            ActorMode::Stochastic(&noise)
        } else {
            ActorMode::Mean
        };
        let out = actor_sample(&mut tape, &p, zv, mode)?;
        Ok(tape.value(out.action).clone())
    }

    /// One full update on an (already augmented) batch: representation
    /// loss unless `representation` is false, critics, then actor and
    /// temperature on schedule.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &TrajectoryBatch,
        representation: bool,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        let targets = self.hierarchy.momentum_targets(&batch.obs)?;
        let mut stats = UpdateStats::default();
        if representation {
            stats.hksl = Some(self.representation_update(batch, &targets)?);
        }
        stats.critic = self.critic_update(batch, &targets, rng)?;
        if self.update_calls.is_multiple_of(self.config.actor_update_freq) {
            let (a, al) = self.actor_and_alpha_update(batch, rng)?;
            stats.actor = Some(a);
            stats.alpha = Some(al);
        }
        self.update_calls += 1;
        self.check_finite()?;
        Ok(stats)
    }

    pub fn representation_update(&mut self, batch: &TrajectoryBatch, targets: &MomentumTargets) -> Result<f64> {
        let mut tape = self.tape();
        let bound = self.hierarchy.bind(&mut tape, Mode::Train);
        let loss = self
            .hierarchy
            .hksl_loss(&mut tape, &bound, &batch.obs, &batch.actions, targets)?;
        let value = finite_loss(&tape, loss.total, "representation loss")?;
        let grads = tape.backward(loss.total)?;
        for g in self.hierarchy.trainable_groups_mut() {
            step(&mut self.optimizers, Purpose::Representation, g, &grads)?;
        }
        Ok(value)
    }

    /// Per-level critic losses on a fresh tape with `level`'s critic and
    /// encoder bound for training. Returned losses are finest level first.
    pub fn critic_losses<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &TrajectoryBatch,
        targets: &MomentumTargets,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        let h = self.levels();
        let bound = self.hierarchy.bind(tape, Mode::Train);
        let alpha = self.alpha();
        let gamma = self.config.gamma;
        let b = batch.batch_size();
        let mut actor_inputs: HashMap<usize, Tensor> = HashMap::new();
        let mut losses = Vec::with_capacity(h);
        for l in 0..h {
            let n = self.hierarchy.skip(l);
            if batch.k < n {
                return Err(Error::invalid(format!("trajectory length {} below level skip {n}", batch.k)));
            }
            // Bootstrap: a' from the policy at o_{1+n}, target critic on the
            // momentum encoding.
            if let std::collections::hash_map::Entry::Vacant(e) = actor_inputs.entry(n) {
                e.insert(self.encode_all(&batch.obs[n])?);
            }
            let noise = standard_normal(rng, b, self.dims().action_dim);
            let bootstrap = {
                let mut t = self.tape();
                let ap = t.bind(&self.actor, Mode::Frozen);
                let z_next = t.constant(actor_inputs[&n].clone());
                let pi = actor_sample(&mut t, &ap, z_next, ActorMode::Stochastic(&noise))?;
                let cp = t.bind(&self.target_critics[l], Mode::Frozen);
                let zm = t.constant(targets.get(l, n)?.clone());
                let q = critic_eval(&mut t, &cp, zm, pi.action, Reduce::Min)?;
                soft_value(t.value(q.min.expect("min requested")), t.value(pi.log_prob), alpha)
            };
            let y: Vec<f64> = (0..b)
                .map(|i| n_step_return(batch.rewards_of(i), 0, n, gamma, bootstrap[i]))
                .collect::<Result<_>>()?;
            let y = tape.constant(Tensor::new(vec![b, 1], y)?);

            let obs0 = tape.constant(batch.obs[0].clone());
            let z = self.hierarchy.encode_level(tape, &bound, l, obs0)?;
            let cp = tape.bind(&self.critics[l], Mode::Train);
            let a = tape.constant(batch.actions[0].clone());
            let q = critic_eval(tape, &cp, z, a, Reduce::Both)?;
            let mut loss: Option<Var> = None;
            for head in q.heads {
                let d = tape.sub(head, y);
                let sq = tape.square(d);
                let m = tape.mean(sq);
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, m),
                    None => m,
                });
            }
            losses.push(loss.expect("critic has at least one head"));
        }
        Ok(losses)
    }

    pub fn critic_update<R: Rng + ?Sized>(
        &mut self,
        batch: &TrajectoryBatch,
        targets: &MomentumTargets,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut tape = self.tape();
        let losses = self.critic_losses(&mut tape, batch, targets, rng)?;
        let values = losses
            .iter()
            .map(|v| finite_loss(&tape, *v, "critic loss"))
            .collect::<Result<Vec<_>>>()?;
        let total = losses[1..].iter().fold(losses[0], |acc, v| tape.add(acc, *v));
        let grads = tape.backward(total)?;
        for g in self.hierarchy.encoders.iter_mut().chain(self.critics.iter_mut()) {
            step(&mut self.optimizers, Purpose::Critic, g, &grads)?;
        }
        self.critic_updates += 1;
        if self.critic_updates.is_multiple_of(self.config.target_update_freq) {
            for (c, t) in self.critics.iter().zip(self.target_critics.iter_mut()) {
                ema_update(c, t, self.config.critic_tau)?;
            }
            let hier = &mut self.hierarchy;
            for (e, m) in hier.encoders.iter().zip(hier.momentum.iter_mut()) {
                ema_update(e, m, self.config.encoder_tau)?;
            }
        }
        Ok(values)
    }

    /// Actor and temperature losses on one tape. Encoders and critics are
    /// constants; only the actor and `log_alpha` receive gradients.
    pub fn actor_losses<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &TrajectoryBatch,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let b = batch.batch_size();
        let z_dim = self.dims().z_dim;
        let z = self.encode_all(&batch.obs[0])?;
        let ap = tape.bind(&self.actor, Mode::Train);
        let zc = tape.constant(z);
        let noise = standard_normal(rng, b, self.dims().action_dim);
        let pi = actor_sample(tape, &ap, zc, ActorMode::Stochastic(&noise))?;
        let critics: Vec<Vec<Var>> = self.critics.iter().map(|c| tape.bind(c, Mode::Frozen)).collect();
        let levels: Vec<Var> = (0..self.levels()).map(|l| tape.slice_cols(zc, l * z_dim, z_dim)).collect();
        let actor = summed_q_actor_loss(tape, &critics, &levels, pi.action, pi.log_prob, self.alpha())?;

        let la = tape.bind(&self.log_alpha, Mode::Train)[0];
        let alpha_loss = temperature_loss(tape, la, pi.log_prob, self.target_entropy);
        Ok((actor, alpha_loss))
    }

    pub fn actor_and_alpha_update<R: Rng + ?Sized>(&mut self, batch: &TrajectoryBatch, rng: &mut R) -> Result<(f64, f64)> {
        let mut tape = self.tape();
        let (actor, alpha) = self.actor_losses(&mut tape, batch, rng)?;
        let a = finite_loss(&tape, actor, "actor loss")?;
        let al = finite_loss(&tape, alpha, "temperature loss")?;
        let total = tape.add(actor, alpha);
        let grads = tape.backward(total)?;
        step(&mut self.optimizers, Purpose::Actor, &mut self.actor, &grads)?;
        step(&mut self.optimizers, Purpose::Actor, &mut self.log_alpha, &grads)?;
        Ok((a, al))
    }

    fn check_finite(&self) -> Result<()> {
        for (name, g) in self.named_groups() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("parameters of {name}")));
            }
        }
        Ok(())
    }

    /// Every parameter group under a stable, human-readable label.
    pub fn named_groups(&self) -> Vec<(String, &ParamGroup)> {
        let hier = &self.hierarchy;
        let mut out = Vec::new();
        for (i, g) in hier.encoders.iter().enumerate() {
            out.push((format!("encoder{i}"), g));
        }
        for (i, g) in hier.momentum.iter().enumerate() {
            out.push((format!("momentum{i}"), g));
        }
        for (i, g) in hier.forward.iter().enumerate() {
            out.push((format!("forward{i}"), g));
        }
        for (i, g) in hier.projection.iter().enumerate() {
            out.push((format!("projection{i}"), g));
        }
        for (i, g) in hier.comm.iter().enumerate() {
            if let Some(g) = g {
                out.push((format!("comm{i}"), g));
            }
        }
        for (i, g) in self.critics.iter().enumerate() {
            out.push((format!("critic{i}"), g));
        }
        for (i, g) in self.target_critics.iter().enumerate() {
            out.push((format!("target_critic{i}"), g));
        }
        out.push(("actor".into(), &self.actor));
        out.push(("log_alpha".into(), &self.log_alpha));
        out
    }

    fn named_groups_mut(&mut self) -> Vec<(String, &mut ParamGroup)> {
        let hier = &mut self.hierarchy;
        let mut out = Vec::new();
        for (i, g) in hier.encoders.iter_mut().enumerate() {
            out.push((format!("encoder{i}"), g));
        }
        for (i, g) in hier.momentum.iter_mut().enumerate() {
            out.push((format!("momentum{i}"), g));
        }
        for (i, g) in hier.forward.iter_mut().enumerate() {
            out.push((format!("forward{i}"), g));
        }
        for (i, g) in hier.projection.iter_mut().enumerate() {
            out.push((format!("projection{i}"), g));
        }
        for (i, g) in hier.comm.iter_mut().enumerate() {
            if let Some(g) = g {
                out.push((format!("comm{i}"), g));
            }
        }
        for (i, g) in self.critics.iter_mut().enumerate() {
            out.push((format!("critic{i}"), g));
        }
        for (i, g) in self.target_critics.iter_mut().enumerate() {
            out.push((format!("target_critic{i}"), g));
        }
        out.push(("actor".into(), &mut self.actor));
        out.push(("log_alpha".into(), &mut self.log_alpha));
        out
    }

    /// Checkpoint records `group/tensor` in a fixed order.
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for (label, g) in self.named_groups() {
            for (name, t) in g.iter() {
                out.push((format!("{label}/{name}"), t.clone()));
            }
        }
        out
    }

    /// Restores parameters from records written by [`Agent::to_records`] for
    /// an identically configured agent.
    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        let mut by_name: HashMap<&str, &Tensor> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (label, g) in self.named_groups_mut() {
            for i in 0..g.len() {
                let key = format!("{label}/{}", g.names()[i]);
                let t = by_name
                    .remove(key.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if t.shape() != g.get(i).shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {key} has shape {:?}, expected {:?}",
                        t.shape(),
                        g.get(i).shape()
                    )));
                }
                g.tensors_mut()[i] = t.clone();
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

/// `-mean(sum_l min Q^l(z^l, a) - alpha * log pi)`.
pub fn summed_q_actor_loss(
    tape: &mut Tape,
    critics: &[Vec<Var>],
    level_reps: &[Var],
    action: Var,
    log_prob: Var,
    alpha: f64,
) -> Result<Var> {
    if critics.len() != level_reps.len() || critics.is_empty() {
        return Err(Error::invalid("one representation per critic required"));
    }
    let mut q_sum: Option<Var> = None;
    for (c, z) in critics.iter().zip(level_reps) {
        let q = critic_eval(tape, c, *z, action, Reduce::Min)?;
        let m = q.min.expect("min requested");
        q_sum = Some(match q_sum {
            Some(s) => tape.add(s, m),
            None => m,
        });
    }
    let entropy = tape.scale(log_prob, alpha);
    let q_sum = q_sum.expect("non-empty");
    let diff = tape.sub(entropy, q_sum);
    Ok(tape.mean(diff))
}

/// `-log_alpha * mean(log pi + target_entropy)` with `log pi` held constant.
pub fn temperature_loss(tape: &mut Tape, log_alpha: Var, log_prob: Var, target_entropy: f64) -> Var {
    let lp = tape.detach(log_prob);
    let shifted = tape.add_scalar(lp, target_entropy);
    let gap = tape.mean(shifted);
    let prod = tape.mul(log_alpha, gap);
    tape.neg(prod)
}

fn soft_value(q: &Tensor, log_prob: &Tensor, alpha: f64) -> Vec<f64> {
    q.data()
        .iter()
        .zip(log_prob.data())
        .map(|(q, lp)| q - alpha * lp)
        .collect()
}

fn step(
    optimizers: &mut HashMap<(Purpose, GroupId), Adam>,
    purpose: Purpose,
    group: &mut ParamGroup,
    grads: &Gradients,
) -> Result<()> {
    let opt = optimizers
        .get_mut(&(purpose, group.id()))
        .expect("optimizer registered for every trained group");
    opt.step(group, &grads.for_group(group))
}

fn finite_loss(tape: &Tape, v: Var, what: &str) -> Result<f64> {
    let x = tape.scalar(v);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("{what} is {x}")))
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("length matches shape")
}
