//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed even when all
//! criteria pass. The process fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use hksl::analysis::{
    c_distance_matrix, collect_random_episodes, pca_project, probe_rollout_error, Factor, OracleSubject,
};
use hksl::envs::{random_action, Env, EnvConfig};
use hksl::evalstats::{
    iqm, optimality_gap, stratified_bootstrap_ci, ScoreMatrix, Statistic, DEFAULT_LEVEL, DEFAULT_RESAMPLES,
};
use hksl::hksl::{prediction_term, Hierarchy, HierarchyConfig};
use hksl::models::{build_forward_cell, build_projection, forward_cell, CellInputs, ModelDims};
use hksl::par::{self, Exec};
use hksl::replay::{ReplayMemory, TrajectoryBatch, Transition};
use hksl::sac::{Agent, SacConfig};
use hksl::tensor::{check_graph, check_model, GroupId, Mode, ParamGroup, Tape, Tensor, Var};
use hksl::trainer::{eval_seeds, evaluate_random, train_run, RunRecord, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// dim(z)=4, h=2, n=[1,3], k=3 on 12x12 frames.
fn mini_dims() -> ModelDims {
    ModelDims {
        grid: 12,
        channels: 9,
        conv_filters: 2,
        conv_strides: vec![2],
        z_dim: 4,
        action_dim: 2,
        comm_hidden: 6,
        projection_hidden: 6,
        hidden: 8,
        twin_q: true,
    }
}

fn mini_agent(no_c: bool, seed: u64) -> Agent {
    let h = HierarchyConfig {
        n: vec![1, 3],
        k: 3,
        no_c,
        ..HierarchyConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Agent::new(h, mini_dims(), SacConfig::default(), &mut rng).unwrap()
}

fn mini_batch(b: usize, k: usize, seed: u64) -> TrajectoryBatch {
    let d = mini_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrajectoryBatch {
        k,
        obs: (0..=k)
            .map(|_| random_tensor(&mut rng, &[b, d.grid, d.grid, d.channels], 0.0, 1.0))
            .collect(),
        actions: (0..k).map(|_| random_tensor(&mut rng, &[b, d.action_dim], -1.0, 1.0)).collect(),
        rewards: random_tensor(&mut rng, &[b, k], 0.0, 1.0),
        episode_ids: vec![0; b],
        starts: vec![0; b],
    }
}

fn sum_losses(tape: &mut Tape, losses: &[Var]) -> Var {
    losses[1..].iter().fold(losses[0], |acc, l| tape.add(acc, *l))
}

// 1
fn gradient_correctness() -> Outcome {
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: Vec<(String, f64)> = Vec::new();

    // Every primitive: loss = sum(op(inputs) * W) for a fixed random W.
    type Build = fn(&mut Tape, &[Var]) -> Var;
    let away_from_zero = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let mut t = random_tensor(rng, shape, 0.2, 1.5);
        for v in t.data_mut() {
            if rng.gen_bool(0.5) {
                *v = -*v;
            }
        }
        t
    };
    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        ("matmul", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[4, 2], -1.0, 1.0)], |t, v| t.matmul(v[0], v[1])),
        ("add_bias", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[4], -1.0, 1.0)], |t, v| t.add_bias(v[0], v[1])),
        ("linear", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[4, 5], -1.0, 1.0), random_tensor(&mut rng, &[5], -1.0, 1.0)], |t, v| t.linear(v[0], v[1], v[2])),
        ("add", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.add(v[0], v[1])),
        ("sub", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.mul(v[0], v[1])),
        ("minimum", vec![random_tensor(&mut rng, &[3, 4], -1.0, 0.0), random_tensor(&mut rng, &[3, 4], 0.1, 1.0)], |t, v| {
            let m = t.minimum(v[0], v[1]);
            let n = t.minimum(v[1], v[0]);
            t.add(m, n)
        }),
        ("scale", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.scale(v[0], -1.7)),
        ("add_scalar", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.add_scalar(v[0], 0.3)),
        ("neg", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.neg(v[0])),
        ("mul_scalar", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[1], 0.5, 1.5)], |t, v| t.mul_scalar(v[0], v[1])),
        ("relu", vec![away_from_zero(&mut rng, &[3, 4])], |t, v| t.relu(v[0])),
        ("tanh", vec![random_tensor(&mut rng, &[3, 4], -2.0, 2.0)], |t, v| t.tanh(v[0])),
        ("sigmoid", vec![random_tensor(&mut rng, &[3, 4], -2.0, 2.0)], |t, v| t.sigmoid(v[0])),
        ("exp", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.exp(v[0])),
        ("log", vec![random_tensor(&mut rng, &[3, 4], 0.5, 2.0)], |t, v| t.log(v[0])),
        ("square", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.square(v[0])),
        ("layer_norm", vec![random_tensor(&mut rng, &[3, 5], -1.0, 1.0), random_tensor(&mut rng, &[5], 0.5, 1.5), random_tensor(&mut rng, &[5], -1.0, 1.0)], |t, v| t.layer_norm(v[0], v[1], v[2])),
        ("l2_normalize", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.l2_normalize(v[0])),
        ("concat", vec![random_tensor(&mut rng, &[3, 2], -1.0, 1.0), random_tensor(&mut rng, &[3, 3], -1.0, 1.0)], |t, v| t.concat(&[v[0], v[1]])),
        ("slice_cols", vec![random_tensor(&mut rng, &[3, 5], -1.0, 1.0)], |t, v| t.slice_cols(v[0], 1, 3)),
        ("reshape", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.reshape(v[0], &[2, 6])),
        ("sum", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.sum(v[0])),
        ("mean", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.mean(v[0])),
        ("sum_cols", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.sum_cols(v[0])),
        ("sq_dist", vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[3, 4], -1.0, 1.0)], |t, v| t.sq_dist(v[0], v[1])),
        ("conv2d_s1", vec![random_tensor(&mut rng, &[2, 5, 5, 3], -1.0, 1.0), random_tensor(&mut rng, &[27, 2], -1.0, 1.0), random_tensor(&mut rng, &[2], -1.0, 1.0)], |t, v| t.conv2d(v[0], v[1], v[2], 1, 1)),
        ("conv2d_s2", vec![random_tensor(&mut rng, &[2, 6, 6, 2], -1.0, 1.0), random_tensor(&mut rng, &[18, 3], -1.0, 1.0), random_tensor(&mut rng, &[3], -1.0, 1.0)], |t, v| t.conv2d(v[0], v[1], v[2], 2, 1)),
    ];
    for (name, inputs, build) in cases {
        let mut group = ParamGroup::new(GroupId(0));
        for (i, t) in inputs.into_iter().enumerate() {
            group.push(format!("in{i}"), t);
        }
        // Output shape from one forward pass, then a fixed random weighting.
        let shape = {
            let mut tape = Tape::new();
            let v = tape.bind(&group, Mode::Frozen);
            let out = build(&mut tape, &v);
            tape.value(out).shape().to_vec()
        };
        let w = random_tensor(&mut rng, &shape, -1.0, 1.0);
        let err = check_graph(&group, EPS, |tape, v| {
            let y = build(tape, v);
            let wc = tape.constant(w.clone());
            let p = tape.mul(y, wc);
            Ok(tape.sum(p))
        })
        .map_err(|e| format!("{name}: {e}"))?;
        worst.push((name.to_string(), err));
    }

    // Composite losses on the miniature hierarchy.
    let agent = mini_agent(false, 3);
    let batch = mini_batch(3, 3, 4);
    let targets = agent.hierarchy.momentum_targets(&batch.obs).unwrap();
    let err = check_model(
        &agent.hierarchy,
        |h: &mut Hierarchy| h.trainable_groups_mut(),
        EPS,
        |tape, h| {
            let bound = h.bind(tape, Mode::Train);
            Ok(h.hksl_loss(tape, &bound, &batch.obs, &batch.actions, &targets)?.total)
        },
    )
    .map_err(|e| format!("representation loss: {e}"))?;
    worst.push(("representation_loss".into(), err));

    let err = check_model(
        &agent,
        |a: &mut Agent| a.critics.iter_mut().collect(),
        EPS,
        |tape, a| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let losses = a.critic_losses(tape, &batch, &targets, &mut rng)?;
            Ok(sum_losses(tape, &losses))
        },
    )
    .map_err(|e| format!("critic loss: {e}"))?;
    worst.push(("critic_loss".into(), err));

    let err = check_model(
        &agent,
        |a: &mut Agent| vec![&mut a.actor],
        EPS,
        |tape, a| {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            Ok(a.actor_losses(tape, &batch, &mut rng)?.0)
        },
    )
    .map_err(|e| format!("actor loss: {e}"))?;
    worst.push(("actor_loss".into(), err));

    let err = check_model(
        &agent,
        |a: &mut Agent| vec![&mut a.log_alpha],
        EPS,
        |tape, a| {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            Ok(a.actor_losses(tape, &batch, &mut rng)?.1)
        },
    )
    .map_err(|e| format!("temperature loss: {e}"))?;
    worst.push(("temperature_loss".into(), err));

    let (name, max) = worst
        .iter()
        .cloned()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    ensure(max < TOL, || format!("{name} has relative error {max:.3e} >= {TOL:e}"))?;
    Ok(format!("{} checks, worst {name} {max:.2e}", worst.len()))
}

// 2
fn gru_reduction() -> Outcome {
    let dims = ModelDims {
        z_dim: 8,
        ..ModelDims::default()
    };
    let (z, a) = (dims.z_dim, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cell = build_forward_cell(GroupId(1), &dims, a, false, &mut rng);
    let n = 1000;
    let zs = random_tensor(&mut rng, &[n, z], -1.0, 1.0);
    let acts = random_tensor(&mut rng, &[n, a], -1.0, 1.0);
    let mut tape = Tape::new();
    let p = tape.bind(&cell, Mode::Frozen);
    let zv = tape.constant(zs.clone());
    let av = tape.constant(acts.clone());
    let out = forward_cell(&mut tape, &p, CellInputs { z_prev: zv, actions: av, message: None }).unwrap();
    let got = tape.value(out).clone();

    // Textbook GRU, written out with explicit loops.
    let w = |name: &str| cell.get(cell.names().iter().position(|x| x == name).unwrap()).clone();
    let (wu, bu, wr, br, wh, bh) = (w("gru.u.w"), w("gru.u.b"), w("gru.r.w"), w("gru.r.b"), w("gru.h.w"), w("gru.h.b"));
    let affine = |x: &[f64], wt: &Tensor, b: &Tensor| -> Vec<f64> {
        (0..z)
            .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * wt.data()[i * z + j]).sum::<f64>())
            .collect()
    };
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut worst: f64 = 0.0;
    for row in 0..n {
        let zp = zs.row(row);
        let at = acts.row(row);
        let az: Vec<f64> = at.iter().chain(zp).copied().collect();
        let u: Vec<f64> = affine(&az, &wu, &bu).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = affine(&az, &wr, &br).into_iter().map(sigmoid).collect();
        let rz_a: Vec<f64> = (0..z).map(|i| r[i] * zp[i]).chain(at.iter().copied()).collect();
        let h: Vec<f64> = affine(&rz_a, &wh, &bh).into_iter().map(f64::tanh).collect();
        for i in 0..z {
            let g = (1.0 - u[i]) * zp[i] + u[i] * h[i];
            worst = worst.max((g - got.row(row)[i]).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e} > 1e-12"))?;
    Ok(format!("{n} pairs, max deviation {worst:.1e}"))
}

// 3
fn loss_geometry() -> Outcome {
    let dims = ModelDims {
        z_dim: 5,
        projection_hidden: 10,
        ..ModelDims::default()
    };
    let z = dims.z_dim;
    // Identity projection: relu(x) - relu(-x) = x.
    let mut proj = build_projection(GroupId(2), &dims, &mut ChaCha8Rng::seed_from_u64(0));
    proj.zero_all();
    for i in 0..z {
        proj.tensors_mut()[0].data_mut()[i * 2 * z + i] = 1.0;
        proj.tensors_mut()[0].data_mut()[i * 2 * z + z + i] = -1.0;
        proj.tensors_mut()[2].data_mut()[i * z + i] = 1.0;
        proj.tensors_mut()[2].data_mut()[(z + i) * z + i] = -1.0;
    }
    let u = [0.3, -1.2, 0.5, 2.0, 0.7];
    let mut v = [1.0, 0.4, -0.2, 0.1, 0.0];
    let uu: f64 = u.iter().map(|x| x * x).sum();
    let uv: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    for (vi, ui) in v.iter_mut().zip(&u) {
        *vi -= uv / uu * ui;
    }
    let target = Tensor::from_rows(&[u.to_vec(), u.to_vec(), u.to_vec()]).unwrap();
    let latent = Tensor::from_rows(&[
        u.iter().map(|x| 3.0 * x).collect(),
        v.to_vec(),
        u.iter().map(|x| -2.0 * x).collect(),
    ])
    .unwrap();
    let mut tape = Tape::new();
    let p = tape.bind(&proj, Mode::Frozen);
    let l = tape.constant(latent);
    let term = prediction_term(&mut tape, &p, l, &target).unwrap();
    let got = tape.value(term).data().to_vec();
    for (g, want) in got.iter().zip([0.0, 2.0, 4.0]) {
        ensure((g - want).abs() <= 1e-12, || format!("got {got:?}, want [0, 2, 4]"))?;
    }
    Ok(format!("parallel {:.1e}, orthogonal {:.15}, anti-parallel {:.15}", got[0], got[1], got[2]))
}

// 4
fn replay_safety() -> Outcome {
    let env_cfg = EnvConfig {
        grid: 12,
        episode_length: 30,
        ..EnvConfig::default()
    };
    let (episodes, k) = (6, 6);
    let mut env = Env::new(env_cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut replay = ReplayMemory::new(10_000);
    for e in 0..episodes {
        let mut obs = env.reset(e);
        loop {
            let action = random_action(&mut rng, 2);
            let res = env.step(&action).unwrap();
            replay.append(Transition {
                obs,
                action,
                reward: res.reward,
                next_obs: res.observation.clone(),
                done: res.done,
            });
            obs = res.observation;
            if res.done {
                break;
            }
        }
    }
    let t_len = env_cfg.episode_length;
    let mut counts = vec![0u64; t_len - k];
    let mut crossings = 0;
    for _ in 0..100 {
        let b = replay.sample_trajectories(100, k, &mut rng).unwrap();
        for (id, s) in b.episode_ids.iter().zip(&b.starts) {
            let len = replay.episode_len(*id).unwrap();
            if s + k > len || *s >= counts.len() {
                crossings += 1;
            } else {
                counts[*s] += 1;
            }
        }
    }
    ensure(crossings == 0, || format!("{crossings} trajectories cross an episode boundary"))?;
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    let p = ChiSquared::new((counts.len() - 1) as f64).unwrap().sf(stat);
    ensure(p > 0.001, || format!("chi-square {stat:.2}, p = {p:.2e}"))?;
    Ok(format!("10000 samples, 0 crossings, chi-square p = {p:.3}"))
}

// 5
fn gradient_routing() -> Outcome {
    let batch = mini_batch(4, 3, 51);
    let mut summary = Vec::new();
    for no_c in [false, true] {
        let agent = mini_agent(no_c, 52);
        let h = &agent.hierarchy;
        let targets = h.momentum_targets(&batch.obs).unwrap();
        let mut tape = Tape::new();
        let bound = h.bind(&mut tape, Mode::Train);
        let loss = h.hksl_loss(&mut tape, &bound, &batch.obs, &batch.actions, &targets).unwrap();
        let g = tape.backward(loss.per_level[0]).unwrap();
        let reaches = g.touches(&h.forward[1]) && g.group_norm_sq(&h.forward[1]) > 0.0;
        ensure(reaches == !no_c, || {
            format!("level-1 loss reaches level-2 forward cell: {reaches}, communication enabled: {}", !no_c)
        })?;
        let g = tape.backward(loss.total).unwrap();
        ensure(h.momentum.iter().all(|m| !g.touches(m)), || "momentum encoder got a representation gradient".into())?;
        summary.push(format!("comm={}: level-2 forward reached={reaches}", !no_c));
    }

    let agent = mini_agent(false, 53);
    let h = &agent.hierarchy;
    let targets = h.momentum_targets(&batch.obs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let mut tape = Tape::new();
    let losses = agent.critic_losses(&mut tape, &batch, &targets, &mut rng).unwrap();
    for (l, loss) in losses.iter().enumerate() {
        let g = tape.backward(*loss).unwrap();
        for m in 0..h.levels() {
            let touched = g.touches(h.encoder(m)) && g.group_norm_sq(h.encoder(m)) > 0.0;
            ensure(touched == (m == l), || format!("level-{} critic loss touches encoder {}: {touched}", l + 1, m + 1))?;
        }
        ensure(h.momentum.iter().all(|m| !g.touches(m)), || "momentum encoder got a critic gradient".into())?;
    }
    let mut tape = Tape::new();
    let (actor, alpha) = agent.actor_losses(&mut tape, &batch, &mut rng).unwrap();
    for loss in [actor, alpha] {
        let g = tape.backward(loss).unwrap();
        ensure(
            h.encoders.iter().chain(&h.momentum).all(|e| !g.touches(e)),
            || "actor or temperature loss reached an encoder".into(),
        )?;
    }
    summary.push("critic l only reaches encoder l; actor reaches no encoder; momentum untouched".into());
    Ok(summary.join("; "))
}

// 6
fn statistics_oracles() -> Outcome {
    let v: Vec<f64> = (1..=8).map(f64::from).collect();
    let m = iqm(&v).map_err(|e| e.to_string())?;
    ensure((m - 4.5).abs() < 1e-12, || format!("IQM([1..8]) = {m}"))?;
    let g = optimality_gap(&[0.5, 1.0]).map_err(|e| e.to_string())?;
    ensure((g - 0.25).abs() < 1e-12, || format!("optimality gap = {g}"))?;
    ensure(DEFAULT_RESAMPLES >= 5000, || format!("default resamples {DEFAULT_RESAMPLES}"))?;

    // Two runs (a, b) of one task: the resampled mean is a, (a+b)/2 or b
    // with probabilities 1/4, 1/2, 1/4.
    let (a, b) = (0.2, 0.6);
    let exact_quantile = |q: f64| {
        if q < 0.25 {
            a
        } else if q < 0.75 {
            (a + b) / 2.0
        } else {
            b
        }
    };
    let matrix = ScoreMatrix::new(vec!["task".into()], vec![vec![a, b]]).map_err(|e| e.to_string())?;
    for level in [DEFAULT_LEVEL, 0.4] {
        let ci = stratified_bootstrap_ci(&matrix, Statistic::Mean, DEFAULT_RESAMPLES, level, 0, Exec::default())
            .map_err(|e| e.to_string())?;
        let (lo, hi) = (exact_quantile((1.0 - level) / 2.0), exact_quantile((1.0 + level) / 2.0));
        ensure((ci.lo - lo).abs() <= 0.02 && (ci.hi - hi).abs() <= 0.02, || {
            format!("level {level}: CI [{}, {}], exact [{lo}, {hi}]", ci.lo, ci.hi)
        })?;
    }

    let help = Command::new(env!("CARGO_BIN_EXE_hksl"))
        .args(["stats", "--help"])
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&help.stdout);
    ensure(text.contains("[default: 5000]"), || "stats --help does not show a 5000 resample default".into())?;
    Ok("IQM 4.5, gap 0.25, 2-run CI matches exact quantiles, 5000 resamples by default".into())
}

// 7
fn learning_smoke_test() -> Outcome {
    let base = TrainConfig::load(&repo_root().join("configs/catch.toml")).map_err(|e| e.to_string())?;
    ensure(
        base.hierarchy.n == [1, 3] && base.hierarchy.k == 6 && base.batch_size == 32 && base.total_steps == 10_000,
        || "configs/catch.toml drifted from h=2, n=[1,3], k=6, batch 32, 10k steps".into(),
    )?;
    let seeds: Vec<u64> = (0..5).collect();
    let runs = par::map(Exec::default(), seeds.clone(), |seed| {
        let cfg = TrainConfig { seed, ..base.clone() };
        let start = Instant::now();
        let out = train_run(&cfg, Exec::Sequential, |_| {}).map(|o| o.record);
        eprintln!("  learning seed {seed} finished in {:.0?}", start.elapsed());
        out
    });
    let mut agent_scores = Vec::new();
    let mut random_scores = Vec::new();
    for (seed, run) in seeds.iter().zip(runs) {
        let record = run.map_err(|e| format!("seed {seed}: {e}"))?;
        let last = record.points.last().ok_or("no evaluation points")?;
        agent_scores.push(last.mean_return / record.header.max_return);
        let index = record.points.len() as u64 - 1;
        let eval = eval_seeds(*seed, index, base.eval_episodes);
        let r = evaluate_random(&base.env, &eval, Exec::default()).map_err(|e| e.to_string())?;
        random_scores.push(r / base.env.max_return());
    }
    let agent = iqm(&agent_scores).map_err(|e| e.to_string())?;
    let random = iqm(&random_scores).map_err(|e| e.to_string())?;
    ensure(agent >= 3.0 * random, || {
        format!("agent IQM {agent:.4} < 3 x random IQM {random:.4} (scores {agent_scores:.3?})")
    })?;
    Ok(format!("agent IQM {agent:.3} vs random IQM {random:.3} (scores {agent_scores:.3?})"))
}

fn json_keys(line: &str) -> Result<Vec<String>, String> {
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let mut keys: Vec<String> = v.as_object().ok_or("not an object")?.keys().cloned().collect();
    keys.sort();
    Ok(keys)
}

// 8
fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_hksl"))
        .args(["ablate", "--config"])
        .arg(repo_root().join("configs/catch.toml"))
        .args(["--total-steps", "2000", "--seeds", "0,1", "--out"])
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("ablate exited with {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
    })?;
    let variants = ["full", "no_repr", "all_n1", "no_c", "shared_encoder", "h1"];
    let mut schema: Option<(Vec<String>, Vec<String>, Vec<u64>)> = None;
    let mut count = 0;
    for v in variants {
        for seed in [0, 1] {
            let path = dir.path().join(v).join(format!("seed{seed}")).join("record.jsonl");
            let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let record = RunRecord::from_jsonl(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            ensure(record.header.ablation == v, || format!("{} labelled {}", path.display(), record.header.ablation))?;
            let mut lines = text.lines();
            let header = json_keys(lines.next().ok_or("empty record")?)?;
            let point = json_keys(lines.next().ok_or("record without points")?)?;
            let steps: Vec<u64> = record.points.iter().map(|p| p.step).collect();
            let this = (header, point, steps);
            match &schema {
                None => schema = Some(this),
                Some(s) => ensure(*s == this, || format!("{v} seed {seed} differs in schema: {this:?} vs {s:?}"))?,
            }
            count += 1;
        }
    }
    Ok(format!("{count} schema-identical records from one invocation"))
}

// 9
fn analysis_pipeline() -> Outcome {
    let env = EnvConfig {
        grid: 12,
        episode_length: 40,
        ..EnvConfig::default()
    };
    let fit = collect_random_episodes(&env, 20, 0, 91).map_err(|e| e.to_string())?;
    let eval = collect_random_episodes(&env, 10, 1000, 91).map_err(|e| e.to_string())?;
    let oracle = OracleSubject { skips: vec![1, 3], window: 6 };
    let rows = probe_rollout_error(&oracle, &fit, &eval, Exec::default()).map_err(|e| e.to_string())?;
    let coarse = rows
        .iter()
        .filter(|r| r.level == 1 && r.factor == Factor::Ball)
        .map(|r| r.mean)
        .fold(0.0, f64::max);
    let fine = rows
        .iter()
        .filter(|r| r.level == 0 && r.factor == Factor::Ball)
        .map(|r| r.mean)
        .fold(f64::INFINITY, f64::min);
    ensure(coarse < 1e-6, || format!("coarse-level ball error {coarse:e}"))?;
    ensure(fine > 0.01, || format!("fine-level ball error {fine}"))?;

    let agent = mini_agent(false, 92);
    let mut rng = ChaCha8Rng::seed_from_u64(93);
    let d = c_distance_matrix(&agent, &fit, 100, &mut rng).map_err(|e| e.to_string())?;
    for i in 0..d.len() {
        ensure(d[i][i] == 0.0, || format!("diagonal entry {i} is {}", d[i][i]))?;
        for j in 0..d.len() {
            ensure((d[i][j] - d[j][i]).abs() <= 1e-12, || format!("asymmetric at ({i}, {j})"))?;
        }
    }

    let dir: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let line: Vec<Vec<f64>> = (0..60)
        .map(|_| {
            let t: f64 = rng.gen_range(-2.0..2.0);
            dir.iter().map(|x| 1.0 + t * x).collect()
        })
        .collect();
    let pca = pca_project(&line, 3).map_err(|e| e.to_string())?;
    ensure((pca.explained_ratio[0] - 1.0).abs() <= 1e-6, || format!("rank-1 ratio {}", pca.explained_ratio[0]))?;
    let cloud: Vec<Vec<f64>> = (0..200).map(|_| (0..10).map(|j| rng.gen_range(-1.0..1.0) * (j + 1) as f64).collect()).collect();
    let pca2 = pca_project(&cloud, 4).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for p in [&pca, &pca2] {
        for (i, a) in p.components.iter().enumerate() {
            for (j, b) in p.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    ensure(worst <= 1e-8, || format!("components deviate from orthonormal by {worst:e}"))?;
    Ok(format!(
        "coarse ball error {coarse:.1e}, fine ball error {fine:.3}, {n}x{n} distances symmetric, rank-1 ratio {:.9}",
        pca.explained_ratio[0],
        n = d.len()
    ))
}

// 10
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = repo_root().join("configs/tiny.toml");
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let run_dir = dir.path().join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_hksl"))
            .args(["train", "--seed", "7", "--config"])
            .arg(&config)
            .arg("--run-dir")
            .arg(&run_dir)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        let record = std::fs::read(run_dir.join("record.jsonl")).map_err(|e| e.to_string())?;
        let ckpt = std::fs::read(run_dir.join("agent.ckpt")).map_err(|e| e.to_string())?;
        bytes.push((record, ckpt));
    }
    ensure(bytes[0].0 == bytes[1].0, || "run records differ".into())?;
    ensure(bytes[0].1 == bytes[1].1, || "checkpoints differ".into())?;
    Ok(format!("record {} bytes and checkpoint {} bytes identical", bytes[0].0.len(), bytes[0].1.len()))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "GRU reduction oracle", gru_reduction),
        (3, "loss geometry", loss_geometry),
        (4, "replay safety", replay_safety),
        (5, "gradient routing", gradient_routing),
        (6, "statistics oracles", statistics_oracles),
        (9, "analysis pipeline validity", analysis_pipeline),
        (10, "determinism", determinism),
        (8, "ablation harness parity", ablation_harness),
        (7, "end-to-end learning", learning_smoke_test),
    ];
    // HKSL_ACCEPTANCE=1,2,3 restricts the run to the listed criteria.
    let only: Option<Vec<u32>> = std::env::var("HKSL_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS in {secs:.1}s - {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL in {secs:.1}s - {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
