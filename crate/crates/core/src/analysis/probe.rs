use nalgebra::{DMatrix, DVector};

use crate::envs::{random_action, EnvConfig, EpisodeLog, GroundTruth};
use crate::error::{Error, Result};
use crate::models::encode_tensor;
use crate::par::{self, Exec};
use crate::sac::Agent;
use crate::tensor::{Mode, Tape, Tensor};

use super::observations;

const RIDGE: f64 = 1e-6;

/// Affine map from a representation to a low-dimensional target.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `[in, out]`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LinearProbe {
    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn predict(&self, rep: &[f64]) -> Result<Vec<f64>> {
        if rep.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "probe expects {} inputs, got {}",
                self.input_dim(),
                rep.len()
            )));
        }
        let x = DVector::from_column_slice(rep);
        Ok((self.weights.tr_mul(&x) + &self.bias).iter().copied().collect())
    }

    /// Mean squared error summed over target dimensions.
    pub fn residual(&self, reps: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in reps.iter().zip(targets) {
            let p = self.predict(x)?;
            total += p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(total / reps.len().max(1) as f64)
    }
}

/// Least-squares affine fit with a small ridge on the weights (the bias is
/// not penalized).
pub fn fit_linear_probe(reps: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<LinearProbe> {
    let n = reps.len();
    if n != targets.len() {
        return Err(Error::shape(format!("{n} representations but {} targets", targets.len())));
    }
    let d = reps.first().map_or(0, Vec::len);
    let o = targets.first().map_or(0, Vec::len);
    if d == 0 || o == 0 {
        return Err(Error::invalid("probe needs non-empty inputs and targets"));
    }
    if n < d + 1 {
        return Err(Error::invalid(format!("probe on {d} dims needs at least {} samples, got {n}", d + 1)));
    }
    if reps.iter().any(|r| r.len() != d) || targets.iter().any(|t| t.len() != o) {
        return Err(Error::shape("ragged probe data"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| reps[i][j]);
    let y = DMatrix::from_fn(n, o, |i, j| targets[i][j]);
    let x_mean = x.row_mean();
    let y_mean = y.row_mean();
    let mut xc = x;
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    let mut yc = y;
    for mut row in yc.row_iter_mut() {
        row -= &y_mean;
    }
    let mut gram = xc.tr_mul(&xc);
    for i in 0..d {
        gram[(i, i)] += RIDGE;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("probe design matrix is singular even with ridge"))?;
    let weights = chol.solve(&xc.tr_mul(&yc));
    let bias = (y_mean - x_mean * &weights).transpose();
    if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe solution".into()));
    }
    Ok(LinearProbe { weights, bias })
}

/// Anything with per-level encoders and forward models to probe.
pub trait ProbeSubject: Sync {
    fn levels(&self) -> usize;
    /// Environment steps covered by one rollout window.
    fn window(&self) -> usize;
    fn skip(&self, level: usize) -> usize;
    /// Encodings of observations `times` of `episode`: one `[times.len(), z]`
    /// tensor per level, finest first.
    fn encode(&self, episode: &EpisodeLog, times: &[usize]) -> Result<Vec<Tensor>>;
    /// Rollouts from every start through the recorded actions. Per level
    /// (finest first), `window / skip + 1` tensors `[starts.len(), z]`; entry
    /// `j` belongs to environment step `start + j * skip`.
    fn rollout(&self, episode: &EpisodeLog, starts: &[usize]) -> Result<Vec<Vec<Tensor>>>;
}

impl ProbeSubject for Agent {
    fn levels(&self) -> usize {
        self.hierarchy.levels()
    }

    fn window(&self) -> usize {
        self.hierarchy.config().k
    }

    fn skip(&self, level: usize) -> usize {
        self.hierarchy.skip(level)
    }

    fn encode(&self, episode: &EpisodeLog, times: &[usize]) -> Result<Vec<Tensor>> {
        let obs = observations(episode, times)?;
        (0..self.levels())
            .map(|l| encode_tensor(self.hierarchy.encoder(l), self.dims(), &obs))
            .collect()
    }

    fn rollout(&self, episode: &EpisodeLog, starts: &[usize]) -> Result<Vec<Vec<Tensor>>> {
        let k = self.window();
        let obs = observations(episode, starts)?;
        let actions = (0..k)
            .map(|i| {
                let rows: Vec<Vec<f64>> = starts.iter().map(|&s| episode.actions[s + i].clone()).collect();
                Tensor::from_rows(&rows)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let bound = self.hierarchy.bind(&mut tape, Mode::Frozen);
        let mut rollouts = self.hierarchy.rollout(&mut tape, &bound, &obs, &actions)?;
        rollouts.reverse();
        Ok(rollouts
            .iter()
            .map(|r| r.latents.iter().map(|&v| tape.value(v).clone()).collect())
            .collect())
    }
}

/// Test double whose top-level latent is the true ball position and whose
/// other levels see only the cup. Probing it checks the measurement
/// pipeline: the top level must locate the ball exactly.
#[derive(Clone, Debug)]
pub struct OracleSubject {
    pub skips: Vec<usize>,
    pub window: usize,
}

impl OracleSubject {
    fn latent(&self, level: usize, gt: &GroundTruth) -> Vec<f64> {
        if level + 1 == self.skips.len() {
            gt.ball.to_vec()
        } else {
            gt.cup.to_vec()
        }
    }
}

impl ProbeSubject for OracleSubject {
    fn levels(&self) -> usize {
        self.skips.len()
    }

    fn window(&self) -> usize {
        self.window
    }

    fn skip(&self, level: usize) -> usize {
        self.skips[level]
    }

    fn encode(&self, episode: &EpisodeLog, times: &[usize]) -> Result<Vec<Tensor>> {
        (0..self.levels())
            .map(|l| {
                let rows: Vec<Vec<f64>> = times.iter().map(|&t| self.latent(l, &episode.ground_truth[t])).collect();
                Tensor::from_rows(&rows)
            })
            .collect()
    }

    fn rollout(&self, episode: &EpisodeLog, starts: &[usize]) -> Result<Vec<Vec<Tensor>>> {
        (0..self.levels())
            .map(|l| {
                let skip = self.skips[l];
                (0..=self.window / skip)
                    .map(|j| {
                        let rows: Vec<Vec<f64>> = starts
                            .iter()
                            .map(|&s| self.latent(l, &episode.ground_truth[s + j * skip]))
                            .collect();
                        Tensor::from_rows(&rows)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Ground-truth factor a probe predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    Ball,
    Cup,
}

impl Factor {
    pub const ALL: [Factor; 2] = [Factor::Ball, Factor::Cup];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Ball => "ball",
            Factor::Cup => "cup",
        }
    }

    pub fn of(self, gt: &GroundTruth) -> Vec<f64> {
        match self {
            Factor::Ball => gt.ball.to_vec(),
            Factor::Cup => gt.cup.to_vec(),
        }
    }
}

/// Aggregated probe error of one level and factor at one step of the window.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeErrorRow {
    /// 0 is the finest level.
    pub level: usize,
    /// 1-based step in the window; step 1 is the encoder output.
    pub step: usize,
    pub factor: Factor,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Random-policy episodes with consecutive ids starting at `first_id`.
pub fn collect_random_episodes(env: &EnvConfig, count: usize, first_id: u64, seed: u64) -> Result<Vec<EpisodeLog>> {
    use rand::SeedableRng;
    (0..count as u64)
        .map(|i| {
            let id = first_id + i;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            EpisodeLog::record(env, id, seed.wrapping_add(id), |_| random_action(&mut rng, env.action_dim()))
        })
        .collect()
}

/// Fits one probe per level and factor on encoder outputs of the fit
/// episodes, then measures how well each level's rollout latents locate
/// ball and cup on the eval episodes.
pub fn probe_rollout_error<S: ProbeSubject + ?Sized>(
    subject: &S,
    fit_episodes: &[EpisodeLog],
    eval_episodes: &[EpisodeLog],
    exec: Exec,
) -> Result<Vec<ProbeErrorRow>> {
    if let Some(e) = eval_episodes
        .iter()
        .find(|e| fit_episodes.iter().any(|f| f.id == e.id))
    {
        return Err(Error::invalid(format!("episode {} is in both the fit and eval sets", e.id)));
    }
    let levels = subject.levels();
    let k = subject.window();

    // Fit.
    let per_episode = par::map(exec, fit_episodes.iter().collect(), |ep: &EpisodeLog| {
        let times: Vec<usize> = (0..=ep.len()).collect();
        subject.encode(ep, &times).map(|z| (ep, z))
    });
    let mut reps = vec![Vec::new(); levels];
    let mut targets = vec![Vec::new(); Factor::ALL.len()];
    for item in per_episode {
        let (ep, z) = item?;
        for (l, t) in z.iter().enumerate() {
            reps[l].extend((0..t.rows()).map(|i| t.row(i).to_vec()));
        }
        for (f, factor) in Factor::ALL.iter().enumerate() {
            targets[f].extend(ep.ground_truth.iter().map(|g| factor.of(g)));
        }
    }
    let probes = (0..levels)
        .map(|l| {
            Factor::ALL
                .iter()
                .enumerate()
                .map(|(f, _)| fit_linear_probe(&reps[l], &targets[f]))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    // errors[l][f][offset] collects every distance at that window offset.
    let per_episode = par::map(exec, eval_episodes.iter().collect(), |ep: &EpisodeLog| {
        let starts: Vec<usize> = (0..).map(|w| w * k).take_while(|s| s + k <= ep.len()).collect();
        let mut errs = vec![vec![vec![Vec::new(); k + 1]; Factor::ALL.len()]; levels];
        if starts.is_empty() {
            return Ok(errs);
        }
        let rollouts = subject.rollout(ep, &starts)?;
        for (l, latents) in rollouts.iter().enumerate() {
            let skip = subject.skip(l);
            for (j, z) in latents.iter().enumerate() {
                let offset = j * skip;
                if offset > k {
                    return Err(Error::invalid(format!("level {l} step {j} lies past the window")));
                }
                for (w, &s) in starts.iter().enumerate() {
                    let gt = &ep.ground_truth[s + offset];
                    for (f, factor) in Factor::ALL.iter().enumerate() {
                        let p = probes[l][f].predict(z.row(w))?;
                        let truth = factor.of(gt);
                        let d = p.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                        errs[l][f][offset].push(d);
                    }
                }
            }
        }
        Ok(errs)
    });
    let mut all = vec![vec![vec![Vec::new(); k + 1]; Factor::ALL.len()]; levels];
    for errs in per_episode {
        for (l, by_factor) in errs?.into_iter().enumerate() {
            for (f, by_offset) in by_factor.into_iter().enumerate() {
                for (o, v) in by_offset.into_iter().enumerate() {
                    all[l][f][o].extend(v);
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (l, by_factor) in all.iter().enumerate() {
        for (f, by_offset) in by_factor.iter().enumerate() {
            for (o, v) in by_offset.iter().enumerate() {
                if v.is_empty() {
                    continue;
                }
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
                rows.push(ProbeErrorRow {
                    level: l,
                    step: o + 1,
                    factor: Factor::ALL[f],
                    mean,
                    std: var.sqrt(),
                    count: v.len(),
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Task;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn exact_linear_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_rows(&mut rng, 200, 8);
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|r| vec![r.iter().sum::<f64>() + 0.3, r[0] - 2.0 * r[5] - 1.0])
            .collect();
        let p = fit_linear_probe(&x, &y).unwrap();
        assert!(p.residual(&x, &y).unwrap() < 1e-8);
    }

    #[test]
    fn constant_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_rows(&mut rng, 50, 5);
        let y = vec![vec![0.7, -0.2]; 50];
        let p = fit_linear_probe(&x, &y).unwrap();
        assert!(p.weights.amax() < 1e-9);
        assert!((p.bias[0] - 0.7).abs() < 1e-9 && (p.bias[1] + 0.2).abs() < 1e-9);
    }

    #[test]
    fn beats_mean_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = random_rows(&mut rng, 60, 10);
            let y = random_rows(&mut rng, 60, 2);
            let p = fit_linear_probe(&x, &y).unwrap();
            let mean: Vec<f64> = (0..2).map(|j| y.iter().map(|r| r[j]).sum::<f64>() / 60.0).collect();
            let base = y
                .iter()
                .map(|r| r.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .sum::<f64>()
                / 60.0;
            assert!(p.residual(&x, &y).unwrap() <= base + 1e-12);
        }
    }

    #[test]
    fn too_few_samples() {
        let x = vec![vec![0.0; 4]; 4];
        let y = vec![vec![0.0; 2]; 4];
        assert!(fit_linear_probe(&x, &y).is_err());
    }

    fn small_env() -> EnvConfig {
        EnvConfig {
            task: Task::TwoTimescaleCatch,
            episode_length: 30,
            grid: 12,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn oracle_top_level_locates_ball() {
        let env = small_env();
        let fit = collect_random_episodes(&env, 6, 0, 3).unwrap();
        let eval = collect_random_episodes(&env, 4, 100, 3).unwrap();
        let oracle = OracleSubject { skips: vec![1, 3], window: 6 };
        let rows = probe_rollout_error(&oracle, &fit, &eval, Exec::default()).unwrap();
        for r in &rows {
            assert!(r.mean.is_finite() && r.mean >= 0.0);
            if r.level == 1 {
                assert_eq!((r.step - 1) % 3, 0, "coarse level reported off its grid");
            }
        }
        let top_ball = rows.iter().filter(|r| r.level == 1 && r.factor == Factor::Ball);
        assert!(top_ball.clone().count() == 3);
        assert!(top_ball.clone().all(|r| r.mean < 1e-6));
        assert!(rows
            .iter()
            .filter(|r| r.level == 0 && r.factor == Factor::Ball)
            .all(|r| r.mean > 0.01));
    }

    #[test]
    fn overlapping_sets_rejected() {
        let env = small_env();
        let fit = collect_random_episodes(&env, 3, 0, 3).unwrap();
        let eval = collect_random_episodes(&env, 2, 2, 3).unwrap();
        let oracle = OracleSubject { skips: vec![1, 3], window: 6 };
        assert!(probe_rollout_error(&oracle, &fit, &eval, Exec::default()).is_err());
    }
}
