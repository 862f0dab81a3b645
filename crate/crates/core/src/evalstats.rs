//! Aggregate score statistics over (task x run) matrices of normalized
//! returns: interquartile mean, optimality gap and stratified bootstrap
//! confidence intervals.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::trainer::RunRecord;

pub const DEFAULT_RESAMPLES: usize = 5000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Mean of the values left after sorting and dropping `floor(m / 4)` from
/// each end.
pub fn iqm(scores: &[f64]) -> Result<f64> {
    let m = scores.len();
    if m < 4 {
        return Err(Error::invalid(format!("IQM needs at least 4 values, got {m}")));
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    let cut = m / 4;
    let kept = &v[cut..m - cut];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Mean shortfall below 1: `mean(1 - min(score, 1))`.
pub fn optimality_gap(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("optimality gap of no scores"));
    }
    Ok(scores.iter().map(|s| 1.0 - s.min(1.0)).sum::<f64>() / scores.len() as f64)
}

pub fn mean(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("mean of no scores"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Statistic {
    Iqm,
    OptimalityGap,
    Mean,
}

impl Statistic {
    pub fn name(self) -> &'static str {
        match self {
            Statistic::Iqm => "iqm",
            Statistic::OptimalityGap => "optimality_gap",
            Statistic::Mean => "mean",
        }
    }

    pub fn eval(self, scores: &[f64]) -> Result<f64> {
        match self {
            Statistic::Iqm => iqm(scores),
            Statistic::OptimalityGap => optimality_gap(scores),
            Statistic::Mean => mean(scores),
        }
    }
}

/// Normalized scores, one row of runs per task.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub tasks: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(tasks: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if tasks.len() != rows.len() || rows.is_empty() {
            return Err(Error::invalid("score matrix needs one non-empty row per task"));
        }
        if rows.iter().any(|r| r.is_empty() || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("score rows must be non-empty and finite"));
        }
        Ok(Self { tasks, rows })
    }

    pub fn pooled(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// Non-fatal conditions reported alongside an interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CiWarning {
    /// Every task has a single run; the interval is the point estimate.
    SingleRun,
}

impl CiWarning {
    pub fn code(self) -> &'static str {
        match self {
            CiWarning::SingleRun => "W001-single-run",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub warning: Option<CiWarning>,
}

/// Percentile interval of `statistic` over resamples that redraw runs with
/// replacement independently within each task. Resample `i` uses stream `i`
/// of `seed`, so results do not depend on the execution mode.
pub fn stratified_bootstrap_ci(
    matrix: &ScoreMatrix,
    statistic: Statistic,
    resamples: usize,
    level: f64,
    seed: u64,
    exec: Exec,
) -> Result<Interval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    if resamples == 0 {
        return Err(Error::invalid("at least one resample required"));
    }
    let point = statistic.eval(&matrix.pooled())?;
    if matrix.rows.iter().all(|r| r.len() == 1) {
        return Ok(Interval {
            point,
            lo: point,
            hi: point,
            warning: Some(CiWarning::SingleRun),
        });
    }
    let draws = par::map_range(exec, resamples, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut pooled = Vec::with_capacity(matrix.rows.iter().map(Vec::len).sum());
        for row in &matrix.rows {
            for _ in 0..row.len() {
                pooled.push(row[rng.gen_range(0..row.len())]);
            }
        }
        statistic.eval(&pooled)
    });
    let mut draws = draws.into_iter().collect::<Result<Vec<f64>>>()?;
    draws.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(Interval {
        point,
        lo: quantile(&draws, tail),
        hi: quantile(&draws, 1.0 - tail),
        warning: None,
    })
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One output line of the statistics table.
#[derive(Clone, Debug, PartialEq)]
pub struct StatRow {
    pub method: String,
    pub step: u64,
    pub statistic: &'static str,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub warning: Option<&'static str>,
}

/// IQM, optimality gap and mean with intervals for every (method, step)
/// shared by all runs of the method. Methods are keyed by the record's
/// ablation label; tasks stratify the resampling. Statistics that cannot be
/// computed (IQM with fewer than four runs) are reported in the second list.
pub fn stats_table(
    records: &[RunRecord],
    resamples: usize,
    level: f64,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<StatRow>, Vec<String>)> {
    if records.is_empty() {
        return Err(Error::invalid("no run records"));
    }
    let mut by_method: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_method.entry(r.header.ablation.as_str()).or_default().push(r);
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (method, runs) in by_method {
        let mut steps: Vec<u64> = runs[0].points.iter().map(|p| p.step).collect();
        steps.retain(|s| runs.iter().all(|r| r.points.iter().any(|p| p.step == *s)));
        for step in steps {
            let mut by_task: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for r in &runs {
                let p = r.points.iter().find(|p| p.step == step).expect("step shared");
                by_task
                    .entry(r.header.task.as_str())
                    .or_default()
                    .push(p.mean_return / r.header.max_return);
            }
            let matrix = ScoreMatrix::new(
                by_task.keys().map(|k| k.to_string()).collect(),
                by_task.into_values().collect(),
            )?;
            for stat in [Statistic::Iqm, Statistic::OptimalityGap, Statistic::Mean] {
                match stratified_bootstrap_ci(&matrix, stat, resamples, level, seed, exec) {
                    Ok(ci) => rows.push(StatRow {
                        method: method.to_string(),
                        step,
                        statistic: stat.name(),
                        value: ci.point,
                        lo: ci.lo,
                        hi: ci.hi,
                        warning: ci.warning.map(CiWarning::code),
                    }),
                    Err(e) => skipped.push(format!("{method} step {step} {}: {e}", stat.name())),
                }
            }
        }
    }
    Ok((rows, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    #[test]
    fn iqm_examples() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(iqm(&v).unwrap(), 4.5);
        assert_eq!(iqm(&[0.3; 9]).unwrap(), 0.3);
        let mut outlier = v.clone();
        outlier[7] = 1e9;
        assert_eq!(iqm(&outlier).unwrap(), 4.5);
        assert!(iqm(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn optimality_gap_examples() {
        assert_eq!(optimality_gap(&[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(optimality_gap(&[0.5, 1.0]).unwrap(), 0.25);
        assert_eq!(optimality_gap(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(optimality_gap(&[1.5]).unwrap(), 0.0);
    }

    #[test]
    fn constant_matrix_collapses() {
        let m = ScoreMatrix::new(vec!["a".into(), "b".into()], vec![vec![0.4; 5], vec![0.4; 3]]).unwrap();
        let ci = stratified_bootstrap_ci(&m, Statistic::Iqm, 500, 0.95, 1, Exec::Sequential).unwrap();
        assert_eq!((ci.lo, ci.point, ci.hi), (0.4, 0.4, 0.4));
    }

    #[test]
    fn seeded_and_mode_independent() {
        let m = ScoreMatrix::new(vec!["a".into()], vec![(0..10).map(|i| i as f64 / 10.0).collect()]).unwrap();
        let a = stratified_bootstrap_ci(&m, Statistic::Mean, 2000, 0.95, 7, Exec::Sequential).unwrap();
        let b = stratified_bootstrap_ci(&m, Statistic::Mean, 2000, 0.95, 7, Exec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_run_case_matches_exact_distribution() {
        // Resampled mean is 0, 0.5, 1 with probability 1/4, 1/2, 1/4, so the
        // 2.5% and 97.5% quantiles are exactly 0 and 1.
        let m = ScoreMatrix::new(vec!["a".into()], vec![vec![0.0, 1.0]]).unwrap();
        let ci = stratified_bootstrap_ci(&m, Statistic::Mean, DEFAULT_RESAMPLES, 0.95, 3, Exec::default()).unwrap();
        assert!((ci.lo - 0.0).abs() <= 0.02 && (ci.hi - 1.0).abs() <= 0.02, "{ci:?}");
    }

    #[test]
    fn single_run_warns() {
        let m = ScoreMatrix::new(vec!["a".into(), "b".into()], vec![vec![0.2], vec![0.6]]).unwrap();
        let ci = stratified_bootstrap_ci(&m, Statistic::Mean, 100, 0.95, 0, Exec::Sequential).unwrap();
        assert_eq!(ci.warning, Some(CiWarning::SingleRun));
        assert_eq!(ci.lo, ci.hi);
    }

    proptest! {
        #[test]
        fn iqm_permutation_invariant(mut v in prop::collection::vec(-100.0f64..100.0, 4..40), seed in 0u64..1000) {
            let a = iqm(&v).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            v.shuffle(&mut rng);
            prop_assert!((iqm(&v).unwrap() - a).abs() < 1e-9);
        }

        #[test]
        fn gap_in_unit_interval(v in prop::collection::vec(0.0f64..1.0, 1..30)) {
            let g = optimality_gap(&v).unwrap();
            prop_assert!((0.0..=1.0).contains(&g));
        }

        #[test]
        fn interval_brackets_point(v in prop::collection::vec(0.0f64..1.0, 4..20), seed in 0u64..100) {
            let m = ScoreMatrix::new(vec!["t".into()], vec![v]).unwrap();
            for stat in [Statistic::Mean, Statistic::Iqm] {
                let ci = stratified_bootstrap_ci(&m, stat, 400, 0.95, seed, Exec::Sequential).unwrap();
                prop_assert!(ci.lo <= ci.point + 1e-12 && ci.point <= ci.hi + 1e-12, "{:?}", ci);
            }
        }
    }
}
