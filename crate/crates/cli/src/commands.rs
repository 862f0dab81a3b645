use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hksl::analysis::{
    c_distance_matrix, collect_random_episodes, comm_messages, pca_project, probe_rollout_error,
};
use hksl::envs::EpisodeLog;
use hksl::evalstats::stats_table;
use hksl::par::{self, Exec};
use hksl::sac::Agent;
use hksl::tensor::checkpoint::{self, write_atomic};
use hksl::trainer::{
    build_agent, eval_seeds, evaluate, observation_tensor, train_run, Ablation, RunRecord, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::svg::{line_chart, Series};
use crate::ConfigArgs;

const RECORD_FILE: &str = "record.jsonl";
const CHECKPOINT_FILE: &str = "agent.ckpt";
const CONFIG_FILE: &str = "config.toml";

fn base_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p).map_err(CliError::config)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.total_steps {
        cfg.total_steps = s;
    }
    if let Some(e) = args.eval_every {
        cfg.eval_every = e;
    }
    Ok(cfg)
}

fn print_hash(cfg: &TrainConfig) {
    println!("config hash: {}", cfg.hash());
}

/// Trains `cfg` and writes config, checkpoint and record into `dir`.
fn run_and_save(cfg: &TrainConfig, dir: &Path, exec: Exec) -> Result<RunRecord> {
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let label = format!("{} seed {}", cfg.ablation, cfg.seed);
    let out = train_run(cfg, exec, |p| {
        eprintln!("[{label}] step {} return {:.3}", p.step, p.mean_return);
    })?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &out.agent.to_records())?;
    let mut record = out.record;
    record.header.checkpoint = Some(CHECKPOINT_FILE.into());
    record.save(&dir.join(RECORD_FILE))?;
    Ok(record)
}

pub fn train(
    args: &ConfigArgs,
    seed: Option<u64>,
    ablation: Option<&str>,
    run_dir: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let mut cfg = base_config(args)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(a) = ablation {
        cfg.ablation = Ablation::parse(a).map_err(CliError::config)?;
    }
    cfg.validate().map_err(CliError::config)?;
    print_hash(&cfg);
    let dir = run_dir.unwrap_or_else(|| out.join(cfg.ablation.name()).join(format!("seed{}", cfg.seed)));
    let record = run_and_save(&cfg, &dir, Exec::default())?;
    println!(
        "wrote {} (final return {:.3})",
        dir.join(RECORD_FILE).display(),
        record.final_return().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn ablate(args: &ConfigArgs, seeds: &[u64], out: &Path, workers: Option<usize>) -> Result<()> {
    let base = base_config(args)?;
    base.validate().map_err(CliError::config)?;
    let h = &base.hierarchy;
    if base.ablation != Ablation::Full || h.no_c || h.shared_encoder || h.all_n1 {
        return Err(CliError::Config(
            "ablate expands the full configuration; leave ablation and the hierarchy switches unset".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(CliError::Config("no seeds given".into()));
    }
    let mut jobs = Vec::new();
    for a in Ablation::ALL {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.ablation = a;
            cfg.seed = seed;
            cfg.validate().map_err(CliError::config)?;
            println!("{a} seed {seed} config hash: {}", cfg.hash());
            let dir = out.join(a.name()).join(format!("seed{seed}"));
            jobs.push((cfg, dir));
        }
    }
    let workers = workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    // One run per worker; runs are single-threaded when several share the CPU.
    let inner = if workers > 1 { Exec::Sequential } else { Exec::default() };
    let results = par::with_workers(workers, || {
        par::map(Exec::Parallel, jobs, |(cfg, dir)| {
            let r = run_and_save(&cfg, &dir, inner);
            (cfg, r)
        })
    });
    let total = results.len();
    let mut first_err = None;
    for (cfg, r) in results {
        match r {
            Ok(_) => {}
            Err(e) => {
                eprintln!("{} seed {} failed: {e}", cfg.ablation, cfg.seed);
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => {
            println!("{total} runs written under {}", out.display());
            Ok(())
        }
    }
}

fn load_run(dir: &Path) -> Result<(TrainConfig, Agent)> {
    let cfg = TrainConfig::load(&dir.join(CONFIG_FILE)).map_err(CliError::config)?;
    print_hash(&cfg);
    let mut agent = build_agent(&cfg, Exec::default())?;
    agent.load_records(&checkpoint::load(&dir.join(CHECKPOINT_FILE))?)?;
    Ok((cfg, agent))
}

pub fn eval(run: &Path, episodes: usize, seed: u64) -> Result<()> {
    if episodes == 0 {
        return Err(CliError::Config("episodes must be positive".into()));
    }
    let (cfg, agent) = load_run(run)?;
    let seeds = eval_seeds(seed, 0, episodes);
    let mean = evaluate(&agent, &cfg.env, &seeds, Exec::default())?;
    println!(
        "mean return {mean:.4} normalized {:.4} over {episodes} episodes",
        mean / cfg.env.max_return()
    );
    Ok(())
}

fn has_glob_chars(s: &str) -> bool {
    s.contains(['*', '?', '['])
}

fn find_records(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            find_records(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == RECORD_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

fn record_paths(inputs: &[String]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for input in inputs {
        if has_glob_chars(input) {
            let matches = glob::glob(input).map_err(CliError::config)?;
            for m in matches {
                let p = m.map_err(|e| CliError::Runtime(e.to_string()))?;
                if p.is_dir() {
                    find_records(&p, &mut paths)?;
                } else {
                    paths.push(p);
                }
            }
        } else {
            let p = PathBuf::from(input);
            if p.is_dir() {
                find_records(&p, &mut paths)?;
            } else if p.exists() {
                paths.push(p);
            } else {
                return Err(CliError::Config(format!("no such record: {input}")));
            }
        }
    }
    paths.sort();
    paths.dedup();
    if paths.is_empty() {
        return Err(CliError::Config("inputs matched no run records".into()));
    }
    Ok(paths)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn stats(inputs: &[String], resamples: usize, level: f64, seed: u64, output: &Path) -> Result<()> {
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(CliError::Config("resamples must be positive and level in (0, 1)".into()));
    }
    let paths = record_paths(inputs)?;
    let records = paths
        .iter()
        .map(|p| RunRecord::load(p))
        .collect::<hksl::Result<Vec<_>>>()?;
    let mut hashes: Vec<&str> = records.iter().map(|r| r.header.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    for h in hashes {
        println!("config hash: {h}");
    }
    let (rows, skipped) = stats_table(&records, resamples, level, seed, Exec::default())?;
    for s in &skipped {
        eprintln!("skipped: {s}");
    }
    for r in rows.iter().filter(|r| r.warning.is_some()) {
        eprintln!(
            "warning {}: {} step {} {}",
            r.warning.unwrap_or_default(),
            r.method,
            r.step,
            r.statistic
        );
    }
    let bytes = csv_bytes(
        &["method", "step", "statistic", "value", "lo", "hi"],
        rows.iter().map(|r| {
            vec![
                r.method.clone(),
                r.step.to_string(),
                r.statistic.to_string(),
                r.value.to_string(),
                r.lo.to_string(),
                r.hi.to_string(),
            ]
        }),
    )?;
    write_atomic(output, &bytes)?;
    println!("{} rows from {} records written to {}", rows.len(), records.len(), output.display());
    Ok(())
}

pub fn probe(run: &Path, fit: usize, eval: usize, seed: u64, output: &Path) -> Result<()> {
    let (cfg, agent) = load_run(run)?;
    let fit_eps = collect_random_episodes(&cfg.env, fit, 0, seed)?;
    let eval_eps = collect_random_episodes(&cfg.env, eval, fit as u64, seed)?;
    let rows = probe_rollout_error(&agent, &fit_eps, &eval_eps, Exec::default())?;
    let bytes = csv_bytes(
        &["level", "step", "factor", "mean", "std", "count"],
        rows.iter().map(|r| {
            vec![
                (r.level + 1).to_string(),
                r.step.to_string(),
                r.factor.name().to_string(),
                r.mean.to_string(),
                r.std.to_string(),
                r.count.to_string(),
            ]
        }),
    )?;
    write_atomic(output, &bytes)?;
    println!("{} probe rows written to {}", rows.len(), output.display());
    Ok(())
}

/// Episodes driven by the agent's stochastic policy.
fn policy_episodes(cfg: &TrainConfig, agent: &Agent, count: usize, seed: u64) -> Result<Vec<EpisodeLog>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(count);
    for id in 0..count as u64 {
        let mut failure = None;
        let log = EpisodeLog::record(&cfg.env, id, seed.wrapping_add(id), |obs| {
            match agent.act(&observation_tensor(obs), true, &mut rng) {
                Ok(a) => a.data().to_vec(),
                Err(e) => {
                    failure.get_or_insert(e);
                    vec![0.0; cfg.env.action_dim()]
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e.into());
        }
        episodes.push(log);
    }
    Ok(episodes)
}

pub fn commanalysis(
    run: &Path,
    episodes: usize,
    trajectories: usize,
    pca_trajectories: usize,
    seed: u64,
    output: &Path,
) -> Result<()> {
    let (cfg, agent) = load_run(run)?;
    if agent.levels() < 2 {
        return Err(CliError::Config("communication analysis needs a hierarchy of at least two levels".into()));
    }
    let eps = policy_episodes(&cfg, &agent, episodes, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = c_distance_matrix(&agent, &eps, trajectories, &mut rng)?;
    let n = dist.len();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|t| t.to_string()));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let bytes = csv_bytes(
        &header,
        dist.iter().enumerate().map(|(i, row)| {
            let mut r = vec![(i + 1).to_string()];
            r.extend(row.iter().map(f64::to_string));
            r
        }),
    )?;
    write_atomic(&output.join("distance.csv"), &bytes)?;

    let messages = comm_messages(&agent, &eps, pca_trajectories, &mut rng)?;
    let flat: Vec<Vec<f64>> = messages.iter().flatten().cloned().collect();
    let pca = pca_project(&flat, 2)?;
    let mut coords = pca.coordinates.iter();
    let mut rows = Vec::new();
    for (i, traj) in messages.iter().enumerate() {
        for t in 0..traj.len() {
            let c = coords.next().expect("one coordinate row per message");
            rows.push(vec![i.to_string(), (t + 1).to_string(), c[0].to_string(), c[1].to_string()]);
        }
    }
    write_atomic(
        &output.join("pca.csv"),
        &csv_bytes(&["trajectory", "step", "pc1", "pc2"], rows)?,
    )?;
    write_atomic(
        &output.join("pca_variance.csv"),
        &csv_bytes(
            &["component", "explained_ratio"],
            pca.explained_ratio
                .iter()
                .enumerate()
                .map(|(i, r)| vec![(i + 1).to_string(), r.to_string()]),
        )?,
    )?;
    println!(
        "{n}x{n} distance matrix and PCA of {} messages written to {}",
        flat.len(),
        output.display()
    );
    Ok(())
}

const STATS_HEADER: &str = "method,step,statistic,value,lo,hi";

/// IQM curves (or mean curves when no IQM rows exist) per method.
/// (step, value, lo, hi)
type Point = (f64, f64, f64, f64);

fn chart_series(text: &str) -> Result<(String, Vec<Series>)> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut by_stat: BTreeMap<String, BTreeMap<String, Vec<Point>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::Runtime(format!("malformed stats row: {rec:?}")))
        };
        let point = (num(1)?, num(3)?, num(4)?, num(5)?);
        by_stat
            .entry(rec[2].to_string())
            .or_default()
            .entry(rec[0].to_string())
            .or_default()
            .push(point);
    }
    let (stat, methods) = match by_stat.remove("iqm") {
        Some(m) => ("IQM", m),
        None => ("mean", by_stat.remove("mean").unwrap_or_default()),
    };
    let series = methods
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, points }
        })
        .collect();
    Ok((stat.to_string(), series))
}

pub fn report(inputs: &[PathBuf], output: &Path) -> Result<()> {
    let mut hasher = Sha256::new();
    let mut chart = None;
    for input in inputs {
        let bytes = std::fs::read(input)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", input.display())))?;
        hasher.update(&bytes);
        let name = input
            .file_name()
            .ok_or_else(|| CliError::Config(format!("not a file: {}", input.display())))?;
        write_atomic(&output.join(name), &bytes)?;
        let text = String::from_utf8_lossy(&bytes);
        if chart.is_none() && text.lines().next().is_some_and(|l| l.trim() == STATS_HEADER) {
            chart = Some(chart_series(&text)?);
        }
    }
    let digest = hasher.finalize();
    let hash: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    println!("input hash: {hash}");
    let (stat, series) =
        chart.ok_or_else(|| CliError::Config("no stats CSV among the inputs".into()))?;
    let svg = line_chart(
        &format!("{stat} of normalized return during training"),
        "agent steps",
        &stat,
        &series,
    );
    let path = output.join("iqm.svg");
    write_atomic(&path, svg.as_bytes())?;
    println!("report written to {}", output.display());
    Ok(())
}
