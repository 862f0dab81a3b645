use hksl::evalstats::stats_table;
use hksl::par::Exec;
use hksl::tensor::checkpoint;
use hksl::trainer::{build_agent, observation_tensor, train_run, RunRecord, TrainConfig};
use hksl::envs::Env;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> TrainConfig {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml")).unwrap();
    let mut cfg = TrainConfig::from_toml(&text).unwrap();
    cfg.seed = seed;
    cfg
}

#[test]
fn checkpoint_restores_the_policy() {
    let cfg = tiny(2);
    let out = train_run(&cfg, Exec::default(), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.ckpt");
    checkpoint::save(&path, &out.agent.to_records()).unwrap();

    let mut restored = build_agent(&cfg, Exec::default()).unwrap();
    restored.load_records(&checkpoint::load(&path).unwrap()).unwrap();
    let mut env = Env::new(cfg.env.clone()).unwrap();
    let obs = observation_tensor(&env.reset(9));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = out.agent.act(&obs, false, &mut rng).unwrap();
    let b = restored.act(&obs, false, &mut rng).unwrap();
    assert_eq!(a, b);
}

#[test]
fn records_survive_disk_and_feed_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for seed in 0..4 {
        let out = train_run(&tiny(seed), Exec::default(), |_| {}).unwrap();
        let path = dir.path().join(format!("r{seed}.jsonl"));
        out.record.save(&path).unwrap();
        let back = RunRecord::load(&path).unwrap();
        assert_eq!(back, out.record);
        records.push(back);
    }
    let (rows, skipped) = stats_table(&records, 200, 0.95, 0, Exec::default()).unwrap();
    assert!(skipped.is_empty(), "{skipped:?}");
    // Two checkpoints, three statistics, one method.
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert!(r.lo <= r.value + 1e-12 && r.value <= r.hi + 1e-12, "{r:?}");
    }
}

#[test]
fn config_hash_tracks_content() {
    let a = tiny(0);
    let mut b = tiny(0);
    assert_eq!(a.hash(), b.hash());
    b.batch_size += 1;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(TrainConfig::from_toml(&a.to_toml()).unwrap(), a);
}
