use std::fs;
use std::path::Path;

use lranker_core::encoder::{encode_candidates_ref, RefEncoderParams, ReferenceEncoder};
use lranker_core::harness::*;
use lranker_core::metrics::random_mrr_baseline;
use lranker_core::store::{read_store, write_store};
use lranker_core::tts::{evaluate_setting, initial_embeddings, TtsConfig, ZeroConditioner};
use lranker_core::Error;

fn write_tsv(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn noiseless_planted_task_is_solved_by_identity() {
    let cfg = PlantedLinearConfig {
        n_candidates: 200,
        n_queries: 40,
        dim: 16,
        noise: 0.0,
        seed: 3,
        ..PlantedLinearConfig::default()
    };
    let (store, recs) = gen_planted_linear(&cfg).unwrap();
    let qs = resolve_dataset(&recs, &store, false).unwrap();
    let params = RefEncoderParams::passthrough(16, 0);
    let enc = ReferenceEncoder::new(&params);
    let eq: Vec<_> = qs.iter().map(|q| q.to_eval_query()).collect();
    let cand = encode_candidates_ref(&store, &params).unwrap();
    let e0 = initial_embeddings(&eq, &enc, &ZeroConditioner(0)).unwrap();
    let out = evaluate_setting(
        &eq,
        &e0,
        cand.as_ref(),
        &enc,
        &ZeroConditioner(0),
        &TtsConfig::default(),
    )
    .unwrap();
    assert!(out.iter().all(|o| o.reciprocal_rank == 1.0));
}

#[test]
fn generators_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PlantedLinearConfig {
        n_candidates: 50,
        n_queries: 10,
        dim: 8,
        seed: 11,
        ..PlantedLinearConfig::default()
    };
    for tag in ["a", "b"] {
        let (store, recs) = gen_planted_linear(&cfg).unwrap();
        write_store(&store, dir.path().join(format!("{tag}.lrke"))).unwrap();
        write_dataset(dir.path().join(format!("{tag}.jsonl")), &recs).unwrap();
    }
    for ext in ["lrke", "jsonl"] {
        let a = fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
        let b = fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
        assert_eq!(a, b, "{ext}");
    }
    let back = read_dataset(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(back, gen_planted_linear(&cfg).unwrap().1);
}

#[test]
fn planted_records_have_disjoint_negatives() {
    let (_, recs) = gen_planted_linear(&PlantedLinearConfig {
        n_candidates: 30,
        n_queries: 20,
        dim: 4,
        negatives: 10,
        ..PlantedLinearConfig::default()
    })
    .unwrap();
    for r in recs {
        let negs = r.negative_ids.unwrap();
        assert_eq!(negs.len(), 10);
        assert!(!negs.contains(&r.positive_id));
    }
}

#[test]
fn pool_dependent_rule_recovers_every_positive() {
    let cfg = PoolDependentConfig {
        n_candidates: 600,
        n_queries: 100,
        dim: 6,
        pool_size: 20,
        groups: 10,
        seed: 5,
        ..PoolDependentConfig::default()
    };
    let (store, recs, rule) = gen_pool_dependent(&cfg).unwrap();
    let qs = resolve_dataset(&recs, &store, false).unwrap();
    for q in &qs {
        assert_eq!(q.pool.len(), 20);
        let f = q.input.features.as_ref().unwrap();
        assert_eq!(rule.positive(f, &store, &q.pool), q.positive);
    }
}

#[test]
fn ingest_uses_other_positives_as_negatives() {
    let dir = tempfile::tempdir().unwrap();
    let q = write_tsv(
        dir.path(),
        "q.tsv",
        "q1\tfirst query\nq2\tsecond query\nq3\tthird query\n",
    );
    let c = write_tsv(
        dir.path(),
        "c.tsv",
        "c1\talpha doc\nc2\tbeta doc\nc3\tgamma doc\nc4\tdelta doc\n",
    );
    let r = write_tsv(dir.path(), "r.tsv", "q1\tc1\nq2\tc2\nq3\tc3\n");
    let ing = ingest_tsv_pairs(&q, &c, &r).unwrap();
    assert_eq!(ing.records.len(), 3);
    for rec in &ing.records {
        let negs = rec.negative_ids.as_ref().unwrap();
        assert_eq!(negs.len(), 2);
        assert!(!negs.contains(&rec.positive_id));
    }
    assert_eq!(
        ing.records[0].negative_ids.as_ref().unwrap(),
        &vec![
            CandidateRef::Name("c2".into()),
            CandidateRef::Name("c3".into())
        ]
    );
    let store = ing.featurized_store(16).unwrap();
    let qs = resolve_dataset(&ing.records, &store, true).unwrap();
    assert_eq!(qs[1].positive, 1);
    assert_eq!(qs[1].negatives, vec![0, 2]);
}

#[test]
fn ingest_rejects_dangling_and_duplicate_ids() {
    let dir = tempfile::tempdir().unwrap();
    let q = write_tsv(dir.path(), "q.tsv", "q1\tfirst\nq2\tsecond\n");
    let c = write_tsv(dir.path(), "c.tsv", "c1\talpha\nc2\tbeta\n");
    let r = write_tsv(dir.path(), "r.tsv", "q1\tc1\nq2\tc9\n");
    let err = ingest_tsv_pairs(&q, &c, &r).unwrap_err();
    assert!(err.to_string().contains("c9"), "{err}");
    let dup = write_tsv(dir.path(), "d.tsv", "c1\talpha\nc1\tbeta\n");
    let r = write_tsv(dir.path(), "r2.tsv", "q1\tc1\n");
    assert!(ingest_tsv_pairs(&q, &dup, &r)
        .unwrap_err()
        .to_string()
        .contains("duplicate"));
}

#[test]
fn resolve_checks_record_shape() {
    let (store, mut recs) = gen_planted_linear(&PlantedLinearConfig {
        n_candidates: 10,
        n_queries: 2,
        dim: 4,
        ..PlantedLinearConfig::default()
    })
    .unwrap();
    recs[0].text = Some("both present".into());
    assert!(resolve_dataset(&recs, &store, false).is_err());
    recs[0].text = None;
    recs[1].positive_id = CandidateRef::Index(99);
    assert!(resolve_dataset(&recs, &store, false).is_err());
}

#[test]
fn eight_one_one_split() {
    let s = split_8_1_1(100, 42);
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    let mut all: Vec<usize> = [s.train.clone(), s.val.clone(), s.test.clone()].concat();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert_eq!(s, split_8_1_1(100, 42));
    assert_ne!(s, split_8_1_1(100, 43));
}

#[test]
fn overrides_take_precedence_over_file() {
    let text = "seed = 3\n[train]\nlr = 0.5\nepochs = 2\n[tts]\nwidths = [0, 2]\ndepths = [0, 1]\n";
    let cfg =
        ExperimentConfig::from_toml_str(text, &["train.lr=0.01".into(), "model.clusters=2".into()])
            .unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.train.lr, 0.01);
    assert_eq!(cfg.train.epochs, 2);
    assert_eq!(cfg.model.clusters, 2);
    assert_eq!(cfg.tts.widths, vec![0, 2]);
    let err = ExperimentConfig::from_toml_str("[train]\nbogus = 1\n", &[]).unwrap_err();
    assert_eq!(err.class().exit_code(), 2);
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap(), &[]).unwrap();
    assert_eq!(back, cfg);
}

fn small_experiment(dir: &Path, epochs: usize) -> ExperimentConfig {
    let (store, recs) = gen_planted_linear(&PlantedLinearConfig {
        n_candidates: 120,
        n_queries: 40,
        dim: 8,
        noise: 0.2,
        negatives: 20,
        seed: 1,
    })
    .unwrap();
    write_store(&store, dir.join("store.lrke")).unwrap();
    write_dataset(dir.join("data.jsonl"), &recs).unwrap();
    let mut cfg = ExperimentConfig {
        seed: 9,
        ..Default::default()
    };
    cfg.paths.store = dir.join("store.lrke");
    cfg.paths.dataset = dir.join("data.jsonl");
    cfg.paths.output = dir.join("out");
    cfg.model.clusters = 2;
    cfg.model.projector_hidden = 8;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 8;
    cfg.train.num_splits = 3;
    cfg
}

#[test]
fn untrained_evaluation_writes_a_parsable_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment(dir.path(), 0);
    let rep = run_experiment(&cfg).unwrap();
    let out = dir.path().join("out");
    for f in [
        "metrics.csv",
        "rankings.jsonl",
        "per_query.jsonl",
        "sweep.csv",
        "manifest.json",
        "config.toml",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "metric,mean,se,n");
    assert!(lines[1].starts_with("mrr,"));
    let mean: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!((mean - rep.mrr.mean).abs() < 1e-9);
    assert!(rep.mrr.mean > random_mrr_baseline(120));
    let m: Manifest =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!((m.best_width, m.best_depth), (0, 0));
    assert_eq!(m.encoder_calls["test"], rep.mrr.count);
    for line in fs::read_to_string(out.join("rankings.jsonl"))
        .unwrap()
        .lines()
    {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["ranking"].as_array().unwrap().len(), 100);
    }
}

#[test]
fn repeated_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_experiment(dir.path(), 2);
    cfg.tts.widths = vec![0, 2];
    cfg.tts.depths = vec![0, 1];
    run_experiment(&cfg).unwrap();
    let first: Vec<Vec<u8>> = ["metrics.csv", "rankings.jsonl", "sweep.csv", "loss.csv"]
        .iter()
        .map(|f| fs::read(dir.path().join("out").join(f)).unwrap())
        .collect();
    let m1 = run_experiment(&cfg).unwrap().manifest;
    let second: Vec<Vec<u8>> = ["metrics.csv", "rankings.jsonl", "sweep.csv", "loss.csv"]
        .iter()
        .map(|f| fs::read(dir.path().join("out").join(f)).unwrap())
        .collect();
    assert_eq!(first, second);
    assert!(m1.outputs.contains_key("loss.csv"));
    assert!(dir.path().join("out/checkpoint/meta.json").exists());
}

#[test]
fn failures_are_quarantined_with_phase_name() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_experiment(dir.path(), 0);
    let bad = dir.path().join("bad.jsonl");
    fs::write(
        &bad,
        "{\"query_id\": \"q\", \"positive_id\": 999999, \"features\": [1.0]}\n",
    )
    .unwrap();
    cfg.paths.dataset = bad;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(
        matches!(err, Error::Phase { ref phase, .. } if phase == "load"),
        "{err}"
    );
    assert_eq!(err.class().exit_code(), 3);
    assert!(dir.path().join("out/failed").is_dir());
}

#[test]
fn missing_input_paths_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_experiment(dir.path(), 0);
    cfg.paths.dataset = dir.path().join("missing.jsonl");
    let err = run_experiment(&cfg).unwrap_err();
    assert!(
        matches!(err, Error::Config(ref m) if m.contains("paths.dataset")),
        "{err}"
    );
    assert_eq!(err.class().exit_code(), 2);
}

#[test]
fn distractors_extend_the_store() {
    let (store, _) = gen_planted_linear(&PlantedLinearConfig {
        n_candidates: 10,
        n_queries: 1,
        dim: 4,
        ..PlantedLinearConfig::default()
    })
    .unwrap();
    let big = add_distractors(&store, 30, 1).unwrap();
    assert_eq!(big.count(), 40);
    assert_eq!(&big.as_slice()[..40], store.as_slice());
    let dir = tempfile::tempdir().unwrap();
    write_store(&big, dir.path().join("s.lrke")).unwrap();
    assert_eq!(read_store(dir.path().join("s.lrke")).unwrap(), big);
}
