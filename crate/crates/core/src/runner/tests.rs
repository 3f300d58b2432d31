use std::path::PathBuf;

use super::config::{GeneratorSpec, RetrieverSpec};
use super::*;
use crate::dataspec::Item;
use crate::pipeline::Topology;

fn toy() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

fn toy_config(file: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = load_config(&toy().join(file)).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

const MINIMAL: &str = "
dataset: {path: dataset.jsonl}
corpus: {path: corpus.jsonl}
retriever: {type: bm25}
generator: {type: mock}
pipeline: {topology: sequential}
";

#[test]
fn minimal_config_gets_defaults() {
    let cfg = parse_config(MINIMAL, &toy()).unwrap();
    assert_eq!(cfg.pipeline.top_k, 5);
    assert_eq!(cfg.pipeline.generation.max_new_tokens, 32);
    assert_eq!(cfg.metrics.len(), Metric::ALL.len());
    assert!(cfg.dataset.as_ref().unwrap().path.is_absolute());
    assert_eq!(cfg.retriever, RetrieverSpec::Bm25 { k1: 0.9, b: 0.4, index: None });
}

#[test]
fn unknown_key_is_named_with_a_suggestion() {
    let text = MINIMAL.replace("retriever:", "retreiver:");
    let err = parse_config(&text, &toy()).unwrap_err();
    match &err {
        RunError::Schema { suggestion, message, .. } => {
            assert!(message.contains("retreiver"), "{message}");
            assert_eq!(suggestion.as_deref(), Some("retriever"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("did you mean `retriever`"));

    let nested = MINIMAL.replace("{topology: sequential}", "{topology: sequential, top_kk: 3}");
    match parse_config(&nested, &toy()).unwrap_err() {
        RunError::Schema { path, suggestion, .. } => {
            assert!(path.starts_with("pipeline"), "{path}");
            assert_eq!(suggestion.as_deref(), Some("top_k"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn json_configs_share_the_yaml_errors() {
    let value: serde_json::Value = serde_yaml::from_str(MINIMAL).unwrap();
    let cfg = parse_config_value(value.clone(), &toy()).unwrap();
    assert_eq!(cfg, parse_config(MINIMAL, &toy()).unwrap());

    let mut bad = value;
    bad["pipeline"]["top_kk"] = 3.into();
    match parse_config_value(bad, &toy()).unwrap_err() {
        RunError::Schema { path, suggestion, .. } => {
            assert!(path.starts_with("pipeline"), "{path}");
            assert_eq!(suggestion.as_deref(), Some("top_k"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn theta_out_of_range_names_the_field() {
    let text = MINIMAL.replace("{topology: sequential}", "{topology: flare, flare_theta: 1.5}");
    match parse_config(&text, &toy()).unwrap_err() {
        RunError::Invalid { field, .. } => assert_eq!(field, "pipeline.flare_theta"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_paths_and_components_are_rejected() {
    let text = MINIMAL.replace("corpus.jsonl", "nope.jsonl");
    assert!(matches!(
        parse_config(&text, &toy()),
        Err(RunError::Invalid { field, .. }) if field == "corpus.path"
    ));
    let text = MINIMAL.replace("{topology: sequential}", "{topology: conditional}");
    assert!(matches!(
        parse_config(&text, &toy()),
        Err(RunError::Invalid { field, .. }) if field == "judger"
    ));
    assert!(matches!(load_config(&toy().join("absent.yaml")), Err(RunError::Io { .. })));
}

#[test]
fn toy_run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config("config.yaml", dir.path());
    let res = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let traces = fs::read_to_string(res.out_dir.join(TRACES_FILE)).unwrap();
    assert_eq!(traces.lines().count(), 10);
    assert_eq!(res.report.item_count, 10);
    assert!(res.out_dir.starts_with(dir.path()));
    assert!(res.out_dir.ends_with(&res.manifest.run_id));
    assert!(res.manifest.run_id.ends_with(&res.manifest.config_hash[..8]));
    for f in &res.manifest.files {
        assert!(res.out_dir.join(f).exists(), "{f}");
    }
    let manifest = RunManifest::load(&res.out_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest, res.manifest);
    assert_eq!(manifest.passage_count, 100);
    // every dataset item appears exactly once, in order
    let ids: Vec<String> = load_traces(&res.out_dir.join(TRACES_FILE))
        .unwrap()
        .into_iter()
        .map(|t| t.item_id)
        .collect();
    let expected: Vec<String> = (0..10).map(|i| format!("q{i:02}")).collect();
    assert_eq!(ids, expected);
}

#[test]
fn reruns_are_byte_identical_and_eval_matches_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config("config.yaml", dir.path());
    let a = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let b = run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert_ne!(a.out_dir, b.out_dir);
    for f in [TRACES_FILE, REPORT_FILE, REPORT_CSV_FILE] {
        assert_eq!(fs::read(a.out_dir.join(f)).unwrap(), fs::read(b.out_dir.join(f)).unwrap(), "{f}");
    }
    assert_eq!(evaluate_run(&a.out_dir, None, None, None).unwrap(), a.report);
}

#[test]
fn existing_output_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config("config.yaml", dir.path());
    let opts = RunOptions {
        run_id: Some("fixed".into()),
        sample: Some(2),
        ..RunOptions::default()
    };
    run_experiment(&cfg, &opts).unwrap();
    assert!(matches!(run_experiment(&cfg, &opts), Err(RunError::OutputExists(_))));
    let forced = RunOptions { force: true, ..opts };
    let res = run_experiment(&cfg, &forced).unwrap();
    assert_eq!(res.manifest.item_count, 2);
}

#[test]
fn sampling_is_seeded_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config("config.yaml", dir.path());
    let opts = RunOptions {
        sample: Some(4),
        seed: Some(3),
        ..RunOptions::default()
    };
    let a = run_experiment(&cfg, &opts).unwrap();
    let b = run_experiment(&cfg, &opts).unwrap();
    assert_eq!(a.traces, b.traces);
    assert_eq!(a.manifest.config.seed, 3);
    assert_eq!(a.manifest.config.dataset.as_ref().unwrap().sample, Some(4));

    // the manifest alone reproduces the run
    let replay = run_experiment(&a.manifest.config, &a.manifest.replay_options()).unwrap();
    assert_eq!(replay.traces, a.traces);
}

#[test]
fn inline_items_are_kept_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config("config.yaml", dir.path());
    cfg.dataset = None;
    let items = vec![Item::new("x", "What is the capital of Eskara?", vec!["Koros".into()])];
    let res = run_experiment(
        &cfg,
        &RunOptions {
            items: Some(items.clone()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(res.traces[0].final_answer, "Koros");
    assert_eq!(res.manifest.items.as_deref(), Some(items.as_slice()));
    assert!(run_experiment(&cfg, &RunOptions::default()).is_err());
}

#[test]
fn preflight_lists_unreachable_services() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config("config.yaml", dir.path());
    let mut http = crate::transport::HttpSettings::new("http://127.0.0.1:9/v1/chat/completions");
    http.timeout_secs = 0.5;
    http.max_retries = 0;
    cfg.generator = GeneratorSpec::Openai(crate::generate::OpenAiChatConfig {
        http,
        model: "m".into(),
        capabilities: Default::default(),
    });
    match run_experiment(&cfg, &RunOptions::default()) {
        Err(RunError::Preflight(list)) => {
            assert_eq!(list.len(), 1);
            assert!(list[0].starts_with("generator"), "{}", list[0]);
        }
        other => panic!("unexpected {:?}", other.map(|r| r.manifest.run_id)),
    }
}

#[test]
fn conditional_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config("conditional.yaml", dir.path());
    assert_eq!(cfg.pipeline.topology, Topology::Conditional);
    let res = run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(res.traces.len(), 10);
    assert!(res.traces.iter().all(|t| t.error.is_none()));
}

#[test]
fn retrieval_cache_persists_between_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config("config.yaml", dir.path());
    cfg.retrieval_cache = Some(dir.path().join("cache.jsonl"));
    let a = run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(a.manifest.cache.as_ref().unwrap().misses, 10);
    let b = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let stats = b.manifest.cache.unwrap();
    assert_eq!((stats.hits, stats.misses), (10, 0));
    assert_eq!(a.traces, b.traces);
}

#[test]
fn sweep_over_top_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config("config.yaml", dir.path());
    let values: Vec<serde_json::Value> = [1, 3, 5, 10].into_iter().map(Into::into).collect();
    let out = sweep(&cfg, "top_k", &values, &SweepOptions::default()).unwrap();
    assert_eq!(out.axis, "pipeline.top_k");
    assert_eq!(out.rows.len(), 4);
    let csv = fs::read_to_string(out.out_dir.join(sweep::COMPARISON_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("top_k,run_id,"));
    let json: SweepOutcome =
        serde_json::from_str(&fs::read_to_string(out.out_dir.join(sweep::COMPARISON_JSON)).unwrap()).unwrap();
    assert_eq!(json.rows, out.rows);
    for (row, m) in out.rows.iter().zip(&out.manifests) {
        assert_eq!(m.config.pipeline.top_k as u64, row.value.as_u64().unwrap());
        assert!(out.out_dir.join(&row.run_dir).join(MANIFEST_FILE).exists());
    }
}

#[test]
fn sweep_over_chunk_size_rebuilds_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config("chunked.yaml", dir.path());
    let values: Vec<serde_json::Value> = vec![6.into(), 8.into()];
    let out = sweep(&cfg, "corpus.chunk.size", &values, &SweepOptions::default()).unwrap();
    assert_eq!(out.rows.len(), 2);
    assert_ne!(out.manifests[0].corpus_fingerprint, out.manifests[1].corpus_fingerprint);
}

#[test]
fn sweep_axis_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config("config.yaml", dir.path());
    let v = vec![serde_json::Value::from(3)];
    assert!(matches!(sweep(&cfg, "pipeline.top_kk", &v, &SweepOptions::default()), Err(RunError::Axis { .. })));
    assert!(matches!(sweep(&cfg, "nonsense", &v, &SweepOptions::default()), Err(RunError::Axis { .. })));
    assert!(matches!(sweep(&cfg, "top_k", &[], &SweepOptions::default()), Err(RunError::Axis { .. })));
    assert!(sweep(&cfg, "top_k", &[serde_json::Value::from(0)], &SweepOptions::default()).is_err());
}

#[test]
fn single_value_sweep_matches_a_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config("config.yaml", dir.path());
    let out = sweep(&cfg, "top_k", &[5.into()], &SweepOptions::default()).unwrap();
    let plain = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let swept = fs::read(out.out_dir.join(&out.rows[0].run_dir).join(TRACES_FILE)).unwrap();
    assert_eq!(swept, fs::read(plain.out_dir.join(TRACES_FILE)).unwrap());
}
