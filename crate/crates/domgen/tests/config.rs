//! Configuration parsing: defaults, key-path rejection, dotted overrides,
//! semantic validation, and the canonical hash.

use domgen::config::{load_config, parse_config, parse_set, RunConfig};

fn err_of(text: &str) -> String {
    match parse_config(text, &[]) {
        Ok(_) => panic!("expected a config error for: {text}"),
        Err(e) => e.to_string(),
    }
}

fn set(k: &str, v: &str) -> (String, String) {
    (k.to_string(), v.to_string())
}

#[test]
fn empty_document_yields_the_documented_defaults() {
    let cfg = parse_config("{}", &[]).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.experiment.kind, "rotation");
    assert_eq!(cfg.experiment.method, "full");
    assert_eq!(cfg.experiment.seeds, vec![0, 1, 2, 3, 4]);
    assert_eq!(cfg.data.source_angles, vec![15.0, 30.0, 60.0, 75.0]);
    assert_eq!(cfg.data.target_angles, vec![0.0, 90.0]);
    assert_eq!(cfg.data.n_per_class, 200);
    assert_eq!(cfg.train.iterations, 2000);
    assert_eq!(cfg.model.widths, vec![784, 256, 128, 64]);
    assert_eq!(cfg.baseline.tent.batch_sizes, vec![1, 32, 128]);
    assert_eq!(cfg.baseline.tent.step_counts, vec![1, 10, 100]);
    assert_eq!(cfg.output.dir, "out");
}

#[test]
fn unknown_keys_are_rejected_with_their_full_path() {
    let e = err_of(r#"{"nonsense": {}}"#);
    assert!(e.contains("`nonsense`"), "got: {e}");

    let e = err_of(r#"{"train": {"iteratons": 10}}"#);
    assert!(e.contains("`train.iteratons`"), "got: {e}");

    let e = err_of(r#"{"baseline": {"tent": {"lrr": 0.1}}}"#);
    assert!(e.contains("`baseline.tent.lrr`"), "got: {e}");

    let e = err_of(r#"{"data": {"angle": 3}}"#);
    assert!(e.contains("`data.angle`"), "got: {e}");
}

#[test]
fn invalid_json_is_a_config_error() {
    let e = err_of("{not json");
    assert!(e.contains("invalid JSON"), "got: {e}");
}

#[test]
fn dotted_overrides_reach_into_every_block() {
    let sets = vec![
        set("train.iterations", "50"),
        set("data.source_angles", "[10, 20]"),
        set("experiment.method", "erm"),
        set("baseline.tent.lr", "0.01"),
        set("output.dir", "elsewhere"),
    ];
    let cfg = parse_config("{}", &sets).unwrap();
    assert_eq!(cfg.train.iterations, 50);
    assert_eq!(cfg.data.source_angles, vec![10.0, 20.0]);
    assert_eq!(cfg.experiment.method, "erm");
    assert_eq!(cfg.baseline.tent.lr, 0.01);
    assert_eq!(cfg.output.dir, "elsewhere");
}

#[test]
fn overrides_win_over_the_document() {
    let text = r#"{"train": {"iterations": 9}}"#;
    let cfg = parse_config(text, &[set("train.iterations", "33")]).unwrap();
    assert_eq!(cfg.train.iterations, 33);
}

#[test]
fn override_paths_are_validated() {
    assert!(parse_set("no-equals-sign").is_err());
    assert!(parse_set("=value").is_err());
    let (k, v) = parse_set("a.b=c=d").unwrap();
    assert_eq!((k.as_str(), v.as_str()), ("a.b", "c=d"));

    // Walking through an existing scalar is an error, not a silent
    // overwrite.
    let doc = r#"{"experiment": {"kind": "rotation"}}"#;
    let e = match parse_config(doc, &[set("experiment.kind.x", "1")]) {
        Ok(_) => panic!("expected error"),
        Err(e) => e.to_string(),
    };
    assert!(e.contains("non-object"), "got: {e}");

    // Unknown keys injected via overrides are still caught.
    let e = match parse_config("{}", &[set("train.warmup", "5")]) {
        Ok(_) => panic!("expected error"),
        Err(e) => e.to_string(),
    };
    assert!(e.contains("`train.warmup`"), "got: {e}");
}

#[test]
fn semantic_validation_names_the_offending_path() {
    let e = err_of(r#"{"experiment": {"method": "magic"}}"#);
    assert!(e.contains("`experiment.method`"), "got: {e}");

    let e = err_of(r#"{"experiment": {"kind": "nope"}}"#);
    assert!(e.contains("`experiment.kind`"), "got: {e}");

    let e = err_of(r#"{"data": {"source": "idx"}}"#);
    assert!(e.contains("`data.idx_images`"), "got: {e}");

    let e = err_of(r#"{"data": {"val_fraction": 1.0}}"#);
    assert!(e.contains("`data.val_fraction`"), "got: {e}");

    let e = err_of(r#"{"model": {"widths": [100, 10]}}"#);
    assert!(e.contains("`model.widths`"), "got: {e}");

    let e = err_of(r#"{"train": {"iterations": 0}}"#);
    assert!(e.contains("`train.iterations`"), "got: {e}");

    let e = err_of(r#"{"split": {"strategy": "sideways"}}"#);
    assert!(e.contains("`split.strategy`"), "got: {e}");
}

#[test]
fn single_source_episodic_training_requires_a_split_strategy() {
    let e = err_of(r#"{"data": {"source_angles": [30]}}"#);
    assert!(e.contains("`split.strategy`"), "got: {e}");

    // A split strategy, or a non-episodic method, resolves it.
    let with_split = r#"{"data": {"source_angles": [30]}, "split": {"strategy": "random", "k": 3}}"#;
    assert!(parse_config(with_split, &[]).is_ok());
    let with_erm = r#"{"data": {"source_angles": [30]}, "experiment": {"method": "erm"}}"#;
    assert!(parse_config(with_erm, &[]).is_ok());
}

#[test]
fn hash_depends_on_content_not_formatting() {
    let a = parse_config(r#"{"train": {"iterations": 7, "batch": 8}}"#, &[]).unwrap();
    let b = parse_config(
        "{\n  \"train\": {\"batch\": 8,   \"iterations\": 7}\n}",
        &[],
    )
    .unwrap();
    assert_eq!(a.hash(), b.hash(), "formatting and key order must not matter");
    assert_eq!(a.hash().len(), 64);
    assert!(a.hash().chars().all(|c| c.is_ascii_hexdigit()));

    let c = parse_config(r#"{"train": {"iterations": 8, "batch": 8}}"#, &[]).unwrap();
    assert_ne!(a.hash(), c.hash(), "different settings must hash differently");
}

#[test]
fn canonical_json_round_trips() {
    let cfg = parse_config(r#"{"experiment": {"seeds": [3, 1]}}"#, &[]).unwrap();
    let again = parse_config(&cfg.canonical_json(), &[]).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(cfg.hash(), again.hash());
}

#[test]
fn load_config_without_a_file_uses_defaults_plus_overrides() {
    let cfg = load_config(None, &[set("train.seed", "9")]).unwrap();
    assert_eq!(cfg.train.seed, 9);
    assert_eq!(cfg.experiment.kind, "rotation");
}

#[test]
fn split_k_defaults_to_the_source_angle_count() {
    let cfg = parse_config(
        r#"{"split": {"strategy": "cluster"}, "data": {"source_angles": [0, 45, 90]}}"#,
        &[],
    )
    .unwrap();
    assert_eq!(cfg.split.effective_k(&cfg.data), 3);

    let cfg = parse_config(r#"{"split": {"strategy": "cluster", "k": 5}}"#, &[]).unwrap();
    assert_eq!(cfg.split.effective_k(&cfg.data), 5);
}
