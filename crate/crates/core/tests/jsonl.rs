use std::fs;

use posbias::synthgen::{export_jsonl, generate, import_jsonl, GenConfig, TrafficMode};
use posbias::{Dataset, Error};

fn groups(mode: TrafficMode) -> Vec<posbias::QueryGroup> {
    generate(&GenConfig {
        n_users: 25,
        master_seed: 11,
        traffic_mode: mode,
        ..GenConfig::default()
    })
    .unwrap()
}

#[test]
fn round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [TrafficMode::Rs, TrafficMode::Random] {
        let path = dir.path().join(format!("{mode}.jsonl"));
        let original = groups(mode);
        export_jsonl(&original, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 250);
        let back = import_jsonl(&path, 10).unwrap();
        assert_eq!(back, original);
        let a = Dataset::from_groups(&original, 10).unwrap();
        let b = Dataset::from_groups(&back, 10).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.positions(), b.positions());
    }
}

#[test]
fn missing_field_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.jsonl");
    export_jsonl(&groups(TrafficMode::Rs)[..1], &path).unwrap();
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    lines[3] = lines[3].replace("\"label\"", "\"lable\"");
    fs::write(&path, lines.join("\n")).unwrap();
    match import_jsonl(&path, 10) {
        Err(Error::Malformed { line, message, .. }) => {
            assert_eq!(line, 4);
            assert!(message.contains("lable") || message.contains("label"), "{message}");
        }
        other => panic!("expected a malformed-line error, got {other:?}"),
    }
}

#[test]
fn position_outside_k_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.jsonl");
    export_jsonl(&groups(TrafficMode::Random)[..2], &path).unwrap();
    let err = import_jsonl(&path, 5).unwrap_err();
    assert!(matches!(err, Error::Malformed { .. }), "{err}");
    assert!(err.to_string().contains("position"), "{err}");
}

#[test]
fn truncated_group_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.jsonl");
    export_jsonl(&groups(TrafficMode::Rs)[..1], &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().take(9).collect();
    fs::write(&path, kept.join("\n")).unwrap();
    assert!(import_jsonl(&path, 10).is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    let err = import_jsonl("/definitely/not/here.jsonl", 10).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}
