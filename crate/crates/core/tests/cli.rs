use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn physmap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physmap"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = physmap(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn record(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Keys whose values differ between two JSON objects, dotted.
fn diff_keys(a: &Value, b: &Value, prefix: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, v) in x {
                diff_keys(
                    v,
                    y.get(k).unwrap_or(&Value::Null),
                    &format!("{prefix}{k}."),
                    out,
                );
            }
        }
        _ if a != b => out.push(prefix.trim_end_matches('.').to_string()),
        _ => {}
    }
}

fn dataset(dir: &Path) {
    ok(
        dir,
        &[
            "synth-gen",
            "--n-real",
            "2",
            "--n-fake",
            "2",
            "--out",
            "data",
            "--seed",
            "1",
        ],
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(physmap(d, &["no-such-command"]).status.code(), Some(2));
    let missing = physmap(d, &["--config", "absent.toml", "synth-gen", "--out", "x"]);
    assert_eq!(missing.status.code(), Some(4));
    std::fs::write(d.join("bad.toml"), "[dissonance]\nbatch_size = 0\n").unwrap();
    assert_eq!(
        physmap(d, &["--config", "bad.toml", "synth-gen", "--out", "x"])
            .status
            .code(),
        Some(3)
    );
    std::fs::write(d.join("junk.pck"), b"not a checkpoint").unwrap();
    dataset(d);
    let out = physmap(
        d,
        &[
            "eval",
            "--checkpoint",
            "junk.pck",
            "--manifest",
            "data/test.jsonl",
            "--report",
            "r.json",
        ],
    );
    assert_eq!(out.status.code(), Some(5));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.starts_with("error:") && !err.contains("backtrace"),
        "{err}"
    );
    let rec = record(d.join("r.json.run.json"));
    assert_eq!(rec["status"], "error");
    assert_eq!(rec["exit_code"], 5);
}

#[test]
fn synth_gen_writes_split_manifests_and_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let lines = |f: &str| {
        std::fs::read_to_string(d.join("data").join(f))
            .unwrap()
            .lines()
            .count()
    };
    assert_eq!(
        (
            lines("manifest.jsonl"),
            lines("train.jsonl"),
            lines("test.jsonl")
        ),
        (4, 2, 2)
    );
    let rec = record(d.join("data/run_record.json"));
    assert_eq!(rec["command"], "synth-gen");
    assert_eq!(rec["seed"], 1);
    assert_eq!(rec["exit_code"], 0);
    assert!(rec["config"]["dissonance"]["margin"].is_number());
    assert!(rec["timings"]["total_seconds"].is_number());
}

#[test]
fn map_generation_and_augmentation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    ok(
        d,
        &[
            "gen-maps",
            "--manifest",
            "data/test.jsonl",
            "--out",
            "maps",
            "--signal",
            "hr",
            "--mode",
            "color",
            "--patch",
            "9",
            "--stride",
            "9",
            "--estimator",
            "pos",
        ],
    );
    let map = physmap::physmaps::read_map(d.join("maps/real_0001_001.pmap")).unwrap();
    assert_eq!(map.values.dim(), (30, 36, 36, 3));
    assert_eq!(
        std::fs::read_dir(d.join("maps")).unwrap().count(),
        2 * 5 + 1
    );

    ok(
        d,
        &[
            "augment",
            "--manifest",
            "data/test.jsonl",
            "--out",
            "aug",
            "--map",
            "hr-gray",
        ],
    );
    let recs = physmap::ingest::load_manifest(d.join("aug/manifest.jsonl")).unwrap();
    assert_eq!(recs.len(), 2);

    let crops = physmap::ingest::read_crops(d.join("data/crops/real_0001.fcs"), 30.0).unwrap();
    physmap::ingest::write_crops(d.join("seg.fcs"), &crops.slice_frames(0, 30).unwrap()).unwrap();
    ok(
        d,
        &[
            "augment",
            "--crops-file",
            "seg.fcs",
            "--map-file",
            "maps/real_0001_001.pmap",
            "--out",
            "seg_aug.fcs",
        ],
    );
    assert_eq!(
        physmap::ingest::read_crops(d.join("seg_aug.fcs"), 30.0)
            .unwrap()
            .len(),
        30
    );

    ok(
        d,
        &[
            "maps-viz",
            "--manifest",
            "data/test.jsonl",
            "--out",
            "viz",
            "--video",
            "fake_0001",
        ],
    );
    assert!(d.join("viz/fake_0001_005.png").exists());
}

#[test]
fn train_modes_differ_only_in_mode_key() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    for mode in ["plain", "gcn"] {
        let out = format!("{mode}.pck");
        ok(
            d,
            &[
                "train",
                "--manifest",
                "data/train.jsonl",
                "--mode",
                mode,
                "--epochs",
                "1",
                "--out",
                &out,
            ],
        );
        ok(
            d,
            &[
                "eval",
                "--checkpoint",
                &out,
                "--manifest",
                "data/test.jsonl",
                "--report",
                &format!("{mode}.json"),
            ],
        );
        let report = record(d.join(format!("{mode}.json")));
        assert!(report["tau"].is_number() && report["auc"].is_number());
        assert_eq!(report["per_video"].as_array().unwrap().len(), 2);
    }
    let mut keys = Vec::new();
    diff_keys(
        &record(d.join("plain.pck.run.json"))["config"],
        &record(d.join("gcn.pck.run.json"))["config"],
        "",
        &mut keys,
    );
    assert_eq!(keys, ["mode"]);
}
