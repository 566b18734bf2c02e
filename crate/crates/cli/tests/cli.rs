use std::path::Path;
use std::process::{Command, Output};

fn har(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rehab-har"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let o = har(args, cwd);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().rev().find(|l| l.starts_with('{')).expect("no JSON on stderr");
    serde_json::from_str(line).unwrap()
}

fn synth(dir: &Path, out: &str) {
    ok(&["synth", "--nd", "1", "--stroke", "1", "--sessions", "3", "--out", out], dir);
}

const FAST: &[&str] = &[
    "--preset", "small", "--set", "imu.vit.depth=1", "--set", "skel.vit.depth=1", "--set", "skel.grid=12",
];

#[test]
fn synth_then_describe() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "c");
    for f in ["participants.csv", "manifest.json"] {
        assert!(d.path().join("c").join(f).exists(), "{f}");
    }
    let text = ok(&["describe", "c"], d.path());
    assert!(text.contains("from 2 participants") && text.contains("Stroke"), "{text}");
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = har(&["frobnicate"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(error_json(&o)["exit_code"], 2);
}

#[test]
fn missing_input_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    let o = har(&["describe", "nowhere"], d.path());
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["exit_code"], 3);
}

#[test]
fn invalid_values_are_validation_errors() {
    let d = tempfile::tempdir().unwrap();
    let o = har(&["synth", "--sessions", "0", "--out", "c"], d.path());
    assert_eq!(o.status.code(), Some(4));
    let j = error_json(&o);
    assert_eq!(j["exit_code"], 4);
    assert!(j["message"].as_str().unwrap().len() > 0);
}

#[test]
fn refuses_non_empty_output() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "c");
    let o = har(&["synth", "--nd", "1", "--stroke", "1", "--out", "c"], d.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn help_lists_flags() {
    let d = tempfile::tempdir().unwrap();
    let cases: &[(&str, &[&str])] = &[
        ("synth", &["--nd", "--stroke", "--sessions", "--seed", "--couple", "--out"]),
        ("preprocess-imu", &["--input", "--window", "--stride", "--out"]),
        ("preprocess-skel", &["--input", "--grid", "--sigma", "--frames", "--out"]),
        (
            "train",
            &["--data", "--phase", "--preset", "--set", "--seed", "--labels", "--split-seed", "--imu-lr", "--out"],
        ),
        ("eval", &["--data", "--run", "--part", "--aggregation", "--out"]),
        ("dtw", &["--data", "--modality", "--mode", "--band", "--threshold", "--plot-data", "--out"]),
        ("f1", &["--predictions", "--participants", "--plot-data", "--out"]),
        ("merge-labels", &["--pair", "--from-dtw", "--base", "--out"]),
        ("describe", &["--csv", "--out"]),
        ("replay", &["--out"]),
    ];
    for (sub, flags) in cases {
        let text = ok(&[sub, "--help"], d.path());
        assert!(text.contains("--config"), "{sub}");
        for f in *flags {
            assert!(text.contains(f), "{sub} --help lacks {f}");
        }
    }
}

#[test]
fn config_file_fills_unset_flags() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("a.conf"), "nd = 2\nstroke = 1\nsessions = 2\nseed = 4\n").unwrap();
    ok(&["synth", "--config", "a.conf", "--seed", "5", "--out", "c"], d.path());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("c/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
    let args: Vec<&str> = m["args"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(args.windows(2).any(|w| w == ["--nd", "2"]), "{args:?}");
    let text = ok(&["describe", "c"], d.path());
    assert!(text.contains("from 3 participants"), "{text}");
}

#[test]
fn bad_config_key_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("a.conf"), "imu.vit.depth = 2\n").unwrap();
    let o = har(&["synth", "--config", "a.conf", "--out", "c"], d.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn phased_training_and_downstream_commands() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p, "c");
    let phase = |name: &str, extra: &[&str], out: &str| {
        let mut a = vec!["train", "--data", "c", "--phase", name];
        a.extend_from_slice(FAST);
        a.extend(["--imu-epochs", "1", "--skeleton-epochs", "1", "--head-epochs", "1"]);
        a.extend_from_slice(extra);
        a.extend(["--out", out]);
        ok(&a, p);
    };
    phase("imu", &[], "ri");
    phase("skeleton", &[], "rs");
    assert!(p.join("ri/imu.ckpt").exists() && !p.join("ri/skeleton.ckpt").exists());
    phase("head", &["--imu-checkpoint", "ri/imu.ckpt", "--skeleton-checkpoint", "rs/skeleton.ckpt"], "rh");
    assert!(p.join("rh/model.ckpt").exists());

    ok(&["eval", "--data", "c", "--run", "rh", "--out", "e"], p);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("e/metrics.json")).unwrap()).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    ok(&["f1", "--predictions", "e/predictions.csv", "--participants", "c/participants.csv", "--out", "f"], p);
    let grid = std::fs::read_to_string(p.join("f/f1_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 3, "{grid}");

    ok(&["merge-labels", "--pair", "2:3", "--out", "m"], p);
    ok(&["train", "--data", "c", "--labels", "m/label_map.csv", "--imu-epochs", "1", "--skeleton-epochs", "1",
        "--head-epochs", "1", "--preset", "small", "--set", "imu.vit.depth=1", "--set", "skel.vit.depth=1",
        "--set", "skel.grid=12", "--out", "r8"], p);
    assert_eq!(std::fs::read_to_string(p.join("r8/labels.csv")).unwrap().lines().count(), 10);

    // head training without branch checkpoints is a usage mistake
    let o = har(&["train", "--data", "c", "--phase", "head", "--out", "x"], p);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn thread_count_does_not_change_results() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p, "c");
    for threads in ["1", "2"] {
        let mut a = vec!["train", "--data", "c", "--imu-epochs", "1", "--skeleton-epochs", "1", "--head-epochs", "1"];
        a.extend_from_slice(FAST);
        let out = format!("t{threads}");
        a.extend(["--out", &out]);
        let o = Command::new(env!("CARGO_BIN_EXE_rehab-har"))
            .args(&a)
            .current_dir(p)
            .env("MMEVIT_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["model.ckpt", "imu_record.json", "head_record.json", "split.json"] {
        assert_eq!(std::fs::read(p.join("t1").join(f)).unwrap(), std::fs::read(p.join("t2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn replay_detects_changed_inputs() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p, "c");
    ok(&["describe", "c", "--csv", "--out", "r"], p);
    let report = ok(&["replay", "r/manifest.json", "--out", "r2"], p);
    assert!(report.contains("\"identical\":true"), "{report}");
    std::fs::write(p.join("c/participants.csv"), "changed").unwrap();
    let o = har(&["replay", "r/manifest.json", "--out", "r3"], p);
    assert_eq!(o.status.code(), Some(4));
}
