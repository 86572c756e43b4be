use std::process::Command;

fn spoiler() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spoiler"))
}

#[test]
fn list_names_every_experiment() {
    let out = spoiler().arg("list").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["scan", "evset", "colocate", "contiguous", "rowhammer", "depth", "correlate", "fragsweep"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing from:\n{text}");
    }
}

#[test]
fn json_format_writes_json_tables() {
    let dir = tempfile::tempdir().unwrap();
    let status = spoiler()
        .args(["run", "depth", "--format", "json", "--out"])
        .arg(dir.path())
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("depth.json")).unwrap()).unwrap();
    assert_eq!(table[0]["filler"], "nop");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["experiment"], "depth");
}

#[test]
fn config_file_sets_run_parameters_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[run]\narch = \"haswell-ep\"\npages = 2048\nseed = 3\n").unwrap();
    let out = dir.path().join("out");
    let status = spoiler()
        .args(["run", "scan", "--seed", "4", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["arch"], "haswell-ep");
    assert_eq!(summary["config"]["pages"], 2048);
    assert_eq!(summary["config"]["seed"], 4);
    assert_eq!(summary["result"]["steps_expected"], 17);
    assert!(out.join("trace.csv").exists());
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["run", "nope"],
        vec!["run", "colocate", "--dram", "zz"],
        vec!["run", "scan", "--noise-sigma", "-2"],
        vec!["run", "evset", "--strategy", "magic"],
    ] {
        let status = spoiler().args(&args).arg("--out").arg(dir.path()).output().unwrap().status;
        assert_eq!(status.code(), Some(1), "{args:?}");
    }
    let missing = spoiler().args(["run", "scan", "--config", "/nonexistent.toml"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
}
