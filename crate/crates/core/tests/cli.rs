use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_edgeforest"))
}

fn scenario() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/small.toml")
}

fn tmp(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("edgeforest-cli-{tag}-{}", std::process::id()))
}

#[test]
fn run_then_check_replay_and_regret() {
    let out = tmp("run");
    let st = bin()
        .args(["run", "--seed", "5", "--out"])
        .arg(&out)
        .arg(scenario())
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(String::from_utf8_lossy(&st.stdout).contains("\"nodes\": 100"));

    let check = bin().arg("overlay-check").arg(out.join("overlay.tsv")).output().unwrap();
    assert!(check.status.success());
    assert!(String::from_utf8_lossy(&check.stdout).contains("0 violations"));

    let rep = bin().arg("replay").arg(out.join("manifest.json")).output().unwrap();
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stdout));

    let regret = bin().arg("regret-eval").arg(out.join("policies.csv")).output().unwrap();
    assert!(regret.status.success());
    let csv = String::from_utf8(regret.stdout).unwrap();
    let written = std::fs::read_to_string(out.join("regret.csv")).unwrap();
    assert_eq!(csv, written);
    std::fs::remove_dir_all(out).unwrap();
}

#[test]
fn tampered_dump_exits_with_invariant_code() {
    let out = tmp("bad");
    std::fs::create_dir_all(&out).unwrap();
    let st = bin().args(["run", "--out"]).arg(&out).arg(scenario()).output().unwrap();
    assert!(st.status.success());
    let dump = std::fs::read_to_string(out.join("overlay.tsv")).unwrap();
    // Drop one node's rows: the others now reference a node the dump lacks.
    let victim = dump.lines().nth(1).unwrap().split('\t').next().unwrap().to_string();
    let kept: String = dump
        .lines()
        .filter(|l| !l.starts_with(&victim))
        .map(|l| format!("{l}\n"))
        .collect();
    let bad = out.join("bad.tsv");
    std::fs::write(&bad, kept).unwrap();
    let check = bin().arg("overlay-check").arg(&bad).output().unwrap();
    assert_eq!(check.status.code(), Some(2));
    std::fs::remove_dir_all(out).unwrap();
}

#[test]
fn unknown_keys_are_rejected() {
    let out = tmp("schema");
    std::fs::create_dir_all(&out).unwrap();
    let sc = out.join("bad.toml");
    std::fs::write(&sc, "nodes = 10\nseed = 1\nbogus = 3\n").unwrap();
    let st = bin().args(["run", "--out"]).arg(&out).arg(&sc).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&st.stderr).contains("bogus"));
    std::fs::remove_dir_all(out).unwrap();
}
