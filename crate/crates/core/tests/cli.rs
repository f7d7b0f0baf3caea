use std::process::{Command, Output};

use mdw::config::RunConfig;

fn mdw(args: &[&str], root: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdw"))
        .args(args)
        .env("MDW_RUN_ROOT", root)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn show_config_echoes_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mdw(&["show-config", "--seed", "9", "--set", "data.eta=0.5", "--set", "run.id=cli"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed = RunConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    let expected = RunConfig::default()
        .with_overrides(["data.eta=0.5", "run.id=cli", "run.seed=9"])
        .unwrap();
    assert_eq!(echoed, expected);
}

#[test]
fn exit_codes_separate_failure_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mdw(&["show-config", "--set", "data.eta=1.5"], tmp.path()).status.code(), Some(2));
    assert_eq!(mdw(&["show-config", "--set", "no.such_key=1"], tmp.path()).status.code(), Some(2));
    let missing = mdw(&["evaluate"], tmp.path());
    assert_eq!(missing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("gen-data"));
}
