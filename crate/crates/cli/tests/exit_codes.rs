use std::process::{Command, Output};

fn lfl(out: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfl"))
        .args(args)
        .args(["--out", out.to_str().unwrap()])
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn invalid_config_exits_2_and_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lfl(tmp.path(), &["show-config", "--set", "decision.pi_m=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("decision.pi_m"), "{}", stderr(&o));

    let o = lfl(tmp.path(), &["show-config", "--set", "dataset.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));

    let o = lfl(tmp.path(), &["show-config", "--set", "analysis.formats=[\"pdf\"]"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_arguments_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(lfl(tmp.path(), &["no-such-stage"]).status.code(), Some(2));
    assert_eq!(
        lfl(tmp.path(), &["show-config", "--workers", "0"]).status.code(),
        Some(2)
    );
    let missing = tmp.path().join("absent.toml");
    let o = lfl(tmp.path(), &["show-config", "--config", missing.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn missing_artifact_exits_1_and_names_its_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lfl(tmp.path(), &["invert"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));
}

#[test]
fn show_config_prints_hash_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lfl(tmp.path(), &["show-config", "--seed", "4"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("# config_hash "));
    let path = tmp.path().join("resolved.toml");
    std::fs::write(&path, &text).unwrap();
    let again = lfl(tmp.path(), &["show-config", "--config", path.to_str().unwrap()]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}
