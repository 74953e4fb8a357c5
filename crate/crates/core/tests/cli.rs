use std::process::Command;

fn lsan(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lsan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[test]
fn unknown_subcommand_exits_nonzero_with_usage() {
    let out = lsan(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn count_params_without_dataset() {
    let out = lsan(&["count-params", "--set", "num_items=12101"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("embedding 774,784 (50.02% of a full table of 1,548,928)"), "{text}");
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = format!("root={}", dir.path().display());
    let out = lsan(&["prepare-data", "--set", &root]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("interactions.tsv"));
}
