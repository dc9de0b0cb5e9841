use std::path::Path;
use std::process::{Command, Output};

fn anchorsum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchorsum"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(root: &Path) -> String {
    let p = |s: &str| root.join(s).display().to_string();
    let text = format!(
        r#"data_dir = "{}"
checkpoint_dir = "{}"
report_dir = "{}"
synth_train = 3
synth_test = 2
synth_sentences = 12
synth_decisions = 1
d_model = 16
n_heads = 2
d_ff = 32
n_layers = 1
recon_warmup_steps = 2
recon_steps = 3
summ_steps = 3
recon_batch = 2
summ_batch = 2
buckets = 32
max_summary_len = 6
"#,
        p("data"),
        p("ckpt"),
        p("reports")
    );
    let path = root.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn compress_short_input_is_identity() {
    let out = anchorsum(&["compress", "--n", "5", "--c", "1024"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("buckets=5"), "{stdout}");
    assert!(stdout.contains("identity"), "{stdout}");
}

#[test]
fn unknown_flag_prints_usage() {
    let out = anchorsum(&["score", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = anchorsum(&["synth-data", "--config", &cfg, "--window", "0"]);
    assert!(!out.status.success());
    assert!(!dir.path().join("data").exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 3\n").unwrap();
    let out = anchorsum(&["synth-data", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn missing_upstream_artifact_names_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = anchorsum(&["train-recon", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("preprocess"), "{err}");
}

#[test]
fn lock_file_blocks_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(anchorsum(&["synth-data", "--config", &cfg]).status.success());
    assert!(anchorsum(&["preprocess", "--config", &cfg]).status.success());
    std::fs::create_dir_all(dir.path().join("ckpt")).unwrap();
    std::fs::write(dir.path().join("ckpt/.lock"), "").unwrap();
    let out = anchorsum(&["train-recon", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(!dir.path().join("ckpt/reconstructor.bin").exists());
}

#[test]
fn pipeline_is_reproducible() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let out = anchorsum(&["pipeline", "--config", &cfg]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let reports = dir.path().join("reports");
        let rouge = std::fs::read(reports.join("rouge.csv")).unwrap();
        let summaries = std::fs::read_to_string(reports.join("summaries.jsonl")).unwrap();
        (rouge, summaries)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(sa.lines().count(), 2);
    let header = String::from_utf8(a).unwrap();
    assert!(header.starts_with("meeting_id,r1,r2,rl,rlsum"), "{header}");
}
