use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn btsumm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btsumm"))
        .args(args)
        .current_dir(dir)
        .env("BTSUMM_LOG", "warn")
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"
[run]
seed = 11
work_dir = "work"

[data]
source = "synthetic"
synth_pairs = 200
synth_slots = 4
synth_words_per_slot = 5
synth_fillers = 8
synth_k = 2
summary_frac = 0.45
fulltext_frac = 0.45
val_frac = 0.05
test_frac = 0.05

[embeddings]
align_dim = 8
model_dim = 8
epochs = 1

[dbae]
hidden = 8
layers = 1
epochs = 1

[moments]
hidden = 8
epochs = 1

[seq2seq]
hidden = 8
epochs = 1

[generation]
min_full = 4
max_full = 8
max_summ = 4

[loop]
max_iteration = 2
"#;

#[test]
fn missing_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[run]\nseed = 1\n").unwrap();
    let out = btsumm(dir.path(), &["--config", "c.toml", "prepare"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.source"));

    fs::write(dir.path().join("d.toml"), "[data]\nsource = \"synthetic\"\nsorce = 1\n").unwrap();
    let out = btsumm(dir.path(), &["--config", "d.toml", "prepare"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_artifact_has_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    let out = btsumm(dir.path(), &["--config", "c.toml", "align"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn commands_compose_into_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    for cmd in ["prepare", "train-embeddings", "align", "init-prthr", "init-dbae", "init-moments", "loop", "evaluate"] {
        let out = btsumm(dir.path(), &["--config", "c.toml", cmd]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = btsumm(dir.path(), &["--config", "c.toml", "report"]);
    let table = String::from_utf8_lossy(&out.stdout);
    for row in ["Lead-8", "(PrThr)-2", "(DBAE)-2", "(Mu1)-2", "(All)-2"] {
        assert!(table.contains(row), "{row} missing from\n{table}");
    }

    let w = dir.path().join("work");
    let ds = w.join("runs/run/PrThr/0/dataset.tsv");
    let out = btsumm(
        dir.path(),
        &["--config", "c.toml", "train-seq2seq", "--data", ds.to_str().unwrap(), "--direction", "S2F", "--output", "extra/s2f.ckpt"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(dir.path().join("in.txt"), "a b\n").unwrap();
    let out = btsumm(
        dir.path(),
        &["--config", "c.toml", "generate", "--model", "extra/s2f.ckpt", "--input", "in.txt", "--output", "extra/out.txt", "--mode", "sample"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let generated = fs::read_to_string(dir.path().join("extra/out.txt")).unwrap();
    let n = generated.trim().split(' ').count();
    assert!((4..=8).contains(&n), "{generated:?}");

    // Environment overrides reach the config echo.
    let out = Command::new(env!("CARGO_BIN_EXE_btsumm"))
        .args(["--config", "c.toml", "prepare"])
        .current_dir(dir.path())
        .env("BTSUMM_LOG", "warn")
        .env("BTSUMM_RUN_ID", "envrun")
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest = fs::read_to_string(w.join("data/prepare.manifest")).unwrap();
    assert!(manifest.contains("id = \"envrun\""));
}
