use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
[model]
n_conv = 1
[model.block]
n_layers = 2
n_heads = 2
d_model = 16
[train]
scale_factor = 0.004
batch_size = 2
[corpus]
n_speakers = 3
n_texts = 4
[eval]
n_requests = 2
num_steps = 2
"#;

fn cast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cast-tts"))
        .current_dir(dir)
        .env("CAST_LOG_LEVEL", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = cast(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), TINY).unwrap();
    ok(dir.path(), &["--config", "run.toml", "gen-data"]);
    dir
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "train", "--out", "a"]);
    ok(d, &["--config", "run.toml", "train", "--out", "b"]);
    for f in ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "final.ckpt", "train_log.jsonl"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    // a longer budget trains further
    ok(d, &["--config", "run.toml", "--scale-factor", "0.008", "train", "--out", "c"]);
    assert_ne!(fs::read(d.join("a/final.ckpt")).unwrap(), fs::read(d.join("c/final.ckpt")).unwrap());
}

#[test]
fn staged_commands_chain_through_checkpoints() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "train", "--out", "full"]);
    ok(d, &["--config", "run.toml", "train", "--stage", "1", "--out", "s"]);
    ok(d, &["--config", "run.toml", "train", "--stage", "2", "--checkpoint", "s/stage1.ckpt", "--out", "s"]);
    ok(d, &["--config", "run.toml", "train", "--stage", "3", "--checkpoint", "s/stage2.ckpt", "--out", "s"]);
    assert_eq!(fs::read(d.join("s/stage3.ckpt")).unwrap(), fs::read(d.join("full/final.ckpt")).unwrap());
    let out = cast(d, &["--config", "run.toml", "train", "--stage", "3", "--checkpoint", "s/stage1.ckpt", "--out", "x"]);
    assert!(!out.status.success());
}

#[test]
fn synth_defaults_and_outputs() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "train", "--stage", "base", "--out", "m"]);
    let args = ["--config", "run.toml", "synth", "--checkpoint", "m/stagebase.ckpt", "--text", "abc de"];
    ok(d, &[&args[..], &["--caption", "gender=0,pitch=2,rate=1,expressiveness=1", "--out", "c.mel"]].concat());
    let side = fs::read_to_string(d.join("c.mel.txt")).unwrap();
    assert!(side.contains("w=3\n") && side.contains("num_steps=32\n") && side.contains("frames=24\n"), "{side}");
    ok(d, &[&args[..], &["--prompt-speaker", "0", "--prompt-text", "ab cd", "--out", "s.mel"]].concat());
    ok(d, &[&args[..], &["--prompt-mel", "s.mel", "--prompt-text", "abc de", "--out", "t.mel"]].concat());
    assert!(fs::metadata(d.join("t.mel")).unwrap().len() > 0);
    ok(d, &["--config", "run.toml", "eval", "--checkpoint", "m/stagebase.ckpt", "--out", "r.json"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["speech"]["n_samples"], 2);
}

#[test]
fn errors_exit_nonzero_with_a_diagnostic() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("bad.ckpt"), b"NOTACKPT\x01\0\0\0").unwrap();
    let out = cast(d, &["synth", "--checkpoint", "bad.ckpt", "--text", "a", "--caption", "gender=1,pitch=1,rate=1,expressiveness=1", "--out", "x.mel"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));

    fs::write(d.join("bad.toml"), "[train]\nscale_factor = 0\nbatch_size = 0\n[corpus]\nn_texts = 0\n").unwrap();
    let out = cast(d, &["--config", "bad.toml", "gen-data"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(!out.status.success());
    for field in ["scale_factor", "batch_size", "n_texts"] {
        assert!(err.contains(field), "{err}");
    }

    let out = cast(d, &["--config", "run.toml", "train", "--corpus", "missing.castds"]);
    assert!(!out.status.success());
}

#[test]
fn gen_data_is_deterministic() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "gen-data", "--out", "again.castds"]);
    assert_eq!(fs::read(d.join("corpus.castds")).unwrap(), fs::read(d.join("again.castds")).unwrap());
}
