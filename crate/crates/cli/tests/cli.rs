use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
images = 8
seed = 1

[tokenizer]
patch = 8
channels = 4
codebook_size = 32
hidden = 16
blocks = 1

[model]
depth = 1
dim = 32
heads = 2

[train_tokenizer]
batch_size = 4
iterations = 3

[train_ar]
batch_size = 4
iterations = 2
"#;

fn flexvar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexvar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = flexvar(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    tok: PathBuf,
    ar: PathBuf,
}

fn trained() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let tok = root.join("tok.ckpt");
    let ar = root.join("ar.ckpt");
    ok(&["train-tokenizer", "--config", s(&config), "--out", s(&tok)]);
    ok(&["train-ar", "--config", s(&config), "--tokenizer", s(&tok), "--out", s(&ar)]);
    Trained {
        _dir: dir,
        root,
        config,
        tok,
        ar,
    }
}

#[test]
fn seeded_generation_is_byte_identical() {
    let t = trained();
    let run = |name: &str| {
        let img = t.root.join(format!("{name}.ppm"));
        let dump = t.root.join(format!("{name}.txt"));
        ok(&[
            "generate", "--ar", s(&t.ar), "--tokenizer", s(&t.tok), "--config", s(&t.config), "--class", "2",
            "--seed", "11", "--steps-dump", s(&dump), "--out", s(&img),
        ]);
        (fs::read(img).unwrap(), fs::read(dump).unwrap())
    };
    let a = run("a");
    let b = run("b");
    assert!(a.0.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(a, b);
    // One dumped line per scale of the default schedule on 8x8.
    assert_eq!(String::from_utf8(a.1).unwrap().lines().count(), 7);
}

#[test]
fn intermediate_steps_are_written_at_their_own_size() {
    let t = trained();
    let (p2, p7) = (t.root.join("s2.ppm"), t.root.join("s7.ppm"));
    let outs = format!("{},{}", s(&p2), s(&p7));
    ok(&[
        "generate", "--ar", s(&t.ar), "--tokenizer", s(&t.tok), "--at-step", "2,7", "--out", &outs,
    ]);
    assert!(fs::read(&p2).unwrap().starts_with(b"P6\n16 16\n"));
    assert!(fs::read(&p7).unwrap().starts_with(b"P6\n64 64\n"));
}

#[test]
fn zero_learning_rate_continuation_keeps_the_checkpoint() {
    let t = trained();
    let frozen = t.root.join("frozen.toml");
    let cfg = TINY.replace("[train_ar]\nbatch_size = 4\niterations = 2\n", "[train_ar]\nbatch_size = 4\niterations = 1\nlr = 0.0\n");
    assert_ne!(cfg, TINY);
    fs::write(&frozen, cfg).unwrap();
    let again = t.root.join("again.ckpt");
    ok(&[
        "train-ar", "--config", s(&frozen), "--tokenizer", s(&t.tok), "--init", s(&t.ar), "--out", s(&again),
    ]);
    assert_eq!(fs::read(&t.ar).unwrap(), fs::read(&again).unwrap());
    let manifest = fs::read_to_string(t.root.join("again.ckpt.manifest")).unwrap();
    assert!(manifest.contains("command=train-ar") && manifest.contains("init="));
}

#[test]
fn edits_run_from_the_command_line() {
    let t = trained();
    let corpus = t.root.join("corpus");
    ok(&["synth", "--out", s(&corpus), "--n", "2", "--seed", "4"]);
    let mut inputs: Vec<PathBuf> = fs::read_dir(&corpus).unwrap().map(|e| e.unwrap().path()).collect();
    inputs.sort();
    let out = t.root.join("wide.ppm");
    ok(&[
        "edit", "--ar", s(&t.ar), "--tokenizer", s(&t.tok), "--task", "expand", "--in", s(&inputs[0]), "--out",
        s(&out),
    ]);
    assert!(fs::read(&out).unwrap().starts_with(b"P6\n128 64\n"));
    let out = t.root.join("outpaint.ppm");
    ok(&[
        "edit", "--ar", s(&t.ar), "--tokenizer", s(&t.tok), "--task", "outpaint", "--in", s(&inputs[1]), "--out",
        s(&out),
    ]);
    assert!(out.exists());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(flexvar(&[]).status.code(), Some(2));
    assert_eq!(flexvar(&["generate", "--bogus"]).status.code(), Some(2));
    assert_eq!(flexvar(&["grad-check", "--module", "nope"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\ndepht = 3\n").unwrap();
    let out = flexvar(&["train-tokenizer", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_sizes_are_usage_errors() {
    let t = trained();
    let out = flexvar(&[
        "generate", "--ar", s(&t.ar), "--tokenizer", s(&t.tok), "--size", "60", "--out", s(&t.root.join("x.ppm")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupted_checkpoints_exit_with_four() {
    let t = trained();
    let mut bytes = fs::read(&t.ar).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = t.root.join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = flexvar(&["generate", "--ar", s(&bad), "--tokenizer", s(&t.tok), "--out", s(&t.root.join("x.ppm"))]);
    assert_eq!(out.status.code(), Some(4));
    let missing = flexvar(&[
        "generate", "--ar", s(&t.root.join("absent.ckpt")), "--tokenizer", s(&t.tok), "--out",
        s(&t.root.join("y.ppm")),
    ]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn gradient_checks_pass_from_the_command_line() {
    let out = ok(&["grad-check", "--module", "straight-through"]);
    assert!(!out.stdout.is_empty());
}
