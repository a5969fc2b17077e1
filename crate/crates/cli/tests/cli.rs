//! Exit codes, config echo and reproducibility of the `r2i` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn r2i(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r2i"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn r2i")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SMALL: &str = "seed = 3\n[dataset]\ntrain = 12\ntest = 4\n";

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&r2i(d.path(), &[])), 2);
    assert_eq!(code(&r2i(d.path(), &["frobnicate"])), 2);
    assert_eq!(code(&r2i(d.path(), &["--fraction", "1.5", "gen-data"])), 2);
    assert_eq!(code(&r2i(d.path(), &["--template", "poem", "gen-data"])), 2);
    assert_eq!(code(&r2i(d.path(), &["train", "vae"])), 2);
    fs::write(d.path().join("bad.toml"), "seeed = 1\n").unwrap();
    assert_eq!(code(&r2i(d.path(), &["--config", "bad.toml", "gen-data"])), 2);
    assert_eq!(code(&r2i(d.path(), &["--help"])), 0);
}

#[test]
fn missing_inputs_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let o = r2i(d.path(), &["sweep-fraction", "--values", "0.5"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let o = r2i(d.path(), &["translate", "--in", "nope.png", "--class", "3"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_reproducible_and_echoes_its_config() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("small.toml"), SMALL).unwrap();
    for name in ["a", "b"] {
        let o = r2i(d.path(), &["--config", "small.toml", "--data", name, "--out", &format!("out-{name}"), "gen-data"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = tree(&d.path().join("a"));
    assert_eq!(a.len(), 2 * 16 + 1);
    assert_eq!(a, tree(&d.path().join("b")));

    let echo = fs::read_to_string(d.path().join("out-a/gen-data/gen-data.config.toml")).unwrap();
    assert!(echo.contains("seed = 3"), "{echo}");
    assert!(echo.contains("train = 12"), "{echo}");
    let hashes: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("out-a/gen-data/gen-data.hashes.json")).unwrap()).unwrap();
    assert!(hashes.to_string().contains("manifest.jsonl"), "{hashes}");
}

#[test]
fn model_free_verify_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = r2i(d.path(), &["verify", "--model-free"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}{}", String::from_utf8_lossy(&o.stderr));
    assert!(!stdout.contains("FAIL"), "{stdout}");
    let csv = fs::read_to_string(d.path().join("out/verify/checks.csv")).unwrap();
    assert!(csv.starts_with("check,passed,detail,seconds"));
    assert_eq!(csv.lines().count(), 7);
}
