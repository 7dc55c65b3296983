#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_shadow-defense");

/// Runs the CLI with logging silenced and the output-directory variable
/// cleared, so only explicit flags decide where files go.
pub fn run(args: &[&str]) -> Output {
    command(args).output().expect("spawn the CLI")
}

/// [`run`] from another working directory.
pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    command(args).current_dir(dir).output().expect("spawn the CLI")
}

fn command(args: &[&str]) -> Command {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env("RUST_LOG", "warn").env_remove("SHADOW_DEFENSE_OUTPUT_DIR");
    cmd
}

pub fn run_ok(args: &[&str]) -> Output {
    check(args, run(args))
}

pub fn run_ok_in(dir: &Path, args: &[&str]) -> Output {
    check(args, run_in(dir, args))
}

fn check(args: &[&str], out: Output) -> Output {
    assert!(
        out.status.success(),
        "`{}` failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn write_config(dir: &Path, name: &str, toml: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, toml).unwrap();
    path
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let bytes = fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_slice(&bytes).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// A two-class synthetic setup small enough to train in seconds.
pub const TINY_CONFIG: &str = r#"
[dataset.synthetic]
class_count = 2
samples_per_class = 10
seed = 3

[train]
epochs = 2
batch_size = 8

[pso]
particles = 3
iterations = 3

[eval]
k_values = [0.43]
trials = 1

[boundcheck]
samples = 50
"#;
