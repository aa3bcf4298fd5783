#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn nnfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnfc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("nnfc binary runs")
}

/// Runs and insists on success, returning stdout.
pub fn ok(args: &[&str]) -> String {
    let out = nnfc(args);
    assert!(
        out.status.success(),
        "nnfc {args:?} exited with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn code(args: &[&str]) -> i32 {
    nnfc(args).status.code().expect("exit code")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Options for a model that trains in seconds.
pub const FAST: &[&str] = &["--d-model", "16", "--enc-layers", "1", "--dec-layers", "1", "--epochs", "2", "--cam-epochs", "1"];
