//! Fixture copies and binary invocation shared by the CLI test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flycatcher_core::fsutil;

pub const TARGET_TEST: &str =
    "tests/test_datanode.py::test_get_children_should_return_empty_set_when_there_are_no_children";

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// Copies a fixture into `parent/<name>` and returns the copy's root.
pub fn copy_fixture(name: &str, parent: &Path) -> PathBuf {
    let root = parent.join(name);
    fsutil::copy_tree(&fixture(name), &root, &[]).unwrap();
    root
}

pub fn flycatcher(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flycatcher"))
        .arg("--config")
        .arg(root.join("flycatcher.json"))
        .args(args)
        .output()
        .expect("spawn flycatcher")
}

pub fn python_available() -> bool {
    Command::new("python3")
        .args(["-c", "import pytest"])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}
