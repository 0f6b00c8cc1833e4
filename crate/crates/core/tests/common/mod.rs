//! Shared helpers for integration tests: fixture copies and project setup.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use flycatcher_core::config::ToolConfig;
use flycatcher_core::fsutil;
use flycatcher_core::llm::ScriptedProvider;
use flycatcher_core::subject::{SubjectProject, TestCase};

pub const TARGET_TEST: &str =
    "tests/test_datanode.py::test_get_children_should_return_empty_set_when_there_are_no_children";

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// A scratch copy of a fixture project.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: ToolConfig,
    pub project: SubjectProject,
}

impl Fixture {
    pub fn root(&self) -> &Path {
        self.project.root.as_path()
    }

    pub fn scratch(&self) -> PathBuf {
        self.dir.path().join("scratch")
    }

    pub fn script(&self, name: &str) -> ScriptedProvider {
        ScriptedProvider::from_path(&self.root().join("scripts").join(name)).unwrap()
    }

    pub fn test(&self, id: &str) -> TestCase {
        self.project
            .test_cases()
            .unwrap()
            .into_iter()
            .find(|t| t.id == id)
            .unwrap_or_else(|| panic!("no test {id}"))
    }
}

pub fn load(name: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join(name);
    fsutil::copy_tree(&fixture(name), &root, &[]).unwrap();
    let config = ToolConfig::load(&root.join("flycatcher.json")).unwrap();
    let project = SubjectProject::scan(&root, config.project.clone()).unwrap();
    Fixture {
        dir,
        config,
        project,
    }
}

pub fn python_available() -> bool {
    std::process::Command::new("python3")
        .args(["-c", "import pytest"])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}
