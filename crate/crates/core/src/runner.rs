//! Runs the subject project's tests in a child process with a timeout and
//! classifies the outcome.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use regex::Regex;
use tracing::debug;
use wait_timeout::ChildExt;

use crate::config::ProjectConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    TestsFailed,
    TimedOut,
    /// The runner exited with a code that does not mean "tests failed".
    Infrastructure,
}

#[derive(Debug, Clone)]
pub struct TestRun {
    pub outcome: Outcome,
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub wall_time: Duration,
    /// Test ids matched by the failure patterns, in output order, deduplicated.
    pub failed_tests: Vec<String>,
}

impl TestRun {
    pub fn passed(&self) -> bool {
        self.outcome == Outcome::Passed
    }

    pub fn log(&self) -> String {
        let mut s = self.stdout.trim_end().to_string();
        if !self.stderr.trim().is_empty() {
            if !s.is_empty() {
                s.push('\n');
            }
            s.push_str(self.stderr.trim_end());
        }
        s
    }
}

/// Invocation of the configured test command on one tree.
#[derive(Debug, Clone)]
pub struct TestInvocation<'a> {
    pub tree: &'a Path,
    pub config: &'a ProjectConfig,
    pub tests: &'a [String],
    pub timeout: Duration,
    /// Prepended to `PYTHONPATH`.
    pub extra_paths: Vec<PathBuf>,
    pub env: Vec<(String, String)>,
}

impl<'a> TestInvocation<'a> {
    pub fn new(tree: &'a Path, config: &'a ProjectConfig, tests: &'a [String]) -> Self {
        TestInvocation {
            tree,
            config,
            tests,
            timeout: Duration::from_secs(config.timeout_seconds),
            extra_paths: Vec::new(),
            env: Vec::new(),
        }
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env.push((key.into(), value.into()));
        self
    }

    pub fn extra_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.extra_paths.push(path.into());
        self
    }

    /// Expands the runner template: `{TESTS}` as a whole word becomes one
    /// argument per test id.
    pub fn argv(&self) -> Vec<String> {
        let mut argv = Vec::new();
        for word in self.config.test_runner.split_whitespace() {
            if word == "{TESTS}" {
                argv.extend(self.tests.iter().cloned());
            } else {
                argv.push(word.replace("{TESTS}", &self.tests.join(" ")));
            }
        }
        argv
    }

    fn pythonpath(&self) -> std::ffi::OsString {
        let mut paths: Vec<PathBuf> = self.extra_paths.clone();
        paths.push(self.tree.to_path_buf());
        paths.extend(self.config.source_dirs.iter().map(|d| self.tree.join(d)));
        if let Some(existing) = std::env::var_os("PYTHONPATH") {
            paths.extend(std::env::split_paths(&existing));
        }
        std::env::join_paths(paths).unwrap_or_default()
    }

    pub fn run(&self) -> Result<TestRun> {
        let argv = self.argv();
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::Config("empty test_runner".into()))?;
        debug!(tree = %self.tree.display(), ?argv, "running tests");
        let mut cmd = Command::new(program);
        cmd.args(args)
            .current_dir(self.tree)
            .env("PYTHONPATH", self.pythonpath())
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        for (k, v) in &self.env {
            cmd.env(k, v);
        }
        let started = Instant::now();
        let mut child = cmd
            .spawn()
            .map_err(|e| Error::Runner(format!("cannot start `{program}`: {e}")))?;
        let mut out = child.stdout.take().expect("piped stdout");
        let mut err = child.stderr.take().expect("piped stderr");
        let out_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = out.read_to_end(&mut buf);
            buf
        });
        let err_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = err.read_to_end(&mut buf);
            buf
        });
        let status = child
            .wait_timeout(self.timeout)
            .map_err(|e| Error::Runner(e.to_string()))?;
        let timed_out = status.is_none();
        let status = match status {
            Some(s) => s,
            None => {
                let _ = child.kill();
                child.wait().map_err(|e| Error::Runner(e.to_string()))?
            }
        };
        let wall_time = started.elapsed();
        let stdout = String::from_utf8_lossy(&out_reader.join().unwrap_or_default()).into_owned();
        let stderr = String::from_utf8_lossy(&err_reader.join().unwrap_or_default()).into_owned();
        let exit_code = status.code();
        let outcome = if timed_out {
            Outcome::TimedOut
        } else if exit_code == Some(0) {
            Outcome::Passed
        } else if exit_code.is_some_and(|c| self.config.failure_exit_codes.contains(&c)) {
            Outcome::TestsFailed
        } else {
            Outcome::Infrastructure
        };
        let failed_tests = failed_test_ids(&self.config.failure_patterns, &stdout, &stderr);
        Ok(TestRun {
            outcome,
            exit_code,
            stdout,
            stderr,
            wall_time,
            failed_tests,
        })
    }
}

/// Applies the failure patterns to both streams; capture group 1 is the id.
pub fn failed_test_ids(patterns: &[String], stdout: &str, stderr: &str) -> Vec<String> {
    let mut ids: Vec<String> = Vec::new();
    for p in patterns {
        let Ok(re) = Regex::new(p) else { continue };
        for text in [stdout, stderr] {
            for cap in re.captures_iter(text) {
                if let Some(m) = cap.get(1) {
                    let id = m.as_str().to_string();
                    if !ids.contains(&id) {
                        ids.push(id);
                    }
                }
            }
        }
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(runner: &str) -> ProjectConfig {
        ProjectConfig {
            test_runner: runner.into(),
            ..ProjectConfig::from_json(
                r#"{"source_dirs":["src"],"test_dirs":["tests"],"test_runner":"x {TESTS}"}"#,
            )
            .unwrap()
        }
    }

    #[test]
    fn argv_expands_tests() {
        let c = cfg("python3 -m pytest -q {TESTS}");
        let tests = vec!["a.py::t1".to_string(), "a.py::t2".to_string()];
        let inv = TestInvocation::new(Path::new("."), &c, &tests);
        assert_eq!(inv.argv(), ["python3", "-m", "pytest", "-q", "a.py::t1", "a.py::t2"]);
    }

    #[test]
    fn exit_codes_are_classified() {
        let dir = tempfile::tempdir().unwrap();
        let none: Vec<String> = vec![];
        let ok = cfg("true {TESTS}");
        assert_eq!(TestInvocation::new(dir.path(), &ok, &none).run().unwrap().outcome, Outcome::Passed);
        let fail = cfg("false {TESTS}");
        assert_eq!(
            TestInvocation::new(dir.path(), &fail, &none).run().unwrap().outcome,
            Outcome::TestsFailed
        );
        std::fs::write(dir.path().join("exit3.sh"), "exit 3\n").unwrap();
        let infra = cfg("sh exit3.sh {TESTS}");
        assert_eq!(
            TestInvocation::new(dir.path(), &infra, &none).run().unwrap().outcome,
            Outcome::Infrastructure
        );
    }

    #[test]
    fn timeout_kills_the_child() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("sleep 10 {TESTS}");
        let none: Vec<String> = vec![];
        let run = TestInvocation::new(dir.path(), &c, &none)
            .timeout(Duration::from_millis(200))
            .run()
            .unwrap();
        assert_eq!(run.outcome, Outcome::TimedOut);
        assert!(run.wall_time < Duration::from_secs(5));
    }

    #[test]
    fn missing_program_is_a_runner_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("definitely-not-a-program-fc {TESTS}");
        let none: Vec<String> = vec![];
        assert!(matches!(
            TestInvocation::new(dir.path(), &c, &none).run(),
            Err(Error::Runner(_))
        ));
    }

    #[test]
    fn failure_ids_are_deduplicated() {
        let pats = vec![r"(?m)^FAILED (\S+)".to_string()];
        let ids = failed_test_ids(&pats, "FAILED a::b - x\nFAILED a::c\nFAILED a::b\n", "");
        assert_eq!(ids, ["a::b", "a::c"]);
    }
}
