//! Dynamic validation (validation tests against a tree instrumented with
//! one checker) and cross-validation (the whole suite with every checker).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::config::OnViolation;
use crate::error::{Error, Result};
use crate::instrument::{instrument, InstrumentationPlan};
use crate::pipeline::{CheckerArtifact, DynamicCheck, Feedback, GUARD_MESSAGE};
use crate::runner::{Outcome, TestInvocation, TestRun};
use crate::subject::SubjectProject;

/// Cap on the log text fed back to the model.
const MAX_FEEDBACK_CHARS: usize = 6000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub checker_id: String,
    pub tests_run: usize,
    /// (test id, log excerpt)
    pub failures: Vec<(String, String)>,
    pub recursion_hit: bool,
    pub wall_time_s: f64,
    pub timed_out: bool,
    /// Raw log when the runner failed for reasons other than tests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infrastructure_log: Option<String>,
}

impl RunOutcome {
    pub fn from_run(checker_id: &str, tests_run: usize, run: &TestRun) -> Self {
        let log = run.log();
        let summary = failure_summary(&log);
        let mut failures: Vec<(String, String)> = run
            .failed_tests
            .iter()
            .map(|t| {
                let excerpt = summary
                    .iter()
                    .find(|l| l.contains(t.as_str()))
                    .cloned()
                    .unwrap_or_default();
                (t.clone(), excerpt)
            })
            .collect();
        let infrastructure_log = (run.outcome == Outcome::Infrastructure).then(|| log.clone());
        if run.outcome == Outcome::TestsFailed && failures.is_empty() {
            failures.push(("<unknown>".into(), truncate(&log)));
        }
        RunOutcome {
            checker_id: checker_id.to_string(),
            tests_run,
            failures,
            recursion_hit: log.contains(GUARD_MESSAGE),
            wall_time_s: run.wall_time.as_secs_f64(),
            timed_out: run.outcome == Outcome::TimedOut,
            infrastructure_log,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
            && !self.recursion_hit
            && !self.timed_out
            && self.infrastructure_log.is_none()
    }

    /// Priority: recursion, timeout, failing tests (an infrastructure
    /// failure counts as failing tests), pass.
    pub fn classify(&self, cap_s: f64) -> Option<Feedback> {
        if self.recursion_hit {
            Some(Feedback::recursive_call())
        } else if self.timed_out || self.wall_time_s > cap_s {
            Some(Feedback::timeout(cap_s))
        } else if let Some(log) = &self.infrastructure_log {
            Some(Feedback::test_failure(&truncate(log)))
        } else if !self.failures.is_empty() {
            let logs: Vec<String> = self
                .failures
                .iter()
                .map(|(t, e)| if e.is_empty() { t.clone() } else { e.clone() })
                .collect();
            Some(Feedback::test_failure(&truncate(&logs.join("\n"))))
        } else {
            None
        }
    }
}

fn truncate(s: &str) -> String {
    if s.chars().count() <= MAX_FEEDBACK_CHARS {
        return s.to_string();
    }
    let tail: String = s.chars().rev().take(MAX_FEEDBACK_CHARS).collect::<Vec<_>>().into_iter().rev().collect();
    format!("...{tail}")
}

/// Short-summary lines of a pytest-style log (`FAILED ...`, `ERROR ...`)
/// and its `E   ` detail lines, without timings.
fn failure_summary(log: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in log.lines() {
        let l = line.trim_end();
        if (l.starts_with("FAILED ") || l.starts_with("ERROR ")) && !out.iter().any(|o| o == l) {
            out.push(l.to_string());
        }
    }
    out
}

/// Validates checkers by running the validation tests on a fresh tree
/// instrumented with the checker alone.
pub struct DynamicValidator<'a> {
    pub project: &'a SubjectProject,
    /// Validation test ids, target first.
    pub tests: Vec<String>,
    pub cap_s: f64,
    /// Parent directory for instrumented workspaces.
    pub scratch: PathBuf,
    pub last_outcome: Option<RunOutcome>,
}

impl<'a> DynamicValidator<'a> {
    pub fn new(project: &'a SubjectProject, tests: Vec<String>, cap_s: f64, scratch: PathBuf) -> Self {
        DynamicValidator {
            project,
            tests,
            cap_s,
            scratch,
            last_outcome: None,
        }
    }

    pub fn run(&mut self, artifact: &CheckerArtifact) -> Result<RunOutcome> {
        dynamic_validate(self.project, artifact, &self.tests, self.cap_s, &self.scratch)
    }
}

impl DynamicCheck for DynamicValidator<'_> {
    fn check(&mut self, artifact: &CheckerArtifact) -> Option<Feedback> {
        match self.run(artifact) {
            Ok(outcome) => {
                let verdict = outcome.classify(self.cap_s);
                self.last_outcome = Some(outcome);
                verdict
            }
            Err(e) => {
                warn!(checker = %artifact.id, "dynamic validation could not run: {e}");
                Some(Feedback::test_failure(&e.to_string()))
            }
        }
    }
}

/// Instruments a scratch copy with `artifact` and runs `tests` on it.
pub fn dynamic_validate(
    project: &SubjectProject,
    artifact: &CheckerArtifact,
    tests: &[String],
    cap_s: f64,
    scratch: &Path,
) -> Result<RunOutcome> {
    std::fs::create_dir_all(scratch).map_err(|e| Error::io(scratch, e))?;
    let work = tempfile::Builder::new()
        .prefix("validate-")
        .tempdir_in(scratch)
        .map_err(|e| Error::io(scratch, e))?;
    let tree = work.path().join("tree");
    let plan = InstrumentationPlan::new(vec![artifact.clone()], &tree);
    instrument(project, &plan)?;
    let run = TestInvocation::new(&tree, &project.config, tests)
        .timeout(Duration::from_secs_f64(cap_s))
        .run()?;
    let outcome = RunOutcome::from_run(&artifact.id, tests.len(), &run);
    info!(checker = %artifact.id, passed = outcome.passed(), wall_s = outcome.wall_time_s, "dynamic validation");
    Ok(outcome)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossReport {
    pub tests_run: usize,
    /// Checker id → cross-validated.
    pub cross_validated: BTreeMap<String, bool>,
    /// Checker id → tests in which it reported a violation or crashed.
    pub failures: BTreeMap<String, Vec<String>>,
    /// Failing tests that could not be attributed to any checker.
    pub unattributed: Vec<String>,
}

/// Checker ids named in violation, recursion or checker-module traceback
/// lines of `text`.
pub fn attributed_checkers(text: &str) -> BTreeSet<String> {
    let re = Regex::new(r"fc-(?:violation|recursion)\[([A-Za-z0-9_]+)\]|fc_runtime[/\\]checkers[/\\]([A-Za-z0-9_]+)\.py")
        .expect("valid regex");
    re.captures_iter(text)
        .filter_map(|c| c.get(1).or_else(|| c.get(2)))
        .map(|m| m.as_str().to_string())
        .collect()
}

/// Runs `tests` on one tree instrumented with every checker, in log mode
/// so one checker's violation does not hide another's. A checker is
/// cross-validated when no violation is attributed to it.
pub fn cross_validate(
    project: &SubjectProject,
    validated: &[CheckerArtifact],
    tests: &[String],
    timeout: Duration,
    scratch: &Path,
) -> Result<CrossReport> {
    if validated.is_empty() {
        return Ok(CrossReport::default());
    }
    std::fs::create_dir_all(scratch).map_err(|e| Error::io(scratch, e))?;
    let work = tempfile::Builder::new()
        .prefix("cross-")
        .tempdir_in(scratch)
        .map_err(|e| Error::io(scratch, e))?;
    let tree = work.path().join("tree");
    let plan = InstrumentationPlan::new(validated.to_vec(), &tree).with_on_violation(OnViolation::Log);
    instrument(project, &plan)?;
    let violation_log = work.path().join("violations.log");
    let run = TestInvocation::new(&tree, &project.config, tests)
        .timeout(timeout)
        .env("FC_VIOLATION_LOG", violation_log.to_string_lossy())
        .run()?;
    if matches!(run.outcome, Outcome::Infrastructure | Outcome::TimedOut) {
        return Err(Error::Runner(format!(
            "cross-validation run failed ({:?}):\n{}",
            run.outcome,
            run.log()
        )));
    }
    let logged = std::fs::read_to_string(&violation_log).unwrap_or_default();
    let mut report = CrossReport {
        tests_run: tests.len(),
        ..CrossReport::default()
    };
    // Violations in log mode do not fail tests; attribute them globally.
    for id in attributed_checkers(&logged) {
        report.failures.entry(id).or_default().push("<logged>".into());
    }
    // Crashes (exceptions other than violations) fail tests.
    let summary = failure_summary(&run.log());
    let full = run.log();
    for test in &run.failed_tests {
        let mut ids = BTreeSet::new();
        for line in summary.iter().filter(|l| l.contains(test.as_str())) {
            ids.extend(attributed_checkers(line));
        }
        if ids.is_empty() {
            ids = section_for(&full, test).map(attributed_checkers).unwrap_or_default();
        }
        if ids.is_empty() {
            report.unattributed.push(test.clone());
        }
        for id in ids {
            report.failures.entry(id).or_default().push(test.clone());
        }
    }
    for c in validated {
        let ok = !report.failures.contains_key(&c.id);
        report.cross_validated.insert(c.id.clone(), ok);
    }
    Ok(report)
}

/// The pytest failure section (`____ name ____` ... next header) of a test.
fn section_for<'t>(log: &'t str, test_id: &str) -> Option<&'t str> {
    let name = test_id.rsplit("::").next()?;
    let header = format!(" {name} _");
    let start = log.find(&header)?;
    let rest = &log[start + header.len()..];
    let end = rest.find("\n___").map_or(rest.len(), |i| i + 1);
    Some(&rest[..end])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome() -> RunOutcome {
        RunOutcome {
            checker_id: "ck".into(),
            tests_run: 3,
            failures: vec![],
            recursion_hit: false,
            wall_time_s: 1.0,
            timed_out: false,
            infrastructure_log: None,
        }
    }

    #[test]
    fn classification_priority() {
        use crate::pipeline::FeedbackKind::*;
        let mut o = outcome();
        assert!(o.classify(10.0).is_none());
        o.failures.push(("t".into(), "FAILED t - boom".into()));
        assert_eq!(o.classify(10.0).unwrap().kind, TestFailure);
        assert!(o.classify(10.0).unwrap().message.contains("FAILED t - boom"));
        o.wall_time_s = 11.0;
        assert_eq!(o.classify(10.0).unwrap().kind, Timeout);
        o.recursion_hit = true;
        assert_eq!(o.classify(10.0).unwrap().kind, RecursiveCall);
    }

    #[test]
    fn infrastructure_counts_as_test_failure() {
        let mut o = outcome();
        o.infrastructure_log = Some("collection error".into());
        let f = o.classify(10.0).unwrap();
        assert_eq!(f.kind, crate::pipeline::FeedbackKind::TestFailure);
        assert!(f.message.contains("collection error"));
    }

    #[test]
    fn attribution_by_embedded_id() {
        let text = "FAILED t::a - fc_runtime.CheckerViolation: fc-violation[ck_a_1] x\nfc-recursion[ck_b] y\n  File \"/w/fc_runtime/checkers/ck_c.py\", line 3";
        let ids: Vec<String> = attributed_checkers(text).into_iter().collect();
        assert_eq!(ids, ["ck_a_1", "ck_b", "ck_c"]);
    }

    #[test]
    fn summary_lines_are_deduplicated() {
        let log = "E  boom\nFAILED a::b - x\nFAILED a::b - x\n1 failed in 0.1s\n";
        assert_eq!(failure_summary(log), ["FAILED a::b - x"]);
    }

    #[test]
    fn section_extraction() {
        let log = "____ test_a ____\nx\nfc-violation[ck_q] boom\n____ test_b ____\ny\n";
        assert!(section_for(log, "f.py::test_a").unwrap().contains("ck_q"));
        assert!(!section_for(log, "f.py::test_b").unwrap().contains("ck_q"));
    }
}
