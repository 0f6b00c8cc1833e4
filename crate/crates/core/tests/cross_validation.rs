//! Cross-validation of several checkers against the whole fixture suite.

mod common;

use std::collections::BTreeSet;
use std::time::Duration;

use common::{load, python_available};
use flycatcher_core::corpus::CorpusSplit;
use flycatcher_core::ledger::noop_checker;
use flycatcher_core::pipeline::{refine_loop, RefineRequest, Status};
use flycatcher_core::validate::{cross_validate, DynamicValidator};

const TARGETS: [&str; 3] = [
    common::TARGET_TEST,
    "tests/test_datanode.py::test_set_data_bumps_version",
    "tests/test_datatree.py::test_nested_nodes",
];

#[test]
fn overfitted_checker_fails_cross_validation() {
    if !python_available() {
        eprintln!("skipping: python3 with pytest not available");
        return;
    }
    let fx = load("datanode_py");
    let cases = fx.project.test_cases().unwrap();
    let mut provider = fx.script("trio.json");
    let mut validated = Vec::new();
    for id in TARGETS {
        let target = fx.test(id);
        let split = CorpusSplit::build(&cases, &target, 30_000, 0, 7);
        let mut dynamic = DynamicValidator::new(&fx.project, split.validation_run(), 300.0, fx.scratch());
        let req = RefineRequest {
            project: &fx.project,
            target: &target,
            context: &[],
            budgets: &fx.config.budgets,
            transcript: None,
        };
        let r = refine_loop(&req, &mut provider, &mut dynamic).unwrap();
        assert_eq!(r.artifact.status, Status::Validated, "{id}: {:?}", r.artifact.failure_history);
        validated.push(r.artifact);
    }
    let all: Vec<String> = cases.iter().map(|t| t.id.clone()).collect();
    let report = cross_validate(&fx.project, &validated, &all, Duration::from_secs(120), &fx.scratch()).unwrap();
    let passed: Vec<&String> = report.cross_validated.iter().filter(|(_, ok)| **ok).map(|(id, _)| id).collect();
    assert_eq!(passed.len(), 2, "{report:?}");
    let nested = &validated[2].id;
    assert!(!report.cross_validated[nested]);
    assert!(report.failures.contains_key(nested));
    assert!(report.unattributed.is_empty(), "{report:?}");
}

#[test]
fn noop_checker_keeps_the_suite_green() {
    if !python_available() {
        eprintln!("skipping: python3 with pytest not available");
        return;
    }
    let fx = load("datanode_py");
    let every_method: BTreeSet<_> = fx.project.method_index.values().map(|m| m.signature.clone()).collect();
    let all: Vec<String> = fx.project.test_cases().unwrap().into_iter().map(|t| t.id).collect();
    let report = cross_validate(
        &fx.project,
        &[noop_checker(every_method)],
        &all,
        Duration::from_secs(120),
        &fx.scratch(),
    )
    .unwrap();
    assert_eq!(report.cross_validated.get("ck_noop"), Some(&true), "{report:?}");
    assert!(report.unattributed.is_empty());
}

#[test]
fn no_checkers_is_a_vacuous_pass() {
    let fx = load("datanode_py");
    let report = cross_validate(&fx.project, &[], &[], Duration::from_secs(1), &fx.scratch()).unwrap();
    assert!(report.cross_validated.is_empty());
    assert_eq!(report.tests_run, 0);
}
